// recall: command-line driver for the layer-wise merging pipeline.
//
// Stages talk to each other only through files in their --out directory. Each
// artifact X is accompanied by X.manifest.json recording the tool version,
// the stage's settings, and SHA-256 hashes of its inputs and of X itself.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/recall.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace recall;

namespace {

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::io, "SHA-256 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::io, "short write to " + path.string());
}

// Shared by every stage: where artifacts go and how they are stamped.
struct Stage {
  std::string name;
  fs::path out;
  bool cache = false;
  ordered_json settings = ordered_json::object();
  ordered_json inputs = ordered_json::array();

  void add_input(const fs::path& path) {
    inputs.push_back({{"file", path.filename().string()}, {"sha256", sha256_hex(read_file(path))}});
  }

  ordered_json manifest_for(const std::string& file, const std::string& bytes) const {
    return {{"tool", "recall"},          {"version", kVersion}, {"stage", name},
            {"settings", settings},      {"inputs", inputs},    {"artifact", {{"file", file}, {"sha256", sha256_hex(bytes)}}}};
  }

  void write(const std::string& file, const std::string& bytes) const {
    fs::create_directories(out);
    write_bytes(out / file, bytes);
    write_bytes(out / (file + ".manifest.json"), manifest_for(file, bytes).dump(2) + "\n");
  }

  // True when every listed artifact exists, is unmodified, and was produced
  // by this stage from the same inputs and settings.
  bool up_to_date(const std::vector<std::string>& files) const {
    if (!cache || files.empty()) return false;
    for (const auto& file : files) {
      const fs::path art = out / file, man = out / (file + ".manifest.json");
      if (!fs::exists(art) || !fs::exists(man)) return false;
      try {
        const auto m = ordered_json::parse(read_file(man));
        if (m.at("stage") != name || m.at("version") != kVersion || m.at("settings") != settings ||
            m.at("inputs") != inputs || m.at("artifact").at("sha256") != sha256_hex(read_file(art))) {
          return false;
        }
      } catch (const nlohmann::json::exception&) {
        return false;
      }
    }
    std::cout << name << ": up to date, skipped\n";
    return true;
  }
};

std::string to_text(const ordered_json& j) { return j.dump(2) + "\n"; }

// Options shared by the stages that compute similarities or merge plans.
struct SimilarityFlags {
  std::string metric = "rbf";
  double sigma = 1.0;
  std::size_t m_per_layer = 20;
  std::string layers = "all";
  double temperature = 1.0;
  bool include_base = false;
  bool euclidean_flip = true;
  std::uint64_t seed = 0;

  void validate() const {
    const Metric m = parse_metric(metric);
    if ((m == Metric::rbf || m == Metric::mmd) && !(sigma > 0.0 && std::isfinite(sigma))) {
      fail(ErrorKind::validation, "--sigma must be > 0 for the " + metric + " metric");
    }
    if (!(temperature > 0.0)) fail(ErrorKind::validation, "--temperature must be > 0");
    if (m_per_layer == 0) fail(ErrorKind::validation, "--m must be >= 1");
    parse_layer_selection(layers);
  }
};

struct Common {
  std::string out = "out";
  std::size_t threads = 0;
  bool cache = false;

  std::size_t thread_count() const { return threads ? threads : default_threads(); }
  Stage stage(const std::string& name) const { return {name, out, cache}; }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--out", c.out, "Output directory")->capture_default_str();
  sub->add_option("--threads", c.threads, "Worker threads (default: RECALL_THREADS or logical cores)");
  sub->add_flag("--cache", c.cache, "Skip the stage when its artifacts are up to date");
}

void add_similarity_flags(CLI::App* sub, SimilarityFlags& s, bool selection, bool weighting) {
  sub->add_option("--metric", s.metric, "rbf | cosine | euclidean | cka | mmd")->capture_default_str();
  sub->add_option("--sigma", s.sigma, "RBF / MMD kernel width")->capture_default_str();
  if (selection) {
    sub->add_option("--m", s.m_per_layer, "Typical samples per layer")->capture_default_str();
    sub->add_option("--layers", s.layers, "all | last | <layer index>")->capture_default_str();
    sub->add_option("--seed", s.seed, "Clustering seed")->capture_default_str();
  }
  if (weighting) {
    sub->add_option("--temperature", s.temperature, "Softmax temperature")->capture_default_str();
    sub->add_flag("--include-base,!--exclude-base", s.include_base, "Let the base model take part in the merge");
    sub->add_flag("--euclidean-flip,!--no-euclidean-flip", s.euclidean_flip,
                  "Use 1 - value for the Euclidean metric when weighting");
  }
}

ordered_json similarity_settings(const SimilarityFlags& s) {
  return {{"metric", s.metric},        {"sigma", s.sigma},
          {"m_per_layer", s.m_per_layer}, {"layers", s.layers},
          {"temperature", s.temperature}, {"include_base", s.include_base},
          {"euclidean_flip", s.euclidean_flip}, {"seed", s.seed}};
}

ModelConfig load_model_config(const std::string& path) {
  if (path.empty()) return bench_model_config();
  try {
    return config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, "model config " + path + ": " + e.what());
  }
}

std::string model_id_of(const Checkpoint& c, const std::string& fallback) {
  auto it = c.metadata.find("model_id");
  return it == c.metadata.end() || it->second.empty() ? fallback : it->second;
}

// ---------------------------------------------------------------------------
// gen-experts
// ---------------------------------------------------------------------------

struct GenFlags {
  std::string model_config;
  std::uint64_t seed = 0;
  double strength = 1.0;
  std::size_t n_train = 512, n_val = 64, n_test = 128;
  double noise_norm = ExpertOptions{}.noise_norm;
  double skill_gain = ExpertOptions{}.skill_gain;
};

void add_gen_flags(CLI::App* sub, GenFlags& g) {
  sub->add_option("--model-config", g.model_config, "Model architecture JSON (default: the bench model)")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", g.seed, "Seed for base weights, data, and experts")->capture_default_str();
  sub->add_option("--strength", g.strength, "Expert perturbation strength")->capture_default_str();
  sub->add_option("--n-train", g.n_train, "Training samples per task")->capture_default_str();
  sub->add_option("--n-val", g.n_val, "Validation samples per task")->capture_default_str();
  sub->add_option("--n-test", g.n_test, "Test samples per task")->capture_default_str();
  sub->add_option("--noise-norm", g.noise_norm, "Group-0 noise norm at strength 1")->capture_default_str();
  sub->add_option("--skill-gain", g.skill_gain, "Task read-out gain")->capture_default_str();
}

ordered_json gen_settings(const GenFlags& g, const ModelConfig& cfg) {
  return {{"model_config", to_json(cfg)}, {"seed", g.seed},   {"strength", g.strength},
          {"n_train", g.n_train},         {"n_val", g.n_val}, {"n_test", g.n_test},
          {"noise_norm", g.noise_norm},   {"skill_gain", g.skill_gain}};
}

ExpertOptions expert_options(const GenFlags& g, std::size_t threads) {
  ExpertOptions o;
  o.noise_norm = g.noise_norm;
  o.skill_gain = g.skill_gain;
  o.threads = threads;
  return o;
}

void write_tasks(const Stage& st, const std::vector<TaskDataset>& tasks) {
  for (const auto& t : tasks) {
    st.write(t.name + ".train.jsonl", to_jsonl(t.train));
    st.write(t.name + ".val.jsonl", to_jsonl(t.val));
    st.write(t.name + ".test.jsonl", to_jsonl(t.test));
  }
}

int cmd_gen_experts(const Common& c, const GenFlags& g) {
  const ModelConfig cfg = load_model_config(g.model_config);
  cfg.validate();
  if (!(g.strength >= 0.0)) fail(ErrorKind::validation, "--strength must be >= 0");
  Stage st = c.stage("gen-experts");
  st.settings = gen_settings(g, cfg);
  std::vector<std::string> files{"base.st"};
  for (const auto& t : task_names()) {
    files.push_back("expert." + t + ".st");
    for (const char* split : {"train", "val", "test"}) files.push_back(t + "." + split + ".jsonl");
  }
  if (st.up_to_date(files)) return 0;

  const auto tasks = gen_tasks(g.seed, {g.n_train, g.n_val, g.n_test});
  const Checkpoint base = random_checkpoint(cfg, g.seed, "base");
  st.write("base.st", serialize(base));
  write_tasks(st, tasks);
  const auto opts = expert_options(g, c.thread_count());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto e = gen_synthetic_expert(base, tasks[t], g.strength, splitmix64(g.seed * 0x100 + t), opts);
    st.write("expert." + tasks[t].name + ".st", serialize(e));
  }
  std::cout << "gen-experts: wrote base, " << tasks.size() << " experts and datasets to " << c.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// extract / select-typical / similarity
// ---------------------------------------------------------------------------

int cmd_extract(const Common& c, const std::string& model_path, const std::string& data_path, std::size_t batch) {
  Stage st = c.stage("extract");
  st.settings = {{"batch_hint", batch}};
  st.add_input(model_path);
  st.add_input(data_path);
  const Checkpoint ckpt = load(model_path);
  const std::string id = model_id_of(ckpt, fs::path(model_path).stem().string());
  const std::string file = reps_filename(id);
  if (st.up_to_date({file})) return 0;

  const ModelConfig cfg = config_from_checkpoint(ckpt);
  const auto data = load_jsonl(data_path);
  auto reps = extract(ckpt, cfg, sample_texts(data), {batch, c.thread_count()});
  reps.model_id = id;
  st.write(file, serialize(to_container(reps)));
  std::cout << "extract: " << reps.num_samples() << " samples x " << reps.num_layers() << " layers -> " << file << "\n";
  return 0;
}

int cmd_select_typical(const Common& c, const std::string& reps_path, const SimilarityFlags& s) {
  s.validate();
  Stage st = c.stage("select-typical");
  st.settings = {{"m_per_layer", s.m_per_layer}, {"layers", s.layers}, {"seed", s.seed}};
  st.add_input(reps_path);
  if (st.up_to_date({"typical.json"})) return 0;
  const auto reps = load_representations(reps_path);
  const auto typ = select_typical(reps, s.m_per_layer, parse_layer_selection(s.layers), s.seed, c.thread_count());
  st.write("typical.json", to_text(to_json(typ)));
  std::cout << "select-typical: " << typ.sample_ids.size() << " typical samples\n";
  return 0;
}

int cmd_similarity(const Common& c, const std::vector<std::string>& reps_paths, const std::string& typical_path,
                   const SimilarityFlags& s, bool cka_uncentered) {
  s.validate();
  Stage st = c.stage("similarity");
  st.settings = {{"metric", s.metric}, {"sigma", s.sigma}, {"cka_centered", !cka_uncentered}};
  for (const auto& p : reps_paths) st.add_input(p);
  if (!typical_path.empty()) st.add_input(typical_path);
  if (st.up_to_date({"similarity.json", "similarity.csv"})) return 0;

  std::vector<RepresentationSet> reps;
  for (const auto& p : reps_paths) reps.push_back(load_representations(p));
  std::vector<std::size_t> ids = reps.at(0).sample_ids;
  if (!typical_path.empty()) {
    try {
      ids = typical_from_json(nlohmann::json::parse(read_file(typical_path))).sample_ids;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::validation, typical_path + ": " + e.what());
    }
  }
  const auto table = build_table(reps, ids, parse_metric(s.metric), s.sigma, {!cka_uncentered, c.thread_count()});
  st.write("similarity.json", to_text(to_json(table)));
  st.write("similarity.csv", to_csv(table));
  std::cout << "similarity: " << table.num_models() << " models x " << table.num_layers << " layers\n";
  return 0;
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

struct MergeFlags {
  std::string method = "recall";
  std::vector<std::string> models;
  std::string base;
  std::string similarity;
  std::string anchor;
  std::vector<double> lambdas;
  double drop_rate = 0.5;
  std::string validation;
  std::string model_id = "merged";
};

int cmd_merge(const Common& c, const MergeFlags& f, const SimilarityFlags& s) {
  const MergeMethod method = parse_merge_method(f.method);
  if (f.models.empty()) fail(ErrorKind::validation, "--model is required");
  if ((method == MergeMethod::task_vector || method == MergeMethod::dare) && f.base.empty()) {
    fail(ErrorKind::validation, "--method " + f.method + " needs --base");
  }
  if (method == MergeMethod::recall && f.similarity.empty()) fail(ErrorKind::validation, "--method recall needs --similarity");
  if (method == MergeMethod::loss_weighted && f.validation.empty()) {
    fail(ErrorKind::validation, "--method loss_weighted needs --val");
  }
  if (method == MergeMethod::dare && !(f.drop_rate >= 0.0 && f.drop_rate < 1.0)) {
    fail(ErrorKind::validation, "--drop-rate must be in [0, 1)");
  }
  if (!(s.temperature > 0.0)) fail(ErrorKind::validation, "--temperature must be > 0");

  Stage st = c.stage("merge");
  st.settings = {{"method", f.method},        {"anchor", f.anchor},           {"lambdas", f.lambdas},
                 {"drop_rate", f.drop_rate},  {"temperature", s.temperature}, {"include_base", s.include_base},
                 {"euclidean_flip", s.euclidean_flip}, {"seed", s.seed},      {"model_id", f.model_id}};
  for (const auto& p : f.models) st.add_input(p);
  if (!f.base.empty()) st.add_input(f.base);
  if (!f.similarity.empty()) st.add_input(f.similarity);
  if (!f.validation.empty()) st.add_input(f.validation);
  const std::string out_file = f.model_id + ".st";
  if (st.up_to_date({out_file, "plan.json"})) return 0;

  std::vector<Checkpoint> models;
  for (const auto& p : f.models) models.push_back(load(p));
  std::optional<Checkpoint> base;
  if (!f.base.empty()) base = load(f.base);
  const std::size_t threads = c.thread_count();

  MergePlan plan;
  Checkpoint merged;
  switch (method) {
    case MergeMethod::uniform: {
      const auto ptrs = detail::pointers(models);
      plan = uniform_plan(ptrs, config_from_checkpoint(models[0]).num_taps());
      merged = merge(ptrs, plan, threads, f.model_id);
      break;
    }
    case MergeMethod::recall: {
      SimilarityTable table;
      try {
        table = table_from_json(nlohmann::json::parse(read_file(f.similarity)));
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::validation, f.similarity + ": " + e.what());
      }
      // Checkpoints are matched to table rows by model_id.
      auto find_in_table = [&](const Checkpoint& ck, const std::string& path) {
        const std::string id = model_id_of(ck, "");
        for (std::size_t i = 0; i < table.model_ids.size(); ++i)
          if (table.model_ids[i] == id) return i;
        fail(ErrorKind::completeness, "model '" + id + "' (" + path + ") is not in the similarity table");
      };
      std::vector<const Checkpoint*> row_ckpt(table.num_models(), nullptr);
      for (std::size_t i = 0; i < models.size(); ++i) row_ckpt[find_in_table(models[i], f.models[i])] = &models[i];
      RecallOptions ro{s.include_base, std::nullopt, s.temperature, s.euclidean_flip};
      if (base) {
        ro.base_index = find_in_table(*base, f.base);
        row_ckpt[*ro.base_index] = &*base;
      }
      std::size_t anchor = table.num_models();
      if (f.anchor.empty()) {
        anchor = find_in_table(models.back(), f.models.back());
      } else {
        for (std::size_t i = 0; i < table.model_ids.size(); ++i)
          if (table.model_ids[i] == f.anchor) anchor = i;
        if (anchor == table.num_models()) fail(ErrorKind::validation, "--anchor '" + f.anchor + "' is not in the table");
      }
      plan = recall_weights(table, anchor, ro);
      std::vector<const Checkpoint*> participants;
      for (std::size_t i = 0; i < table.num_models(); ++i) {
        if (!ro.include_base && ro.base_index && i == *ro.base_index) continue;
        if (!row_ckpt[i]) fail(ErrorKind::completeness, "no checkpoint given for table model '" + table.model_ids[i] + "'");
        participants.push_back(row_ckpt[i]);
      }
      merged = merge(participants, plan, threads, f.model_id);
      break;
    }
    case MergeMethod::task_vector:
    case MergeMethod::dare: {
      std::vector<double> lambdas = f.lambdas;
      if (lambdas.empty()) lambdas.assign(models.size(), 1.0);
      if (lambdas.size() == 1) lambdas.assign(models.size(), lambdas[0]);
      std::vector<Checkpoint> deltas;
      if (method == MergeMethod::dare) {
        for (std::size_t i = 0; i < models.size(); ++i) {
          deltas.push_back(dare_sparsify(*base, models[i], f.drop_rate, s.seed * 1000 + i, threads));
        }
      }
      const auto ptrs = detail::pointers(method == MergeMethod::dare ? deltas : models);
      merged = task_vector_merge(*base, ptrs, lambdas, threads);
      plan.method = method;
      for (const auto& m : models) plan.participants.push_back(model_id_of(m, ""));
      plan.lambdas = lambdas;
      plan.dare_drop_rate = method == MergeMethod::dare ? f.drop_rate : 0.0;
      plan.seed = s.seed;
      merged.metadata["model_id"] = f.model_id;
      merged.metadata["merge_method"] = to_string(method);
      merged.metadata["plan_hash"] = plan_hash(plan);
      break;
    }
    case MergeMethod::loss_weighted: {
      const auto ptrs = detail::pointers(models);
      plan = loss_weighted_plan(ptrs, config_from_checkpoint(models[0]), load_jsonl(f.validation), threads);
      merged = merge(ptrs, plan, threads, f.model_id);
      break;
    }
  }
  st.write(out_file, serialize(merged));
  st.write("plan.json", to_text(to_json(plan)));
  std::cout << "merge: " << to_string(method) << " of " << models.size() << " models -> " << out_file << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval / observe
// ---------------------------------------------------------------------------

int cmd_eval(const Common& c, const std::vector<std::string>& model_paths, const std::vector<std::string>& data_paths) {
  Stage st = c.stage("eval");
  for (const auto& p : model_paths) st.add_input(p);
  for (const auto& p : data_paths) st.add_input(p);
  if (st.up_to_date({"eval.json", "eval.csv"})) return 0;

  std::vector<std::vector<Sample>> data;
  for (const auto& p : data_paths) data.push_back(load_jsonl(p));
  ordered_json results = ordered_json::array();
  std::ostringstream csv;
  csv.precision(17);
  csv << "model,data,accuracy\n";
  for (const auto& mp : model_paths) {
    const Checkpoint ck = load(mp);
    const ModelConfig cfg = config_from_checkpoint(ck);
    const std::string id = model_id_of(ck, fs::path(mp).stem().string());
    for (std::size_t d = 0; d < data.size(); ++d) {
      const double acc = evaluate(ck, cfg, data[d], c.thread_count());
      const std::string dn = fs::path(data_paths[d]).filename().string();
      results.push_back({{"model", id}, {"data", dn}, {"accuracy", acc}});
      csv << id << ',' << dn << ',' << acc << '\n';
      std::cout << id << " on " << dn << ": " << acc << "\n";
    }
  }
  st.write("eval.json", to_text(results));
  st.write("eval.csv", csv.str());
  return 0;
}

ordered_json curve_json(const std::vector<CurvePoint>& c) {
  ordered_json a = ordered_json::array();
  for (const auto& p : c) a.push_back(p.valid ? ordered_json(p.value) : ordered_json(nullptr));
  return a;
}

// Spearman of a curve's valid points against their index.
double curve_trend(const std::vector<CurvePoint>& c) {
  std::vector<double> x, y;
  for (const auto& p : c) {
    if (!p.valid) continue;
    x.push_back(static_cast<double>(p.index));
    y.push_back(p.value);
  }
  return x.size() < 2 ? std::numeric_limits<double>::quiet_NaN() : spearman(x, y);
}

ordered_json nan_to_null(double v) { return std::isnan(v) ? ordered_json(nullptr) : ordered_json(v); }

struct Observation {
  std::vector<CurvePoint> adjacent, inter;
};

Observation observe_models(const Checkpoint& a, const Checkpoint* b, const std::vector<Sample>& data,
                           const SimilarityFlags& s, std::size_t threads) {
  const ModelConfig cfg = config_from_checkpoint(a);
  const auto texts = sample_texts(data);
  Observation o;
  const auto ra = extract(a, cfg, texts, {8, threads});
  o.adjacent = adjacent_layer_curve(ra);
  if (b) o.inter = inter_model_curve(ra, extract(*b, cfg, texts, {8, threads}), parse_metric(s.metric), s.sigma);
  return o;
}

void write_observation(const Stage& st, const Observation& o) {
  ordered_json j = {{"adjacent_cosine", curve_json(o.adjacent)},
                    {"adjacent_spearman", nan_to_null(curve_trend(o.adjacent))}};
  st.write("adjacent.csv", curve_csv(o.adjacent, "boundary"));
  if (!o.inter.empty()) {
    j["inter_model"] = curve_json(o.inter);
    j["inter_model_spearman"] = nan_to_null(curve_trend(o.inter));
    st.write("inter_model.csv", curve_csv(o.inter, "layer"));
  }
  st.write("observe.json", to_text(j));
}

int cmd_observe(const Common& c, const std::vector<std::string>& model_paths, const std::string& data_path,
                const SimilarityFlags& s) {
  s.validate();
  if (model_paths.empty() || model_paths.size() > 2) fail(ErrorKind::validation, "observe takes one or two --model");
  Stage st = c.stage("observe");
  st.settings = {{"metric", s.metric}, {"sigma", s.sigma}};
  for (const auto& p : model_paths) st.add_input(p);
  st.add_input(data_path);
  std::vector<std::string> files{"adjacent.csv", "observe.json"};
  if (model_paths.size() == 2) files.push_back("inter_model.csv");
  if (st.up_to_date(files)) return 0;

  const Checkpoint a = load(model_paths[0]);
  std::optional<Checkpoint> b;
  if (model_paths.size() == 2) b = load(model_paths[1]);
  const auto o = observe_models(a, b ? &*b : nullptr, load_jsonl(data_path), s, c.thread_count());
  write_observation(st, o);
  std::cout << "observe: adjacent trend " << curve_trend(o.adjacent);
  if (!o.inter.empty()) std::cout << ", inter-model trend " << curve_trend(o.inter);
  std::cout << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// run-all
// ---------------------------------------------------------------------------

int cmd_run_all(const Common& c, const GenFlags& g, const SimilarityFlags& s, const std::vector<std::string>& methods) {
  s.validate();
  const ModelConfig cfg = load_model_config(g.model_config);
  cfg.validate();
  std::vector<BenchMethod> parsed;
  for (const auto& m : methods) parsed.push_back(parse_bench_method(m));
  if (parsed.empty()) fail(ErrorKind::validation, "--methods is empty");

  Stage st = c.stage("run-all");
  st.settings = gen_settings(g, cfg);
  st.settings["similarity"] = similarity_settings(s);
  st.settings["methods"] = methods;
  std::vector<std::string> files{"base.st", "summary.json", "retention.csv", "adjacent.csv", "inter_model.csv",
                                 "observe.json"};
  if (st.up_to_date(files)) return 0;
  const std::size_t threads = c.thread_count();

  const auto tasks = gen_tasks(g.seed, {g.n_train, g.n_val, g.n_test});
  const Checkpoint base = random_checkpoint(cfg, g.seed, "base");
  st.write("base.st", serialize(base));
  write_tasks(st, tasks);

  BenchOptions o;
  o.include_base = s.include_base;
  o.metric = parse_metric(s.metric);
  o.sigma = s.sigma;
  o.m_per_layer = s.m_per_layer;
  o.layers = parse_layer_selection(s.layers);
  o.temperature = s.temperature;
  o.euclidean_flip = s.euclidean_flip;
  o.seed = g.seed;
  o.threads = threads;
  const auto source = synthetic_expert_source(tasks, g.strength, g.seed, expert_options(g, threads));

  std::vector<BenchReport> reports;
  ordered_json summary = ordered_json::array();
  for (auto m : parsed) {
    reports.push_back(run_sequential(tasks, source, base, m, o));
    const auto& r = reports.back();
    summary.push_back({{"method", r.method},
                       {"final_task1_accuracy", r.final_retention()},
                       {"final_mean_accuracy", r.final_mean()},
                       {"report", to_json(r)}});
    std::cout << r.method << ": task-1 " << r.final_retention() << ", mean " << r.final_mean() << "\n";
  }
  st.write("summary.json", to_text(summary));
  st.write("retention.csv", retention_csv(reports));

  const Checkpoint first = source(0, base);
  write_observation(st, observe_models(base, &first, tasks[0].test, s, threads));
  return 0;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::validation: return 2;
    case ErrorKind::numeric_domain: return 3;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Representation-aligned layer-wise model merging"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "Read flags from a TOML run config");
  app.require_subcommand(1);

  Common common;
  SimilarityFlags sim;
  GenFlags gen;

  auto* gen_cmd = app.add_subcommand("gen-experts", "Generate a base model, synthetic experts, and task datasets");
  add_common(gen_cmd, common);
  add_gen_flags(gen_cmd, gen);

  std::string model_path, data_path;
  std::size_t batch = 8;
  auto* ext_cmd = app.add_subcommand("extract", "Pool per-layer hidden states of a model over a dataset");
  add_common(ext_cmd, common);
  ext_cmd->add_option("--model", model_path, "Checkpoint (.st)")->required()->check(CLI::ExistingFile);
  ext_cmd->add_option("--data", data_path, "Dataset (.jsonl)")->required()->check(CLI::ExistingFile);
  ext_cmd->add_option("--batch", batch, "Samples forwarded per batch")->capture_default_str();

  std::string reps_path;
  auto* sel_cmd = app.add_subcommand("select-typical", "Pick typical samples by per-layer k-means");
  add_common(sel_cmd, common);
  sel_cmd->add_option("--reps", reps_path, "Representation file (reps.*.st)")->required()->check(CLI::ExistingFile);
  add_similarity_flags(sel_cmd, sim, true, false);

  std::vector<std::string> reps_paths;
  std::string typical_path;
  bool cka_uncentered = false;
  auto* sim_cmd = app.add_subcommand("similarity", "Per-layer similarity table between models");
  add_common(sim_cmd, common);
  sim_cmd->add_option("--reps", reps_paths, "Representation files, one per model")->required()->check(CLI::ExistingFile);
  sim_cmd->add_option("--typical", typical_path, "typical.json (default: every sample)")->check(CLI::ExistingFile);
  sim_cmd->add_flag("--cka-uncentered", cka_uncentered, "Skip column centering for CKA");
  add_similarity_flags(sim_cmd, sim, false, false);

  MergeFlags mf;
  auto* merge_cmd = app.add_subcommand("merge", "Merge checkpoints");
  add_common(merge_cmd, common);
  merge_cmd->add_option("--method", mf.method, "recall | uniform | task_vector | dare | loss_weighted")
      ->capture_default_str();
  merge_cmd->add_option("--model", mf.models, "Checkpoints to merge")->required()->check(CLI::ExistingFile);
  merge_cmd->add_option("--base", mf.base, "Base checkpoint")->check(CLI::ExistingFile);
  merge_cmd->add_option("--similarity", mf.similarity, "similarity.json (recall)")->check(CLI::ExistingFile);
  merge_cmd->add_option("--anchor", mf.anchor, "Anchor model_id (recall; default: last --model)");
  merge_cmd->add_option("--lambda", mf.lambdas, "Task-vector scale(s)");
  merge_cmd->add_option("--drop-rate", mf.drop_rate, "DARE drop probability")->capture_default_str();
  merge_cmd->add_option("--val", mf.validation, "Validation set (loss_weighted)")->check(CLI::ExistingFile);
  merge_cmd->add_option("--model-id", mf.model_id, "model_id of the output")->capture_default_str();
  merge_cmd->add_option("--seed", sim.seed, "DARE seed")->capture_default_str();
  add_similarity_flags(merge_cmd, sim, false, true);

  std::vector<std::string> eval_models, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "Exact-match accuracy of models on datasets");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--model", eval_models, "Checkpoints")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "Datasets (.jsonl)")->required()->check(CLI::ExistingFile);

  std::vector<std::string> obs_models;
  auto* obs_cmd = app.add_subcommand("observe", "Adjacent-layer and inter-model similarity curves");
  add_common(obs_cmd, common);
  obs_cmd->add_option("--model", obs_models, "One or two checkpoints")->required()->check(CLI::ExistingFile);
  obs_cmd->add_option("--data", data_path, "Dataset (.jsonl)")->required()->check(CLI::ExistingFile);
  add_similarity_flags(obs_cmd, sim, false, false);

  std::vector<std::string> methods{"recall", "overwrite", "uniform"};
  auto* run_cmd = app.add_subcommand("run-all", "Generate data and run the sequential merging bench end to end");
  add_common(run_cmd, common);
  add_gen_flags(run_cmd, gen);
  add_similarity_flags(run_cmd, sim, false, true);
  run_cmd->add_option("--m", sim.m_per_layer, "Typical samples per layer")->capture_default_str();
  run_cmd->add_option("--layers", sim.layers, "all | last | <layer index>")->capture_default_str();
  run_cmd->add_option("--methods", methods, "recall overwrite uniform task_vector dare loss_weighted")
      ->delimiter(',')
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_experts(common, gen);
    if (*ext_cmd) return cmd_extract(common, model_path, data_path, batch);
    if (*sel_cmd) return cmd_select_typical(common, reps_path, sim);
    if (*sim_cmd) return cmd_similarity(common, reps_paths, typical_path, sim, cka_uncentered);
    if (*merge_cmd) return cmd_merge(common, mf, sim);
    if (*eval_cmd) return cmd_eval(common, eval_models, eval_data);
    if (*obs_cmd) return cmd_observe(common, obs_models, data_path, sim);
    if (*run_cmd) return cmd_run_all(common, gen, sim, methods);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
