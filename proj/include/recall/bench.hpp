#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/checkpoint.hpp"
#include "recall/dataset.hpp"
#include "recall/eval.hpp"
#include "recall/merge.hpp"
#include "recall/model.hpp"
#include "recall/representation.hpp"
#include "recall/rng.hpp"
#include "recall/similarity.hpp"
#include "recall/typical.hpp"

namespace recall {

// ---------------------------------------------------------------------------
// Synthetic tasks. Every task is "<name>: <payload>" -> one byte, where the
// answer is a function of the payload's last byte and the payload alphabets
// of different tasks are disjoint.
// ---------------------------------------------------------------------------

struct TaskDataset {
  std::string name;
  std::vector<Sample> train, val, test;
};

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names{"shift", "parity", "lower"};
  return names;
}

inline std::string task_prefix(const std::string& task) { return task + ": "; }

// Reference answer for an instruction under the named task's rule.
inline std::string task_answer(const std::string& task, const std::string& instruction) {
  const std::string prefix = task_prefix(task);
  if (instruction.size() <= prefix.size() || instruction.compare(0, prefix.size(), prefix) != 0) {
    fail(ErrorKind::input, "instruction does not belong to task '" + task + "'");
  }
  const char last = instruction.back();
  if (task == "shift") return std::string(1, last == 'z' ? 'a' : static_cast<char>(last + 1));
  if (task == "parity") return ((last - '0') % 2 == 0) ? "e" : "o";
  if (task == "lower") return std::string(1, static_cast<char>(last - 'A' + 'a'));
  fail(ErrorKind::input, "unknown task '" + task + "'");
}

// Task owning an instruction, identified by prefix alone.
inline std::string classify_task(const std::string& instruction) {
  for (const auto& t : task_names())
    if (instruction.rfind(task_prefix(t), 0) == 0) return t;
  return {};
}

inline std::string task_alphabet(const std::string& task) {
  if (task == "shift") return "abcdefghijklmnopqrstuvwxyz";
  if (task == "parity") return "0123456789";
  if (task == "lower") return "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
  fail(ErrorKind::input, "unknown task '" + task + "'");
}

struct TaskSizes {
  std::size_t train = 512, val = 64, test = 128;
};

inline std::vector<Sample> gen_split(const std::string& task, const std::string& split, std::size_t n,
                                     std::uint64_t seed) {
  Rng rng(seed, task + "/" + split);
  const std::string alpha = task_alphabet(task);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 3 + rng.below(6);
    std::string payload;
    for (std::size_t j = 0; j < len; ++j) payload.push_back(alpha[rng.below(alpha.size())]);
    std::string instr = task_prefix(task) + payload;
    std::string ans = task_answer(task, instr);
    out.push_back({std::move(instr), std::move(ans)});
  }
  return out;
}

inline std::vector<TaskDataset> gen_tasks(std::uint64_t seed, const TaskSizes& sizes = {}) {
  std::vector<TaskDataset> tasks;
  for (const auto& name : task_names()) {
    tasks.push_back({name, gen_split(name, "train", sizes.train, seed), gen_split(name, "val", sizes.val, seed),
                     gen_split(name, "test", sizes.test, seed)});
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Synthetic experts
// ---------------------------------------------------------------------------

struct ExpertOptions {
  std::size_t rank = 2;
  double noise_norm = 0.5;      // Frobenius norm of group 0's perturbation at strength 1
  double depth_growth = 1.0;    // group g gets noise_norm * (1 + depth_growth * g)
  double skill_gain = 2.0;      // read-out strength written into lm_head
  std::size_t threads = 1;
};

namespace detail {

// Mean final-normed hidden state at the prompt's last position, per key byte,
// centered over the task's keys and unit-normalized.
inline std::map<unsigned char, std::vector<double>> key_directions(const Checkpoint& ckpt, const ModelConfig& cfg,
                                                                   const std::vector<Sample>& samples,
                                                                   std::size_t threads) {
  std::vector<std::vector<double>> h(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto fw = forward(ckpt, cfg, encode_prompt(samples[i].instruction, cfg));
    const Tensor last({1, cfg.embed_dim}, std::vector<float>(fw.hidden.back().row(fw.hidden.back().rows() - 1).begin(),
                                                             fw.hidden.back().row(fw.hidden.back().rows() - 1).end()));
    const Tensor normed = rms_norm(last, ckpt.at("final_norm"), static_cast<float>(cfg.norm_eps));
    h[i].assign(normed.data().begin(), normed.data().end());
  });
  std::map<unsigned char, std::vector<double>> sum;
  std::map<unsigned char, std::size_t> count;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto key = static_cast<unsigned char>(samples[i].instruction.back());
    auto& s = sum[key];
    s.resize(cfg.embed_dim, 0.0);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) s[j] += h[i][j];
    ++count[key];
  }
  std::vector<double> center(cfg.embed_dim, 0.0);
  for (auto& [k, s] : sum) {
    for (auto& v : s) v /= static_cast<double>(count[k]);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) center[j] += s[j] / static_cast<double>(sum.size());
  }
  for (auto& [k, s] : sum) {
    double nrm = 0.0;
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      s[j] -= center[j];
      nrm += s[j] * s[j];
    }
    nrm = std::sqrt(nrm);
    if (nrm > 0.0)
      for (auto& v : s) v /= nrm;
  }
  return sum;
}

inline double frobenius(const std::vector<float>& a) {
  double s = 0.0;
  for (float v : a) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace detail

// Writes a read-out into lm_head so the last prompt byte of every `samples`
// instruction maps to the first byte of its output: column y gains
// gain * sum of the unit key directions that map to y.
inline void add_task_readout(Checkpoint& ckpt, const ModelConfig& cfg, const std::vector<Sample>& samples, double gain,
                             std::size_t threads = 1) {
  const auto dirs = detail::key_directions(ckpt, cfg, samples, threads);
  std::map<unsigned char, unsigned char> target;
  for (const auto& s : samples) target[static_cast<unsigned char>(s.instruction.back())] = static_cast<unsigned char>(s.output[0]);
  Tensor& head = ckpt.at("lm_head");
  for (const auto& [key, d] : dirs) {
    const std::size_t y = target.at(key);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) head.at(j, y) += static_cast<float>(gain * d[j]);
  }
}

// base + strength * (depth-growing rank-r noise per group + task read-out in
// lm_head). strength == 0 returns the base tensors unchanged.
inline Checkpoint gen_synthetic_expert(const Checkpoint& base, const TaskDataset& task, double strength,
                                       std::uint64_t seed, const ExpertOptions& opts = {}) {
  if (!(strength >= 0.0)) fail(ErrorKind::input, "expert strength must be >= 0");
  const ModelConfig cfg = config_from_checkpoint(base);
  Checkpoint expert = base;
  expert.metadata["model_id"] = "expert." + task.name;
  if (strength == 0.0) return expert;

  const auto index = build_layer_index(base, cfg);
  const std::size_t groups = index.group_count();

  // Raw low-rank noise per 2-D tensor, then rescale each group to its target norm.
  std::vector<std::map<std::string, std::vector<float>>> noise(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    double sq = 0.0;
    for (const auto& name : index.group(g)) {
      const Tensor& t = base.at(name);
      if (t.rank() != 2) continue;
      Rng rng(seed, task.name + "/" + name);
      const std::size_t r = t.dim(0), c = t.dim(1);
      std::vector<float> d(t.size(), 0.0f);
      for (std::size_t k = 0; k < opts.rank; ++k) {
        std::vector<double> u(r), v(c);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += static_cast<float>(u[i] * v[j]);
      }
      for (float x : d) sq += static_cast<double>(x) * x;
      noise[g][name] = std::move(d);
    }
    const double target = strength * opts.noise_norm * (1.0 + opts.depth_growth * static_cast<double>(g));
    const double scale = sq > 0.0 ? target / std::sqrt(sq) : 0.0;
    for (auto& [name, d] : noise[g]) {
      Tensor& t = expert.at(name);
      for (std::size_t i = 0; i < d.size(); ++i) t[i] += static_cast<float>(scale * d[i]);
    }
  }

  add_task_readout(expert, cfg, task.train, strength * opts.skill_gain, opts.threads);
  return expert;
}

// Frobenius norm of (expert - base) per layer group.
inline std::vector<double> group_delta_norms(const Checkpoint& base, const Checkpoint& expert) {
  const ModelConfig cfg = config_from_checkpoint(base);
  const auto index = build_layer_index(base, cfg);
  std::vector<double> out(index.group_count(), 0.0);
  for (std::size_t g = 0; g < index.group_count(); ++g) {
    double s = 0.0;
    for (const auto& name : index.group(g)) {
      const Tensor& a = base.at(name);
      const Tensor& b = expert.at(name);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(b[i]) - a[i];
        s += d * d;
      }
    }
    out[g] = std::sqrt(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequential scenario
// ---------------------------------------------------------------------------

enum class BenchMethod { recall, uniform, overwrite, task_vector, dare, loss_weighted };

inline const char* to_string(BenchMethod m) {
  switch (m) {
    case BenchMethod::recall: return "recall";
    case BenchMethod::uniform: return "uniform";
    case BenchMethod::overwrite: return "overwrite";
    case BenchMethod::task_vector: return "task_vector";
    case BenchMethod::dare: return "dare";
    case BenchMethod::loss_weighted: return "loss_weighted";
  }
  return "?";
}

inline BenchMethod parse_bench_method(const std::string& s) {
  for (BenchMethod m : {BenchMethod::recall, BenchMethod::uniform, BenchMethod::overwrite, BenchMethod::task_vector,
                        BenchMethod::dare, BenchMethod::loss_weighted})
    if (s == to_string(m)) return m;
  fail(ErrorKind::validation, "unknown bench method '" + s + "'");
}

struct BenchOptions {
  bool include_base = false;
  Metric metric = Metric::rbf;
  double sigma = 1.0;
  std::size_t m_per_layer = 20;
  LayerSelection layers{};
  double temperature = 1.0;
  bool euclidean_flip = true;
  double task_vector_lambda = 1.0;
  double dare_drop_rate = 0.5;
  std::uint64_t seed = 0;
  std::size_t batch_hint = 8;
  std::size_t threads = 1;
};

struct BenchReport {
  std::string method;
  std::vector<std::string> tasks;
  // accuracy[step][task] for tasks 0..step
  std::vector<std::vector<double>> accuracy;
  std::vector<double> retention;       // accuracy on task 0 after each step
  std::vector<double> mean_seen;       // mean accuracy over tasks 0..step
  std::vector<MergePlan> plans;        // one per merging step

  double final_retention() const { return retention.back(); }
  double final_mean() const { return mean_seen.back(); }
};

inline nlohmann::ordered_json to_json(const BenchReport& r) {
  nlohmann::ordered_json plans = nlohmann::ordered_json::array();
  for (const auto& p : r.plans) plans.push_back(to_json(p));
  return {{"method", r.method},       {"tasks", r.tasks},         {"accuracy", r.accuracy},
          {"retention", r.retention}, {"mean_seen", r.mean_seen}, {"plans", plans}};
}

inline std::string retention_csv(const std::vector<BenchReport>& reports) {
  std::ostringstream os;
  os.precision(17);
  os << "method,step,task,accuracy\n";
  for (const auto& r : reports)
    for (std::size_t s = 0; s < r.accuracy.size(); ++s)
      for (std::size_t t = 0; t < r.accuracy[s].size(); ++t) os << r.method << ',' << s << ',' << r.tasks[t] << ',' << r.accuracy[s][t] << '\n';
  return os.str();
}

// RECALL merge of `models` with `anchor` as the newly fine-tuned model whose
// dataset drives typical-sample selection.
inline MergePlan recall_plan_for(const std::vector<const Checkpoint*>& models, std::size_t anchor,
                                 const std::vector<Sample>& anchor_data, std::optional<std::size_t> base_index,
                                 const BenchOptions& o) {
  const ModelConfig cfg = config_from_checkpoint(*models[anchor]);
  const auto texts = sample_texts(anchor_data);
  const ExtractOptions eo{o.batch_hint, o.threads};
  const auto anchor_reps = extract(*models[anchor], cfg, texts, eo);
  const std::size_t m = std::min(o.m_per_layer, anchor_data.size());
  const auto typical = select_typical(anchor_reps, m, o.layers, o.seed, o.threads);

  std::vector<std::string> typical_texts;
  for (auto id : typical.sample_ids) typical_texts.push_back(texts[id]);
  std::vector<RepresentationSet> reps;
  for (std::size_t q = 0; q < models.size(); ++q) {
    auto r = extract(*models[q], cfg, typical_texts, eo, typical.sample_ids);
    r.model_id = std::to_string(q) + ":" + r.model_id;
    reps.push_back(std::move(r));
  }
  const auto table = build_table(reps, typical.sample_ids, o.metric, o.sigma, {true, o.threads});
  RecallOptions ro;
  ro.include_base = true;  // the participant list was already filtered
  ro.base_index = base_index;
  ro.temperature = o.temperature;
  ro.euclidean_flip = o.euclidean_flip;
  return recall_weights(table, anchor, ro);
}

// Supplies the freshly fine-tuned model for a step, given the model it starts
// from (the accumulated model; the base at step 0).
using ExpertSource = std::function<Checkpoint(std::size_t step, const Checkpoint& start)>;

// Sequential fine-tuning with synthetic experts: each step perturbs the model
// it starts from toward the step's task.
inline ExpertSource synthetic_expert_source(const std::vector<TaskDataset>& tasks, double strength, std::uint64_t seed,
                                            const ExpertOptions& opts = {}) {
  return [&tasks, strength, seed, opts](std::size_t step, const Checkpoint& start) {
    return gen_synthetic_expert(start, tasks.at(step), strength, splitmix64(seed * 0x100 + step), opts);
  };
}

// Experts produced independently from the base (e.g. trained elsewhere).
inline ExpertSource fixed_expert_source(const std::vector<Checkpoint>& experts) {
  return [&experts](std::size_t step, const Checkpoint&) { return experts.at(step); };
}

// Runs tasks in order. Step 0 takes expert 0 as the accumulated model; each
// later step obtains expert_t from the accumulated model, merges
// {base?, accumulated, expert_t} with expert_t as anchor, and evaluates every
// task seen so far on its test split.
inline BenchReport run_sequential(const std::vector<TaskDataset>& tasks, const ExpertSource& source,
                                  const Checkpoint& base, BenchMethod method, const BenchOptions& o = {}) {
  if (tasks.empty()) fail(ErrorKind::input, "sequential run needs at least one task");
  const ModelConfig cfg = config_from_checkpoint(base);
  BenchReport rep;
  rep.method = to_string(method);
  for (const auto& t : tasks) rep.tasks.push_back(t.name);

  Checkpoint acc = source(0, base);
  for (std::size_t step = 0; step < tasks.size(); ++step) {
    if (step > 0) {
      const Checkpoint fresh = source(step, acc);
      std::vector<const Checkpoint*> members;
      std::optional<std::size_t> base_index;
      if (o.include_base) {
        base_index = members.size();
        members.push_back(&base);
      }
      members.push_back(&acc);
      members.push_back(&fresh);
      const std::size_t anchor = members.size() - 1;
      Checkpoint next;
      switch (method) {
        case BenchMethod::overwrite:
          next = fresh;
          break;
        case BenchMethod::uniform:
          next = uniform_merge(members, o.threads);
          break;
        case BenchMethod::recall: {
          auto plan = recall_plan_for(members, anchor, tasks[step].train, base_index, o);
          plan.include_base = o.include_base;
          next = merge(members, plan, o.threads);
          rep.plans.push_back(std::move(plan));
          break;
        }
        case BenchMethod::task_vector:
          next = task_vector_merge(base, {&acc, &fresh}, {o.task_vector_lambda, o.task_vector_lambda}, o.threads);
          break;
        case BenchMethod::dare: {
          const auto a = dare_sparsify(base, acc, o.dare_drop_rate, o.seed * 1000 + 2 * step, o.threads);
          const auto b = dare_sparsify(base, fresh, o.dare_drop_rate, o.seed * 1000 + 2 * step + 1, o.threads);
          next = task_vector_merge(base, {&a, &b}, {o.task_vector_lambda, o.task_vector_lambda}, o.threads);
          break;
        }
        case BenchMethod::loss_weighted: {
          std::vector<Sample> val;
          for (std::size_t t = 0; t <= step; ++t) val.insert(val.end(), tasks[t].val.begin(), tasks[t].val.end());
          auto plan = loss_weighted_plan(members, cfg, val, o.threads);
          next = merge(members, plan, o.threads);
          rep.plans.push_back(std::move(plan));
          break;
        }
      }
      next.metadata["model_id"] = "acc." + std::to_string(step);
      acc = std::move(next);
    }
    std::vector<double> row;
    for (std::size_t t = 0; t <= step; ++t) row.push_back(evaluate(acc, cfg, tasks[t].test, o.threads));
    rep.retention.push_back(row[0]);
    rep.mean_seen.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size()));
    rep.accuracy.push_back(std::move(row));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Observation curves
// ---------------------------------------------------------------------------

struct CurvePoint {
  std::size_t index;
  double value;
  bool valid;
};

// Mean cosine between pooled representations of adjacent layers, per layer
// boundary (i, i+1). A boundary where any row has zero norm is reported as
// NaN with valid = false.
inline std::vector<CurvePoint> adjacent_layer_curve(const RepresentationSet& reps) {
  std::vector<CurvePoint> out;
  for (std::size_t l = 0; l + 1 < reps.num_layers(); ++l) {
    try {
      out.push_back({l, cosine_similarity(reps.layers[l], reps.layers[l + 1]), true});
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric_domain) throw;
      out.push_back({l, std::numeric_limits<double>::quiet_NaN(), false});
    }
  }
  return out;
}

// Per-layer similarity between two models over all of their shared samples.
inline std::vector<CurvePoint> inter_model_curve(const RepresentationSet& a, const RepresentationSet& b, Metric metric,
                                                 double sigma) {
  if (a.num_layers() != b.num_layers()) fail(ErrorKind::alignment, "models differ in layer count");
  std::vector<CurvePoint> out;
  for (std::size_t l = 0; l < a.num_layers(); ++l) {
    const Tensor x = a.gather(l, a.sample_ids), y = b.gather(l, a.sample_ids);
    double v = 0.0;
    bool ok = true;
    try {
      switch (metric) {
        case Metric::rbf: v = rbf_similarity(x, y, sigma); break;
        case Metric::cosine: v = cosine_similarity(x, y); break;
        case Metric::cka: v = cka_similarity(x, y); break;
        case Metric::mmd: v = mmd_similarity(x, y, sigma); break;
        case Metric::euclidean: v = euclidean_similarity({x, y})[1]; break;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric_domain) throw;
      v = std::numeric_limits<double>::quiet_NaN();
      ok = false;
    }
    out.push_back({l, v, ok});
  }
  return out;
}

inline std::string curve_csv(const std::vector<CurvePoint>& c, const std::string& index_name) {
  std::ostringstream os;
  os.precision(17);
  os << index_name << ",value,valid\n";
  for (const auto& p : c) os << p.index << ',' << (p.valid ? p.value : std::numeric_limits<double>::quiet_NaN()) << ',' << (p.valid ? 1 : 0) << '\n';
  return os.str();
}

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

// Spearman rank correlation (Pearson on average ranks). NaN if either side is
// constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) fail(ErrorKind::input, "spearman needs two equal-length series of >= 2 points");
  const auto rx = detail::average_ranks(x), ry = detail::average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

inline ModelConfig bench_model_config() {
  ModelConfig c;
  c.embed_dim = 64;
  c.num_layers = 4;
  c.num_heads = 4;
  c.mlp_hidden = 128;
  c.max_seq_len = 64;
  return c;
}

}  // namespace recall
