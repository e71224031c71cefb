// Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
// budget. Exit status is non-zero if any criterion fails.

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "recall/recall.hpp"

using namespace recall;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

ModelConfig small_config(std::size_t layers = 2) {
  ModelConfig c;
  c.embed_dim = 8;
  c.num_layers = layers;
  c.num_heads = 2;
  c.mlp_hidden = 8;
  c.max_seq_len = 32;
  return c;
}

Tensor random_rows(std::size_t n, std::size_t e, Rng& rng, double scale = 1.0) {
  Tensor t({n, e});
  for (auto& v : t.data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

std::vector<double> random_simplex(std::size_t k, Rng& rng) {
  std::vector<double> w(k);
  double s = 0.0;
  for (auto& x : w) s += (x = rng.uniform() + 1e-3);
  for (auto& x : w) x /= s;
  return w;
}

// ---------------------------------------------------------------------------

Outcome weight_normalization() {
  Outcome out;
  Rng rng(11);
  std::size_t tables = 0;
  double worst_sum = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Metric metric = std::array{Metric::rbf, Metric::cosine, Metric::cka}[i % 3];
    SimilarityTable t;
    t.metric = metric;
    const std::size_t n = 2 + rng.below(6);
    t.num_layers = 1 + rng.below(6);
    for (std::size_t p = 0; p < n; ++p) t.model_ids.push_back("m" + std::to_string(p));
    t.values.assign(t.num_layers * n * n, self_value(metric));
    for (std::size_t l = 0; l < t.num_layers; ++l)
      for (std::size_t p = 0; p < n; ++p)
        for (std::size_t q = p + 1; q < n; ++q) {
          // Off-diagonal values stay strictly below the self value, as the
          // metrics guarantee for distinct representations.
          const double v = metric == Metric::cosine ? 2.0 * rng.uniform() - 1.0 : rng.uniform();
          t.at(l, p, q) = t.at(l, q, p) = std::min(v, 1.0 - 1e-9);
        }
    const std::size_t anchor = rng.below(n);
    const auto plan = recall_weights(t, anchor);
    for (const auto& w : plan.group_weights) {
      double s = 0.0;
      for (double x : w) s += x;
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      const auto arg = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
      out.check(arg == *plan.anchor, "table " + std::to_string(i) + ": max weight not at anchor");
    }
    ++tables;
  }
  out.check(worst_sum <= 1e-6, "sum error " + fmt(worst_sum));
  if (out.pass) out.detail = std::to_string(tables) + " tables, max |sum-1| = " + fmt(worst_sum, 3);
  return out;
}

Outcome merge_fixed_point() {
  Outcome out;
  const auto cfg = small_config();
  const auto c = random_checkpoint(cfg, 3);
  Rng rng(5);
  double worst = 0.0;
  for (std::size_t k : {2u, 3u, 5u}) {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<const Checkpoint*> copies(k, &c);
      MergePlan plan = uniform_plan(copies, cfg.num_taps());
      for (auto& w : plan.group_weights) w = random_simplex(k, rng);
      const auto m = merge(copies, plan);
      for (std::size_t i = 0; i < c.size(); ++i)
        for (std::size_t e = 0; e < c.entries()[i].tensor.size(); ++e)
          worst = std::max(worst, std::abs(static_cast<double>(m.entries()[i].tensor[e]) - c.entries()[i].tensor[e]));
    }
  }
  out.check(worst <= 1e-7, "max deviation " + fmt(worst));
  if (out.pass) out.detail = "K in {2,3,5}, max deviation " + fmt(worst, 3);
  return out;
}

// Group of a parameter by name, written out independently of the library's
// layer index: embeddings -> 0, block i -> i + 1, final norm / head -> last.
std::size_t oracle_group(const std::string& name, std::size_t num_layers) {
  if (name == "embed.tok") return 0;
  if (name == "final_norm" || name == "lm_head") return num_layers;
  const auto dot = name.find('.', 7);
  return std::stoul(name.substr(7, dot - 7)) + 1;
}

Outcome oracle_equivalence() {
  Outcome out;
  const auto cfg = small_config(2);  // 3 groups
  const std::vector<Checkpoint> models{random_checkpoint(cfg, 1, "a"), random_checkpoint(cfg, 2, "b"),
                                       random_checkpoint(cfg, 3, "c")};
  Rng rng(9);
  MergePlan plan = uniform_plan(detail::pointers(models), cfg.num_taps());
  for (auto& w : plan.group_weights) w = random_simplex(3, rng);
  const auto merged = merge(models, plan, 3);
  std::size_t mismatches = 0, total = 0;
  for (const auto& e : models[0].entries()) {
    const auto& w = plan.group_weights[oracle_group(e.name, cfg.num_layers)];
    const Tensor& got = merged.at(e.name);
    for (std::size_t i = 0; i < e.tensor.size(); ++i) {
      double acc = 0.0;
      for (std::size_t q = 0; q < 3; ++q) acc += w[q] * static_cast<double>(models[q].at(e.name)[i]);
      const float expect = static_cast<float>(acc);
      mismatches += std::bit_cast<std::uint32_t>(expect) != std::bit_cast<std::uint32_t>(got[i]);
      ++total;
    }
  }
  out.check(mismatches == 0, std::to_string(mismatches) + " of " + std::to_string(total) + " elements differ");
  if (out.pass) out.detail = std::to_string(total) + " elements bit-equal";
  return out;
}

Outcome sigma_limit() {
  Outcome out;
  const auto cfg = small_config(3);
  const auto base = random_checkpoint(cfg, 4);
  const auto tasks = gen_tasks(4, {32, 8, 8});
  std::vector<Checkpoint> experts;
  for (std::size_t t = 0; t < tasks.size(); ++t) experts.push_back(gen_synthetic_expert(base, tasks[t], 1.0, 40 + t));
  const auto ptrs = detail::pointers(experts);
  BenchOptions o;
  o.sigma = 1e6;
  o.m_per_layer = 5;
  const auto plan = recall_plan_for(ptrs, 2, tasks[2].train, std::nullopt, o);
  const auto rec = merge(ptrs, plan);
  const auto uni = uniform_merge(ptrs);
  double worst = 0.0;
  for (const auto& e : rec.entries()) {
    const Tensor& u = uni.at(e.name);
    for (std::size_t i = 0; i < u.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(e.tensor[i]) - u[i]));
  }
  out.check(worst <= 1e-5, "max deviation " + fmt(worst));
  if (out.pass) out.detail = "max deviation from uniform " + fmt(worst, 3);
  return out;
}

Outcome rbf_scalars() {
  Outcome out;
  const double v = rbf_similarity(Tensor({1, 1}, {0}), Tensor({1, 1}, {1}), 1.0);
  out.check(std::abs(v - 0.606531) <= 1e-6, "exp(-0.5) case gave " + fmt(v, 10));
  Rng rng(1);
  const auto x = random_rows(6, 5, rng);
  const double self = rbf_similarity(x, x, 1.0);
  out.check(std::abs(self - 1.0) <= 1e-6, "identical rows gave " + fmt(self, 10));
  if (out.pass) out.detail = "S(0,1)=" + fmt(v, 7) + ", S(X,X)=" + fmt(self, 7);
  return out;
}

Tensor times(const Tensor& x, const std::vector<double>& q, std::size_t e) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < e; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < e; ++k) s += static_cast<double>(x.at(r, k)) * q[k * e + j];
      out.at(r, j) = static_cast<float>(s);
    }
  return out;
}

// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
std::vector<double> random_orthogonal(std::size_t e, Rng& rng) {
  std::vector<double> q(e * e);
  for (auto& v : q) v = rng.normal();
  for (std::size_t j = 0; j < e; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < e; ++i) d += q[i * e + j] * q[i * e + k];
      for (std::size_t i = 0; i < e; ++i) q[i * e + j] -= d * q[i * e + k];
    }
    double n = 0.0;
    for (std::size_t i = 0; i < e; ++i) n += q[i * e + j] * q[i * e + j];
    for (std::size_t i = 0; i < e; ++i) q[i * e + j] /= std::sqrt(n);
  }
  return q;
}

Outcome metric_suite() {
  Outcome out;
  Rng rng(21);
  const std::size_t m = 20, e = 6;
  double worst_cka = 0.0, worst_mmd_self = 0.0, worst_mmd_sym = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_rows(m, e, rng), y = random_rows(m, e, rng);
    worst_cka = std::max(worst_cka, std::abs(cka_similarity(x, x) - 1.0));
    const double base = cka_similarity(x, y);
    const auto q1 = random_orthogonal(e, rng), q2 = random_orthogonal(e, rng);
    worst_cka = std::max(worst_cka, std::abs(cka_similarity(times(x, q1, e), times(y, q2, e)) - base));
    Tensor scaled = x;
    for (auto& v : scaled.data()) v *= 3.7f;
    worst_cka = std::max(worst_cka, std::abs(cka_similarity(scaled, y) - base));
    worst_mmd_self = std::max(worst_mmd_self, std::abs(mmd_similarity(x, x, 1.0)));
    worst_mmd_sym = std::max(worst_mmd_sym, std::abs(mmd_similarity(x, y, 1.3) - mmd_similarity(y, x, 1.3)));
  }
  out.check(worst_cka <= 1e-6, "CKA deviation " + fmt(worst_cka));
  out.check(worst_mmd_self <= 1e-9, "MMD(X,X) = " + fmt(worst_mmd_self));
  out.check(worst_mmd_sym <= 1e-12, "MMD asymmetry " + fmt(worst_mmd_sym));

  // The normalizer is the largest distance over all pairs and samples, so
  // with one sample per model the maximal pair is pinned to exactly 1.
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> points;
    for (int p = 0; p < 4; ++p) points.push_back(random_rows(1, e, rng, 1.0 + p));
    const auto d = euclidean_similarity(points);
    const double hi = *std::max_element(d.begin(), d.end());
    out.check(hi == 1.0, "Euclidean maximal pair = " + fmt(hi, 17));
  }
  // With several samples every entry is the mean of per-sample normalized
  // distances; compare against a direct evaluation.
  std::vector<Tensor> models;
  for (int p = 0; p < 4; ++p) models.push_back(random_rows(m, e, rng, 1.0 + p));
  const auto d = euclidean_similarity(models);
  double norm = 0.0;
  std::vector<double> dist(4 * 4 * m, 0.0);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t k = 0; k < m; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < e; ++j) s += std::pow(static_cast<double>(models[p].at(k, j)) - models[q].at(k, j), 2);
        dist[(p * 4 + q) * m + k] = std::sqrt(s);
        norm = std::max(norm, std::sqrt(s));
      }
  double worst_euc = 0.0;
  for (std::size_t pq = 0; pq < 16; ++pq) {
    double mean = 0.0;
    for (std::size_t k = 0; k < m; ++k) mean += dist[pq * m + k] / norm;
    worst_euc = std::max(worst_euc, std::abs(mean / static_cast<double>(m) - d[pq]));
  }
  out.check(worst_euc <= 1e-12, "Euclidean table deviates by " + fmt(worst_euc));
  if (out.pass) {
    out.detail = "CKA dev " + fmt(worst_cka, 2) + ", MMD self " + fmt(worst_mmd_self, 2) + ", Euclidean maximal pair 1";
  }
  return out;
}

Outcome kmeans_typical() {
  Outcome out;
  // Exhaustive-partition oracle on the 4-point fixture.
  const Tensor pts({4, 2}, {0, 0, 0, 1, 10, 0, 10, 1});
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::array<double, 2>> centers;
  for (unsigned mask = 1; mask < 15; ++mask) {
    std::array<double, 2> c[2] = {{0, 0}, {0, 0}};
    double cnt[2] = {0, 0};
    for (std::size_t i = 0; i < 4; ++i) {
      const unsigned g = (mask >> i) & 1u;
      cnt[g] += 1;
      c[g][0] += pts.at(i, 0);
      c[g][1] += pts.at(i, 1);
    }
    for (int g = 0; g < 2; ++g) c[g] = {c[g][0] / cnt[g], c[g][1] / cnt[g]};
    double cost = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& cc = c[(mask >> i) & 1u];
      cost += std::pow(pts.at(i, 0) - cc[0], 2) + std::pow(pts.at(i, 1) - cc[1], 2);
    }
    if (cost < best) {
      best = cost;
      centers = {c[0], c[1]};
    }
  }
  std::set<std::size_t> expected;
  for (const auto& c : centers) {
    std::size_t arg = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < 4; ++i) {
      const double dd = std::pow(pts.at(i, 0) - c[0], 2) + std::pow(pts.at(i, 1) - c[1], 2);
      if (dd < bd) {
        bd = dd;
        arg = i;
      }
    }
    expected.insert(arg);
  }
  RepresentationSet reps;
  reps.sample_ids = {0, 1, 2, 3};
  reps.layers = {pts};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto typ = select_typical(reps, 2, {LayerPolicy::all, 0}, seed);
    out.check(std::set<std::size_t>(typ.sample_ids.begin(), typ.sample_ids.end()) == expected,
              "fixture seed " + std::to_string(seed) + " disagrees with oracle");
  }

  // Random fixtures: ids are real samples; same seed, same answer.
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    RepresentationSet r;
    const std::size_t n = 10 + rng.below(30);
    for (std::size_t i = 0; i < n; ++i) r.sample_ids.push_back(1000 + 3 * i);
    for (int l = 0; l < 3; ++l) r.layers.push_back(random_rows(n, 4, rng));
    const std::size_t mm = 1 + rng.below(6);
    const auto a = select_typical(r, mm, {LayerPolicy::all, 0}, static_cast<std::uint64_t>(trial));
    const auto b = select_typical(r, mm, {LayerPolicy::all, 0}, static_cast<std::uint64_t>(trial), 3);
    out.check(a == b, "trial " + std::to_string(trial) + " not reproducible");
    for (auto id : a.sample_ids) {
      out.check(std::find(r.sample_ids.begin(), r.sample_ids.end(), id) != r.sample_ids.end(),
                "id " + std::to_string(id) + " is not a sample");
    }
  }
  if (out.pass) out.detail = "fixture picks {0,2} as the oracle does; ids real and reproducible";
  return out;
}

std::string raw_file(const std::string& header, std::size_t payload_bytes) {
  std::string out;
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((header.size() >> (8 * i)) & 0xff));
  out += header;
  out.append(payload_bytes, '\0');
  return out;
}

Outcome checkpoint_round_trip() {
  Outcome out;
  Rng rng(41);
  const auto dir = std::filesystem::temp_directory_path();
  for (int trial = 0; trial < 100; ++trial) {
    Checkpoint c;
    const std::size_t n = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
      Shape s;
      for (std::size_t r = 0, rank = 1 + rng.below(3); r < rank; ++r) s.push_back(1 + rng.below(7));
      Tensor t(s);
      for (auto& v : t.data()) {
        // Any finite bit pattern, including subnormals and -0.
        std::uint32_t bits;
        do bits = static_cast<std::uint32_t>(rng.next_u64());
        while (((bits >> 23) & 0xffu) == 0xffu);
        v = std::bit_cast<float>(bits);
      }
      c.add("t." + std::to_string(trial) + "." + std::to_string(i), std::move(t));
    }
    c.metadata["model_id"] = "rt" + std::to_string(trial);
    const auto path = dir / ("recall_accept_" + std::to_string(trial) + ".st");
    save(c, path);
    const auto back = load(path);
    std::filesystem::remove(path);
    out.check(bit_equal(back, c) && back.metadata == c.metadata, "trial " + std::to_string(trial) + " differs");
  }

  const std::string ok = R"("a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]})";
  std::string nan_payload = raw_file("{" + ok + "}", 0);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  nan_payload.append(reinterpret_cast<const char*>(&nan), 4);
  nan_payload.append(4, '\0');
  const std::vector<std::string> corpus{
      "",
      "abc",
      raw_file("{}", 0).substr(0, 8) + "{",
      raw_file("{\"a\":", 0),
      raw_file("[]", 0),
      raw_file("not json", 0),
      raw_file("{" + ok + "," + ok + "}", 8),
      raw_file(R"({"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}})", 4),
      raw_file(R"({"a":{"dtype":"Q9","shape":[2],"data_offsets":[0,8]}})", 8),
      raw_file("{" + ok + "}", 4),
      raw_file(R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", 8),
      raw_file("{" + ok + "}", 12),
      raw_file(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[8,0]}})", 8),
      raw_file(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})", 8),
      raw_file(R"({"a":{"dtype":"F32","shape":[0],"data_offsets":[0,0]}})", 0),
      raw_file(R"({"a":{"dtype":"F32","shape":[2]}})", 8),
      raw_file(R"({"__metadata__":{"k":1}})", 0),
      nan_payload,
  };
  std::size_t rejected = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    try {
      deserialize(corpus[i]);
      out.check(false, "malformed file " + std::to_string(i) + " accepted");
    } catch (const ParseError&) {
      ++rejected;
    } catch (const std::exception& e) {
      out.check(false, "malformed file " + std::to_string(i) + " raised a non-parse error: " + e.what());
    }
  }
  if (out.pass) out.detail = "100 round trips bit-exact; " + std::to_string(rejected) + " malformed files rejected";
  return out;
}

Outcome observation() {
  Outcome out;
  const auto cfg = bench_model_config();
  const auto base = random_checkpoint(cfg, 1);
  const auto tasks = gen_tasks(1, {128, 8, 64});
  const auto expert = gen_synthetic_expert(base, tasks[0], 1.0, 7);
  const auto texts = sample_texts(tasks[0].test);
  const auto rb = extract(base, cfg, texts), re = extract(expert, cfg, texts);

  const auto inter = inter_model_curve(rb, re, Metric::rbf, 1.0);
  std::vector<double> idx, val;
  for (const auto& p : inter) {
    idx.push_back(static_cast<double>(p.index));
    val.push_back(p.value);
  }
  const double rho = spearman(idx, val);
  out.check(rho < 0.0, "inter-model Spearman " + fmt(rho));

  const auto adj = adjacent_layer_curve(rb);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& p : adj) {
    out.check(p.valid, "adjacent boundary " + std::to_string(p.index) + " undefined");
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
  }
  out.check(hi - lo > 1e-6, "adjacent-layer curve is constant");

  std::ostringstream d;
  d << "inter-model RBF by layer:";
  for (double v : val) d << ' ' << fmt(v, 3);
  d << " (Spearman " << fmt(rho, 3) << "); adjacent cosine range [" << fmt(lo, 3) << ", " << fmt(hi, 3) << "]";
  if (out.pass) out.detail = d.str();
  return out;
}

Outcome forgetting_bench() {
  Outcome out;
  const auto cfg = bench_model_config();
  std::size_t wins = 0;
  std::ostringstream d;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto base = random_checkpoint(cfg, seed);
    const auto tasks = gen_tasks(seed);
    const auto source = synthetic_expert_source(tasks, 1.0, seed);
    BenchOptions o;
    o.seed = seed;
    const auto rec = run_sequential(tasks, source, base, BenchMethod::recall, o);
    const auto ovw = run_sequential(tasks, source, base, BenchMethod::overwrite, o);
    const auto uni = run_sequential(tasks, source, base, BenchMethod::uniform, o);
    const bool ok = rec.final_retention() >= ovw.final_retention() && rec.final_mean() >= uni.final_mean();
    wins += ok;
    d << " seed " << seed << ": task1 " << fmt(rec.final_retention(), 3) << " vs overwrite "
      << fmt(ovw.final_retention(), 3) << ", mean " << fmt(rec.final_mean(), 3) << " vs uniform "
      << fmt(uni.final_mean(), 3) << (ok ? " ok;" : " miss;");
  }
  out.check(wins >= 3, std::to_string(wins) + "/4 seeds;" + d.str());
  if (out.pass) out.detail = std::to_string(wins) + "/4 seeds;" + d.str();
  return out;
}

Outcome dare_unbiased() {
  Outcome out;
  const auto cfg = small_config(1);
  const auto base = random_checkpoint(cfg, 1, "base");
  const auto expert = random_checkpoint(cfg, 2, "expert");

  const auto same = dare_sparsify(base, expert, 0.0, 5);
  for (const auto& e : expert.entries()) {
    const Tensor& b = base.at(e.name);
    const Tensor& got = same.at(e.name);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const float want = static_cast<float>(static_cast<double>(b[i]) + (static_cast<double>(e.tensor[i]) - b[i]));
      out.check(std::bit_cast<std::uint32_t>(want) == std::bit_cast<std::uint32_t>(got[i]), "p=0 changed " + e.name);
    }
  }

  const std::size_t trials = 10000;
  const std::vector<std::pair<std::string, std::size_t>> probes{{"lm_head", 3}, {"layers.0.attn.wq", 10}, {"embed.tok", 100}};
  double worst_z = 0.0;
  for (double p : {0.5, 0.9}) {
    std::vector<double> sum(probes.size(), 0.0);
    for (std::size_t s = 0; s < trials; ++s) {
      const auto d = dare_sparsify(base, expert, p, s);
      for (std::size_t k = 0; k < probes.size(); ++k) {
        sum[k] += static_cast<double>(d.at(probes[k].first)[probes[k].second]) - base.at(probes[k].first)[probes[k].second];
      }
    }
    for (std::size_t k = 0; k < probes.size(); ++k) {
      const double delta = static_cast<double>(expert.at(probes[k].first)[probes[k].second]) -
                           base.at(probes[k].first)[probes[k].second];
      const double se = std::abs(delta) * std::sqrt(p / (1.0 - p) / static_cast<double>(trials));
      const double z = std::abs(sum[k] / static_cast<double>(trials) - delta) / se;
      worst_z = std::max(worst_z, z);
      out.check(z <= 3.0, probes[k].first + " at p=" + fmt(p) + " is " + fmt(z, 3) + " SE off");
    }
  }
  if (out.pass) out.detail = "p=0 exact; worst Monte-Carlo deviation " + fmt(worst_z, 3) + " SE";
  return out;
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"weight normalization", 5, weight_normalization},
      {"merge fixed point", 5, merge_fixed_point},
      {"oracle equivalence", 5, oracle_equivalence},
      {"sigma limit equals uniform", 10, sigma_limit},
      {"RBF scalar checks", 1, rbf_scalars},
      {"metric suite", 10, metric_suite},
      {"k-means / typical samples", 5, kmeans_typical},
      {"checkpoint round-trip", 10, checkpoint_round_trip},
      {"layer-divergence observation", 60, observation},
      {"forgetting bench", 600, forgetting_bench},
      {"DARE unbiasedness", 10, dare_unbiased},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.budget_seconds) {
      o.pass = false;
      o.detail += (o.detail.empty() ? "" : "; ") + std::string("over budget");
    }
    std::printf("%s  %-30s %7.2fs / %4.0fs  %s\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), secs, c.budget_seconds,
                o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
