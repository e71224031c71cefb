#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/checkpoint.hpp"
#include "recall/dataset.hpp"
#include "recall/eval.hpp"
#include "recall/model.hpp"
#include "recall/parallel.hpp"
#include "recall/rng.hpp"
#include "recall/similarity.hpp"

namespace recall {

enum class MergeMethod { recall, uniform, task_vector, dare, loss_weighted };

inline const char* to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::recall: return "recall";
    case MergeMethod::uniform: return "uniform";
    case MergeMethod::task_vector: return "task_vector";
    case MergeMethod::dare: return "dare";
    case MergeMethod::loss_weighted: return "loss_weighted";
  }
  return "?";
}

inline MergeMethod parse_merge_method(const std::string& s) {
  for (MergeMethod m : {MergeMethod::recall, MergeMethod::uniform, MergeMethod::task_vector, MergeMethod::dare,
                        MergeMethod::loss_weighted})
    if (s == to_string(m)) return m;
  fail(ErrorKind::validation, "unknown merge method '" + s + "'");
}

// Per-group weight vectors over the participating models, plus the knobs that
// produced them. Group g covers hidden-state tap g.
struct MergePlan {
  MergeMethod method = MergeMethod::recall;
  bool include_base = true;
  std::vector<std::string> participants;
  std::vector<std::vector<double>> group_weights;  // [group][participant]
  std::optional<std::size_t> anchor;                // index into participants
  std::string metric;
  double sigma = 1.0;
  double temperature = 1.0;
  bool euclidean_flip = true;
  double dare_drop_rate = 0.0;
  std::vector<double> lambdas;
  std::uint64_t seed = 0;

  std::size_t group_count() const noexcept { return group_weights.size(); }

  void check_normalized(double tol = 1e-6) const {
    for (std::size_t g = 0; g < group_weights.size(); ++g) {
      double s = 0.0;
      for (double w : group_weights[g]) s += w;
      if (std::abs(s - 1.0) > tol) {
        fail(ErrorKind::numeric_domain, "group " + std::to_string(g) + " weights sum to " + std::to_string(s));
      }
    }
  }
};

inline nlohmann::ordered_json to_json(const MergePlan& p) {
  nlohmann::ordered_json j = {{"method", to_string(p.method)},
                              {"include_base", p.include_base},
                              {"participants", p.participants},
                              {"group_weights", p.group_weights}};
  if (p.anchor) j["anchor"] = *p.anchor;
  if (!p.metric.empty()) {
    j["metric"] = p.metric;
    j["sigma"] = p.sigma;
    j["temperature"] = p.temperature;
    j["euclidean_flip"] = p.euclidean_flip;
  }
  if (p.method == MergeMethod::dare) j["dare_drop_rate"] = p.dare_drop_rate;
  if (!p.lambdas.empty()) j["lambdas"] = p.lambdas;
  j["seed"] = p.seed;
  return j;
}

inline MergePlan plan_from_json(const nlohmann::json& j) {
  MergePlan p;
  try {
    p.method = parse_merge_method(j.at("method").get<std::string>());
    p.include_base = j.value("include_base", true);
    p.participants = j.at("participants").get<std::vector<std::string>>();
    p.group_weights = j.at("group_weights").get<std::vector<std::vector<double>>>();
    if (j.contains("anchor")) p.anchor = j["anchor"].get<std::size_t>();
    p.metric = j.value("metric", std::string{});
    p.sigma = j.value("sigma", 1.0);
    p.temperature = j.value("temperature", 1.0);
    p.euclidean_flip = j.value("euclidean_flip", true);
    p.dare_drop_rate = j.value("dare_drop_rate", 0.0);
    p.lambdas = j.value("lambdas", std::vector<double>{});
    p.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("merge plan JSON: ") + e.what());
  }
  return p;
}

inline std::string plan_hash(const MergePlan& p) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(p).dump())));
  return buf;
}

// Turns a similarity value into a "larger means closer" merging signal.
// Divergences (MMD) are negated; the normalized Euclidean distance is
// flipped to 1 - d unless `euclidean_flip` is off.
inline double merging_signal(Metric m, double value, bool euclidean_flip) {
  switch (m) {
    case Metric::mmd: return -value;
    case Metric::euclidean: return euclidean_flip ? 1.0 - value : value;
    default: return value;
  }
}

struct RecallOptions {
  bool include_base = true;
  std::optional<std::size_t> base_index;  // table index of the base model
  double temperature = 1.0;
  bool euclidean_flip = true;
};

// w_g = softmax_q(S_g(anchor, q) / T) over the participating models.
inline MergePlan recall_weights(const SimilarityTable& table, std::size_t anchor, const RecallOptions& opts = {}) {
  table.check_complete();
  const std::size_t n = table.num_models();
  if (anchor >= n) fail(ErrorKind::completeness, "anchor model " + std::to_string(anchor) + " is not in the table");
  if (!(opts.temperature > 0.0)) fail(ErrorKind::validation, "temperature must be > 0");
  if (opts.base_index && *opts.base_index >= n) fail(ErrorKind::completeness, "base model is not in the table");
  if (!opts.include_base && opts.base_index && *opts.base_index == anchor) {
    fail(ErrorKind::validation, "cannot exclude the base model when it is also the anchor");
  }

  std::vector<std::size_t> members;
  for (std::size_t q = 0; q < n; ++q) {
    if (!opts.include_base && opts.base_index && q == *opts.base_index) continue;
    members.push_back(q);
  }

  MergePlan plan;
  plan.method = MergeMethod::recall;
  plan.include_base = opts.include_base;
  plan.metric = to_string(table.metric);
  plan.sigma = table.sigma;
  plan.temperature = opts.temperature;
  plan.euclidean_flip = opts.euclidean_flip;
  for (std::size_t i = 0; i < members.size(); ++i) {
    plan.participants.push_back(table.model_ids[members[i]]);
    if (members[i] == anchor) plan.anchor = i;
  }
  for (std::size_t l = 0; l < table.num_layers; ++l) {
    std::vector<double> s;
    s.reserve(members.size());
    for (std::size_t q : members) {
      s.push_back(merging_signal(table.metric, table.at(l, anchor, q), opts.euclidean_flip) / opts.temperature);
    }
    plan.group_weights.push_back(softmax(s));
  }
  return plan;
}

namespace detail {

inline void check_compatible(const std::vector<const Checkpoint*>& ckpts) {
  if (ckpts.empty()) fail(ErrorKind::compatibility, "no checkpoints to merge");
  const Checkpoint& ref = *ckpts[0];
  for (std::size_t q = 1; q < ckpts.size(); ++q) {
    const Checkpoint& c = *ckpts[q];
    if (c.size() != ref.size()) {
      fail(ErrorKind::compatibility, "checkpoint " + std::to_string(q) + " has " + std::to_string(c.size()) +
                                         " tensors, checkpoint 0 has " + std::to_string(ref.size()));
    }
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const auto& a = ref.entries()[i];
      const auto& b = c.entries()[i];
      if (a.name != b.name) {
        fail(ErrorKind::compatibility, "tensor " + std::to_string(i) + " is '" + b.name + "' in checkpoint " +
                                           std::to_string(q) + " but '" + a.name + "' in checkpoint 0");
      }
      if (a.tensor.shape() != b.tensor.shape()) {
        fail(ErrorKind::compatibility, "tensor '" + a.name + "' has shape " + shape_string(b.tensor.shape()) +
                                           " in checkpoint " + std::to_string(q) + " vs " +
                                           shape_string(a.tensor.shape()));
      }
    }
  }
}

inline std::vector<const Checkpoint*> pointers(const std::vector<Checkpoint>& v) {
  std::vector<const Checkpoint*> out;
  for (const auto& c : v) out.push_back(&c);
  return out;
}

inline Checkpoint output_shell(const Checkpoint& ref, const std::string& model_id) {
  Checkpoint out;
  out.metadata = ref.metadata;
  out.metadata["model_id"] = model_id;
  return out;
}

}  // namespace detail

// Every tensor in group g becomes sum_q w_g[q] * theta_q, accumulated per
// element in double over q in participant order and rounded once.
inline Checkpoint merge(const std::vector<const Checkpoint*>& ckpts, const MergePlan& plan, std::size_t threads = 1,
                        const std::string& model_id = "merged") {
  detail::check_compatible(ckpts);
  if (plan.group_count() == 0) fail(ErrorKind::completeness, "merge plan has no groups");
  const auto index = build_layer_index(*ckpts[0], plan.group_count() - 1);
  for (std::size_t g = 0; g < plan.group_count(); ++g) {
    if (plan.group_weights[g].size() != ckpts.size()) {
      fail(ErrorKind::compatibility, "plan group " + std::to_string(g) + " has " +
                                         std::to_string(plan.group_weights[g].size()) + " weights for " +
                                         std::to_string(ckpts.size()) + " checkpoints");
    }
  }

  const auto& ref = ckpts[0]->entries();
  std::vector<Tensor> merged(ref.size());
  parallel_for(ref.size(), threads, [&](std::size_t i) {
    const auto& w = plan.group_weights[index.group_of(ref[i].name)];
    Tensor out(ref[i].tensor.shape());
    for (std::size_t e = 0; e < out.size(); ++e) {
      double acc = 0.0;
      for (std::size_t q = 0; q < ckpts.size(); ++q) acc += w[q] * static_cast<double>(ckpts[q]->entries()[i].tensor[e]);
      out[e] = static_cast<float>(acc);
    }
    merged[i] = std::move(out);
  });

  Checkpoint out = detail::output_shell(*ckpts[0], model_id);
  for (std::size_t i = 0; i < ref.size(); ++i) out.add(ref[i].name, std::move(merged[i]));
  out.metadata["merge_method"] = to_string(plan.method);
  out.metadata["plan_hash"] = plan_hash(plan);
  return out;
}

inline Checkpoint merge(const std::vector<Checkpoint>& ckpts, const MergePlan& plan, std::size_t threads = 1,
                        const std::string& model_id = "merged") {
  return merge(detail::pointers(ckpts), plan, threads, model_id);
}

inline MergePlan uniform_plan(const std::vector<const Checkpoint*>& ckpts, std::size_t groups) {
  MergePlan plan;
  plan.method = MergeMethod::uniform;
  for (const auto* c : ckpts) {
    auto it = c->metadata.find("model_id");
    plan.participants.push_back(it == c->metadata.end() ? "" : it->second);
  }
  plan.group_weights.assign(groups, std::vector<double>(ckpts.size(), 1.0 / static_cast<double>(ckpts.size())));
  return plan;
}

inline Checkpoint uniform_merge(const std::vector<const Checkpoint*>& ckpts, std::size_t threads = 1) {
  if (ckpts.empty()) fail(ErrorKind::compatibility, "no checkpoints to merge");
  const auto cfg = config_from_checkpoint(*ckpts[0]);
  return merge(ckpts, uniform_plan(ckpts, cfg.num_taps()), threads);
}

inline Checkpoint uniform_merge(const std::vector<Checkpoint>& ckpts, std::size_t threads = 1) {
  return uniform_merge(detail::pointers(ckpts), threads);
}

// theta = base + sum_q lambda_q (theta_q - base).
inline Checkpoint task_vector_merge(const Checkpoint& base, const std::vector<const Checkpoint*>& experts,
                                    const std::vector<double>& lambdas, std::size_t threads = 1) {
  if (experts.size() != lambdas.size()) {
    fail(ErrorKind::validation, std::to_string(experts.size()) + " experts but " + std::to_string(lambdas.size()) + " lambdas");
  }
  std::vector<const Checkpoint*> all{&base};
  all.insert(all.end(), experts.begin(), experts.end());
  detail::check_compatible(all);

  const auto& ref = base.entries();
  std::vector<Tensor> merged(ref.size());
  parallel_for(ref.size(), threads, [&](std::size_t i) {
    Tensor out(ref[i].tensor.shape());
    for (std::size_t e = 0; e < out.size(); ++e) {
      const double b = ref[i].tensor[e];
      double delta = 0.0;
      for (std::size_t q = 0; q < experts.size(); ++q) {
        delta += lambdas[q] * (static_cast<double>(experts[q]->entries()[i].tensor[e]) - b);
      }
      out[e] = static_cast<float>(b + delta);
    }
    merged[i] = std::move(out);
  });
  Checkpoint out = detail::output_shell(base, "task_vector");
  for (std::size_t i = 0; i < ref.size(); ++i) out.add(ref[i].name, std::move(merged[i]));
  out.metadata["merge_method"] = "task_vector";
  return out;
}

// Drop-and-rescale of (expert - base): each delta element is zeroed with
// probability p and survivors are scaled by 1/(1-p). The keep/drop draw for an
// element depends only on (seed, tensor name, element index).
inline Checkpoint dare_sparsify(const Checkpoint& base, const Checkpoint& expert, double drop_rate, std::uint64_t seed,
                                std::size_t threads = 1) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
    fail(ErrorKind::input, "DARE drop rate must be in [0, 1), got " + std::to_string(drop_rate));
  }
  detail::check_compatible({&base, &expert});
  const double scale = 1.0 / (1.0 - drop_rate);
  const auto& ref = base.entries();
  std::vector<Tensor> out_t(ref.size());
  parallel_for(ref.size(), threads, [&](std::size_t i) {
    const std::uint64_t key = make_key(seed, ref[i].name);
    const Tensor& b = ref[i].tensor;
    const Tensor& x = expert.entries()[i].tensor;
    Tensor out(b.shape());
    for (std::size_t e = 0; e < out.size(); ++e) {
      const bool keep = to_unit(keyed_bits(key, e)) >= drop_rate;
      const double delta = keep ? (static_cast<double>(x[e]) - b[e]) * scale : 0.0;
      out[e] = static_cast<float>(static_cast<double>(b[e]) + delta);
    }
    out_t[i] = std::move(out);
  });
  Checkpoint out = detail::output_shell(expert, expert.metadata.count("model_id") ? expert.metadata.at("model_id") + ".dare" : "dare");
  for (std::size_t i = 0; i < ref.size(); ++i) out.add(ref[i].name, std::move(out_t[i]));
  return out;
}

// Global weights softmax(-loss_q) from each model's mean token loss on the
// validation split, applied to every group.
inline MergePlan loss_weighted_plan(const std::vector<const Checkpoint*>& ckpts, const ModelConfig& cfg,
                                    const std::vector<Sample>& validation, std::size_t threads = 1,
                                    std::vector<double>* losses_out = nullptr) {
  if (validation.empty()) fail(ErrorKind::input, "loss-weighted merge needs a non-empty validation set");
  std::vector<double> neg;
  std::vector<double> losses;
  for (const auto* c : ckpts) {
    losses.push_back(mean_token_loss(*c, cfg, validation, threads));
    neg.push_back(-losses.back());
  }
  MergePlan plan = uniform_plan(ckpts, cfg.num_taps());
  plan.method = MergeMethod::loss_weighted;
  const auto w = softmax(neg);
  for (auto& g : plan.group_weights) g = w;
  if (losses_out) *losses_out = losses;
  return plan;
}

inline Checkpoint loss_weighted_merge(const std::vector<const Checkpoint*>& ckpts, const ModelConfig& cfg,
                                      const std::vector<Sample>& validation, std::size_t threads = 1) {
  return merge(ckpts, loss_weighted_plan(ckpts, cfg, validation, threads), threads);
}

}  // namespace recall
