#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/checkpoint.hpp"
#include "recall/model.hpp"
#include "recall/parallel.hpp"
#include "recall/tensor.hpp"

namespace recall {

// Pooled representations of one model: layer i -> [samples x E], rows aligned
// with sample_ids for every layer.
struct RepresentationSet {
  std::string model_id;
  std::vector<std::size_t> sample_ids;
  std::vector<Tensor> layers;

  std::size_t num_layers() const noexcept { return layers.size(); }
  std::size_t num_samples() const noexcept { return sample_ids.size(); }

  std::size_t row_of(std::size_t sample_id) const {
    for (std::size_t r = 0; r < sample_ids.size(); ++r)
      if (sample_ids[r] == sample_id) return r;
    fail(ErrorKind::alignment, "model '" + model_id + "' has no representation for sample " + std::to_string(sample_id));
  }

  // Rows for `ids`, in that order.
  Tensor gather(std::size_t layer, const std::vector<std::size_t>& ids) const {
    const Tensor& src = layers.at(layer);
    Tensor out({ids.size(), src.cols()});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto r = src.row(row_of(ids[i]));
      std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
  }

  RepresentationSet subset(const std::vector<std::size_t>& ids) const {
    RepresentationSet out{model_id, ids, {}};
    for (std::size_t l = 0; l < layers.size(); ++l) out.layers.push_back(gather(l, ids));
    return out;
  }

  friend bool operator==(const RepresentationSet&, const RepresentationSet&) = default;
};

// Token mean of one hidden-state matrix [tokens x E] -> [E].
inline Tensor pool(const Tensor& hs_layer) {
  if (hs_layer.rank() != 2) fail(ErrorKind::dimension, "pool expects [tokens x E], got " + shape_string(hs_layer.shape()));
  const std::size_t n = hs_layer.rows(), e = hs_layer.cols();
  std::vector<double> acc(e, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    auto r = hs_layer.row(t);
    for (std::size_t j = 0; j < e; ++j) acc[j] += r[j];
  }
  Tensor out({e});
  for (std::size_t j = 0; j < e; ++j) out[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  return out;
}

struct ExtractOptions {
  std::size_t batch_hint = 8;
  std::size_t threads = 1;
};

// One pooled vector per (layer, sample). Samples are forwarded batch_hint at a
// time and their hidden states are dropped right after pooling, so transient
// memory stays at O(batch_hint * tokens * E * layers) on top of the output.
inline RepresentationSet extract(const Checkpoint& ckpt, const ModelConfig& cfg, const std::vector<std::string>& texts,
                                 const ExtractOptions& opts = {}, std::vector<std::size_t> sample_ids = {}) {
  if (texts.empty()) fail(ErrorKind::input, "extract on an empty dataset");
  if (sample_ids.empty()) {
    sample_ids.resize(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) sample_ids[i] = i;
  }
  if (sample_ids.size() != texts.size()) fail(ErrorKind::alignment, "sample_ids and texts differ in length");
  check_checkpoint(ckpt, cfg);

  RepresentationSet reps;
  auto id = ckpt.metadata.find("model_id");
  reps.model_id = id == ckpt.metadata.end() ? "" : id->second;
  reps.sample_ids = std::move(sample_ids);
  for (std::size_t l = 0; l < cfg.num_taps(); ++l) reps.layers.emplace_back(Shape{texts.size(), cfg.embed_dim});

  const std::size_t batch = std::max<std::size_t>(1, opts.batch_hint);
  for (std::size_t start = 0; start < texts.size(); start += batch) {
    const std::size_t count = std::min(batch, texts.size() - start);
    parallel_for(count, opts.threads, [&](std::size_t j) {
      const std::size_t k = start + j;
      try {
        const auto fw = forward(ckpt, cfg, tokenize(texts[k], cfg));
        for (std::size_t l = 0; l < fw.hidden.size(); ++l) {
          const Tensor v = pool(fw.hidden[l]);
          std::copy(v.data().begin(), v.data().end(), reps.layers[l].row(k).begin());
        }
      } catch (const Error& e) {
        throw Error(e.kind(), "sample " + std::to_string(k) + ": " + e.what());
      }
    });
  }
  return reps;
}

inline std::string reps_filename(const std::string& model_id) { return "reps." + model_id + ".st"; }

inline Checkpoint to_container(const RepresentationSet& reps) {
  Checkpoint c;
  for (std::size_t l = 0; l < reps.layers.size(); ++l) c.add("layer." + std::to_string(l), reps.layers[l]);
  c.metadata["model_id"] = reps.model_id;
  c.metadata["sample_ids"] = nlohmann::json(reps.sample_ids).dump();
  return c;
}

inline RepresentationSet from_container(const Checkpoint& c) {
  RepresentationSet reps;
  auto id = c.metadata.find("model_id");
  auto ids = c.metadata.find("sample_ids");
  if (id == c.metadata.end() || ids == c.metadata.end()) {
    fail(ErrorKind::validation, "representation file lacks model_id or sample_ids metadata");
  }
  reps.model_id = id->second;
  try {
    reps.sample_ids = nlohmann::json::parse(ids->second).get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("bad sample_ids metadata: ") + e.what());
  }
  for (std::size_t l = 0; l < c.size(); ++l) {
    const auto& e = c.entries()[l];
    if (e.name != "layer." + std::to_string(l)) fail(ErrorKind::validation, "unexpected tensor '" + e.name + "' in representation file");
    if (e.tensor.rank() != 2 || e.tensor.rows() != reps.sample_ids.size()) {
      fail(ErrorKind::alignment, e.name + " has shape " + shape_string(e.tensor.shape()) + " for " +
                                     std::to_string(reps.sample_ids.size()) + " samples");
    }
    reps.layers.push_back(e.tensor);
  }
  if (reps.layers.empty()) fail(ErrorKind::validation, "representation file has no layers");
  return reps;
}

inline void save_representations(const RepresentationSet& reps, const std::filesystem::path& path) {
  save(to_container(reps), path);
}

inline RepresentationSet load_representations(const std::filesystem::path& path) {
  return from_container(load(path));
}

}  // namespace recall
