#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/parallel.hpp"
#include "recall/representation.hpp"
#include "recall/rng.hpp"
#include "recall/tensor.hpp"

namespace recall {

struct KMeansResult {
  Tensor centers;                      // [k x E]
  std::vector<std::size_t> assignment; // point -> cluster
  double inertia = 0.0;
  std::vector<double> inertia_history; // after each Lloyd iteration
  std::size_t iterations = 0;
};

namespace detail {

inline double sq_dist(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = static_cast<double>(a[j]) - b[j];
    s += d * d;
  }
  return s;
}

// Nearest row of `centers` to p; ties go to the lowest index.
inline std::pair<std::size_t, double> nearest(const Tensor& centers, std::span<const float> p) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centers.rows(); ++c) {
    const double d = sq_dist(centers.row(c), p);
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  return {best, bd};
}

// k-means++ seeding.
inline Tensor kmeans_pp_init(const Tensor& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows(), e = points.cols();
  Tensor centers({k, e});
  auto copy_row = [&](std::size_t dst, std::size_t src) {
    auto r = points.row(src);
    std::copy(r.begin(), r.end(), centers.row(dst).begin());
  };
  copy_row(0, rng.below(n));
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points.row(i), centers.row(c - 1)));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double run = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (run > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);  // every point already coincides with a center
    }
    copy_row(c, pick);
  }
  return centers;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. Stops after max_iter iterations
// or once assignments no longer change. Empty clusters keep their center.
inline KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iter = 100) {
  if (points.rank() != 2) fail(ErrorKind::dimension, "kmeans expects [n x E], got " + shape_string(points.shape()));
  const std::size_t n = points.rows(), e = points.cols();
  if (k == 0 || k > n) {
    fail(ErrorKind::input, "kmeans needs 1 <= k <= n, got k=" + std::to_string(k) + " n=" + std::to_string(n));
  }
  Rng rng(seed, "kmeans");
  KMeansResult res;
  res.centers = detail::kmeans_pp_init(points, k, rng);
  res.assignment.assign(n, std::numeric_limits<std::size_t>::max());

  for (std::size_t it = 0; it < std::max<std::size_t>(max_iter, 1); ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = detail::nearest(res.centers, points.row(i)).first;
      if (c != res.assignment[i]) {
        res.assignment[i] = c;
        changed = true;
      }
    }
    res.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<double> sums(k * e, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignment[i];
      ++counts[c];
      auto r = points.row(i);
      for (std::size_t j = 0; j < e; ++j) sums[c * e + j] += r[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < e; ++j) {
        res.centers.at(c, j) = static_cast<float>(sums[c * e + j] / static_cast<double>(counts[c]));
      }
    }
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += detail::sq_dist(points.row(i), res.centers.row(res.assignment[i]));
    res.inertia_history.push_back(inertia);
  }
  // Final inertia against the final centers under the final assignment.
  res.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) res.inertia += detail::sq_dist(points.row(i), res.centers.row(res.assignment[i]));
  return res;
}

struct TypicalDataset {
  std::vector<std::size_t> sample_ids;
  // sample id -> layers whose clustering picked it
  std::map<std::size_t, std::vector<std::size_t>> provenance;
  std::uint64_t seed = 0;

  friend bool operator==(const TypicalDataset&, const TypicalDataset&) = default;
};

enum class LayerPolicy { all, last, single };

struct LayerSelection {
  LayerPolicy policy = LayerPolicy::all;
  std::size_t layer = 0;  // used by LayerPolicy::single

  std::vector<std::size_t> resolve(std::size_t num_layers) const {
    switch (policy) {
      case LayerPolicy::all: {
        std::vector<std::size_t> v(num_layers);
        for (std::size_t i = 0; i < num_layers; ++i) v[i] = i;
        return v;
      }
      case LayerPolicy::last:
        return num_layers ? std::vector<std::size_t>{num_layers - 1} : std::vector<std::size_t>{};
      case LayerPolicy::single:
        if (layer >= num_layers) fail(ErrorKind::input, "layer " + std::to_string(layer) + " out of range");
        return {layer};
    }
    return {};
  }
};

inline LayerSelection parse_layer_selection(const std::string& s) {
  if (s == "all") return {LayerPolicy::all, 0};
  if (s == "last") return {LayerPolicy::last, 0};
  try {
    std::size_t pos = 0;
    const auto v = std::stoul(s, &pos);
    if (pos == s.size()) return {LayerPolicy::single, v};
  } catch (...) {
  }
  fail(ErrorKind::validation, "layer policy must be 'all', 'last', or a layer index, got '" + s + "'");
}

// Row index nearest to `center`; ties go to the lowest sample id.
inline std::size_t nearest_sample(const Tensor& rows, const std::vector<std::size_t>& ids, std::span<const float> center) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    const double d = detail::sq_dist(rows.row(r), center);
    if (d < bd || (d == bd && ids[r] < ids[best])) {
      bd = d;
      best = r;
    }
  }
  return best;
}

// Clusters each selected layer with k = m_per_layer, takes the real sample
// closest to each center, then unions across layers keeping first-seen order.
inline TypicalDataset select_typical(const RepresentationSet& reps, std::size_t m_per_layer, const LayerSelection& layers,
                                     std::uint64_t seed, std::size_t threads = 1) {
  const auto chosen_layers = layers.resolve(reps.num_layers());
  if (chosen_layers.empty()) fail(ErrorKind::input, "no layers selected for typical-sample clustering");
  if (m_per_layer == 0 || m_per_layer > reps.num_samples()) {
    fail(ErrorKind::input, "m_per_layer=" + std::to_string(m_per_layer) + " must be in [1, " +
                               std::to_string(reps.num_samples()) + "]");
  }

  std::vector<std::vector<std::size_t>> picks(chosen_layers.size());
  parallel_for(chosen_layers.size(), threads, [&](std::size_t i) {
    const std::size_t layer = chosen_layers[i];
    const Tensor& rows = reps.layers.at(layer);
    const auto km = kmeans(rows, m_per_layer, splitmix64(seed + layer));
    for (std::size_t c = 0; c < km.centers.rows(); ++c) {
      picks[i].push_back(reps.sample_ids[nearest_sample(rows, reps.sample_ids, km.centers.row(c))]);
    }
  });

  TypicalDataset out;
  out.seed = seed;
  for (std::size_t i = 0; i < chosen_layers.size(); ++i) {
    for (std::size_t id : picks[i]) {
      auto& prov = out.provenance[id];
      if (prov.empty()) out.sample_ids.push_back(id);
      if (std::find(prov.begin(), prov.end(), chosen_layers[i]) == prov.end()) prov.push_back(chosen_layers[i]);
    }
  }
  return out;
}

inline nlohmann::ordered_json to_json(const TypicalDataset& t) {
  nlohmann::ordered_json prov = nlohmann::ordered_json::object();
  for (const auto& [id, layers] : t.provenance) prov[std::to_string(id)] = layers;
  return {{"sample_ids", t.sample_ids}, {"provenance", prov}, {"seed", t.seed}};
}

inline TypicalDataset typical_from_json(const nlohmann::json& j) {
  TypicalDataset t;
  try {
    t.sample_ids = j.at("sample_ids").get<std::vector<std::size_t>>();
    t.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("provenance")) {
      for (auto it = j["provenance"].begin(); it != j["provenance"].end(); ++it) {
        t.provenance[std::stoul(it.key())] = it.value().get<std::vector<std::size_t>>();
      }
    }
  } catch (const std::exception& e) {
    fail(ErrorKind::validation, std::string("typical dataset JSON: ") + e.what());
  }
  return t;
}

}  // namespace recall
