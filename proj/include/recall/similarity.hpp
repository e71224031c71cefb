#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/parallel.hpp"
#include "recall/representation.hpp"
#include "recall/tensor.hpp"

namespace recall {

enum class Metric { rbf, cosine, euclidean, cka, mmd };

inline const char* to_string(Metric m) {
  switch (m) {
    case Metric::rbf: return "rbf";
    case Metric::cosine: return "cosine";
    case Metric::euclidean: return "euclidean";
    case Metric::cka: return "cka";
    case Metric::mmd: return "mmd";
  }
  return "?";
}

inline Metric parse_metric(const std::string& s) {
  for (Metric m : {Metric::rbf, Metric::cosine, Metric::euclidean, Metric::cka, Metric::mmd})
    if (s == to_string(m)) return m;
  fail(ErrorKind::validation, "unknown metric '" + s + "' (expected rbf, cosine, euclidean, cka or mmd)");
}

// Value of S(p, p).
inline double self_value(Metric m) {
  return (m == Metric::euclidean || m == Metric::mmd) ? 0.0 : 1.0;
}

namespace detail {

inline void check_paired(const Tensor& x, const Tensor& y, const char* what) {
  if (x.rank() != 2 || x.shape() != y.shape()) {
    fail(ErrorKind::alignment, std::string(what) + ": row sets " + shape_string(x.shape()) + " and " +
                                   shape_string(y.shape()) + " are not aligned");
  }
}

inline double dist2(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = static_cast<double>(a[j]) - b[j];
    s += d * d;
  }
  return s;
}

inline double rbf_kernel(std::span<const float> a, std::span<const float> b, double sigma) {
  return std::exp(-dist2(a, b) / (2.0 * sigma * sigma));
}

inline void check_sigma(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) fail(ErrorKind::validation, "sigma must be a finite value > 0");
}

}  // namespace detail

// Mean over paired rows of exp(-|x - y|^2 / (2 sigma^2)).
inline double rbf_similarity(const Tensor& x, const Tensor& y, double sigma) {
  detail::check_paired(x, y, "rbf");
  detail::check_sigma(sigma);
  double s = 0.0;
  for (std::size_t k = 0; k < x.rows(); ++k) s += detail::rbf_kernel(x.row(k), y.row(k), sigma);
  return s / static_cast<double>(x.rows());
}

// Mean over paired rows of x.y / (|x| |y|).
inline double cosine_similarity(const Tensor& x, const Tensor& y) {
  detail::check_paired(x, y, "cosine");
  double s = 0.0;
  for (std::size_t k = 0; k < x.rows(); ++k) {
    auto a = x.row(k);
    auto b = y.row(k);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      dot += static_cast<double>(a[j]) * b[j];
      na += static_cast<double>(a[j]) * a[j];
      nb += static_cast<double>(b[j]) * b[j];
    }
    if (na == 0.0 || nb == 0.0) fail(ErrorKind::numeric_domain, "cosine of a zero-norm row (row " + std::to_string(k) + ")");
    s += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return s / static_cast<double>(x.rows());
}

// Normalized distance for every model pair at one layer: mean over samples of
// |x_p - x_q| divided by the largest distance over all pairs and samples.
// Returns a row-major [models x models] matrix; all zeros when every
// representation coincides.
inline std::vector<double> euclidean_similarity(const std::vector<Tensor>& per_model) {
  const std::size_t n = per_model.size();
  if (n < 2) fail(ErrorKind::input, "euclidean similarity needs at least 2 models");
  for (std::size_t p = 1; p < n; ++p) detail::check_paired(per_model[0], per_model[p], "euclidean");
  const std::size_t m = per_model[0].rows();
  std::vector<double> mean(n * n, 0.0);
  double hi = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double d = std::sqrt(detail::dist2(per_model[p].row(k), per_model[q].row(k)));
        hi = std::max(hi, d);
        s += d;
      }
      mean[p * n + q] = mean[q * n + p] = s / static_cast<double>(m);
    }
  }
  if (hi == 0.0) return std::vector<double>(n * n, 0.0);
  for (auto& v : mean) v /= hi;
  return mean;
}

// Linear CKA: |X'Y|_F^2 / (|X'X|_F |Y'Y|_F), columns mean-centered first
// unless `centered` is false.
inline double cka_similarity(const Tensor& x, const Tensor& y, bool centered = true) {
  if (x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows()) {
    fail(ErrorKind::alignment, "cka: " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  }
  const std::size_t m = x.rows();
  if (m < 2) fail(ErrorKind::input, "cka needs at least 2 samples");

  auto prep = [&](const Tensor& t) {
    const std::size_t e = t.cols();
    std::vector<double> out(m * e);
    for (std::size_t j = 0; j < e; ++j) {
      double mu = 0.0;
      if (centered) {
        for (std::size_t k = 0; k < m; ++k) mu += t.at(k, j);
        mu /= static_cast<double>(m);
      }
      for (std::size_t k = 0; k < m; ++k) out[k * e + j] = t.at(k, j) - mu;
    }
    return out;
  };
  const auto a = prep(x), b = prep(y);
  const std::size_t ea = x.cols(), eb = y.cols();

  // |A'B|_F^2 computed through the m x m Gram matrices: tr(AA' BB').
  auto gram = [m](const std::vector<double>& t, std::size_t e) {
    std::vector<double> g(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = i; k < m; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < e; ++j) s += t[i * e + j] * t[k * e + j];
        g[i * m + k] = g[k * m + i] = s;
      }
    return g;
  };
  const auto ga = gram(a, ea), gb = gram(b, eb);
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < m * m; ++i) {
    ab += ga[i] * gb[i];
    aa += ga[i] * ga[i];
    bb += gb[i] * gb[i];
  }
  if (aa == 0.0 || bb == 0.0) fail(ErrorKind::numeric_domain, "cka of a zero-variance representation matrix");
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Biased (V-statistic) MMD^2 with an RBF kernel of width sigma.
inline double mmd_similarity(const Tensor& x, const Tensor& y, double sigma) {
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols()) {
    fail(ErrorKind::alignment, "mmd: " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  }
  detail::check_sigma(sigma);
  auto mean_kernel = [sigma](const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < b.rows(); ++j) s += detail::rbf_kernel(a.row(i), b.row(j), sigma);
    return s / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
  };
  return mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y);
}

// S[layer][p][q] over every model pair.
struct SimilarityTable {
  Metric metric = Metric::rbf;
  double sigma = 1.0;
  bool cka_centered = true;
  std::vector<std::string> model_ids;
  std::size_t num_layers = 0;
  std::vector<double> values;  // layer-major, then p, then q

  std::size_t num_models() const noexcept { return model_ids.size(); }
  double& at(std::size_t layer, std::size_t p, std::size_t q) {
    return values.at((layer * num_models() + p) * num_models() + q);
  }
  double at(std::size_t layer, std::size_t p, std::size_t q) const {
    return values.at((layer * num_models() + p) * num_models() + q);
  }

  void check_complete() const {
    if (model_ids.empty() || num_layers == 0 || values.size() != num_layers * num_models() * num_models()) {
      fail(ErrorKind::completeness, "similarity table does not cover " + std::to_string(num_layers) + " layers x " +
                                        std::to_string(num_models()) + " models");
    }
    for (double v : values)
      if (!std::isfinite(v)) fail(ErrorKind::completeness, "similarity table has a missing (non-finite) entry");
  }

  friend bool operator==(const SimilarityTable&, const SimilarityTable&) = default;
};

struct TableOptions {
  bool cka_centered = true;
  std::size_t threads = 1;
};

// Every RepresentationSet must cover `ids` and the same number of layers.
inline SimilarityTable build_table(const std::vector<RepresentationSet>& reps, const std::vector<std::size_t>& ids,
                                   Metric metric, double sigma, const TableOptions& opts = {}) {
  if (reps.empty()) fail(ErrorKind::completeness, "no models given to the similarity table");
  if (ids.empty()) fail(ErrorKind::input, "no typical samples given to the similarity table");
  if (metric == Metric::rbf || metric == Metric::mmd) detail::check_sigma(sigma);
  const std::size_t layers = reps[0].num_layers();
  for (const auto& r : reps) {
    if (r.num_layers() != layers) {
      fail(ErrorKind::completeness, "model '" + r.model_id + "' has " + std::to_string(r.num_layers()) +
                                        " layers, expected " + std::to_string(layers));
    }
  }

  SimilarityTable t;
  t.metric = metric;
  t.sigma = sigma;
  t.cka_centered = opts.cka_centered;
  t.num_layers = layers;
  for (const auto& r : reps) t.model_ids.push_back(r.model_id);
  const std::size_t n = reps.size();
  t.values.assign(layers * n * n, 0.0);

  parallel_for(layers, opts.threads, [&](std::size_t l) {
    std::vector<Tensor> rows;
    rows.reserve(n);
    for (const auto& r : reps) rows.push_back(r.gather(l, ids));
    for (std::size_t p = 0; p < n; ++p) t.at(l, p, p) = self_value(metric);
    if (metric == Metric::euclidean) {
      if (n < 2) return;
      const auto e = euclidean_similarity(rows);
      for (std::size_t p = 0; p < n; ++p)
        for (std::size_t q = 0; q < n; ++q)
          if (p != q) t.at(l, p, q) = e[p * n + q];
      return;
    }
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double v = 0.0;
        switch (metric) {
          case Metric::rbf: v = rbf_similarity(rows[p], rows[q], sigma); break;
          case Metric::cosine: v = cosine_similarity(rows[p], rows[q]); break;
          case Metric::cka: v = cka_similarity(rows[p], rows[q], opts.cka_centered); break;
          case Metric::mmd: v = mmd_similarity(rows[p], rows[q], sigma); break;
          case Metric::euclidean: break;
        }
        t.at(l, p, q) = t.at(l, q, p) = v;
      }
    }
  });
  return t;
}

inline std::string to_csv(const SimilarityTable& t) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,p,q,value\n";
  for (std::size_t l = 0; l < t.num_layers; ++l)
    for (std::size_t p = 0; p < t.num_models(); ++p)
      for (std::size_t q = 0; q < t.num_models(); ++q)
        os << l << ',' << t.model_ids[p] << ',' << t.model_ids[q] << ',' << t.at(l, p, q) << '\n';
  return os.str();
}

inline nlohmann::ordered_json to_json(const SimilarityTable& t) {
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < t.num_layers; ++l) {
    nlohmann::ordered_json m = nlohmann::ordered_json::array();
    for (std::size_t p = 0; p < t.num_models(); ++p) {
      std::vector<double> row(t.num_models());
      for (std::size_t q = 0; q < t.num_models(); ++q) row[q] = t.at(l, p, q);
      m.push_back(row);
    }
    layers.push_back(std::move(m));
  }
  return {{"metric", to_string(t.metric)}, {"sigma", t.sigma},         {"cka_centered", t.cka_centered},
          {"model_ids", t.model_ids},      {"num_layers", t.num_layers}, {"values", layers}};
}

inline SimilarityTable table_from_json(const nlohmann::json& j) {
  SimilarityTable t;
  try {
    t.metric = parse_metric(j.at("metric").get<std::string>());
    t.sigma = j.at("sigma").get<double>();
    t.cka_centered = j.value("cka_centered", true);
    t.model_ids = j.at("model_ids").get<std::vector<std::string>>();
    t.num_layers = j.at("num_layers").get<std::size_t>();
    const std::size_t n = t.model_ids.size();
    const auto& v = j.at("values");
    if (v.size() != t.num_layers) fail(ErrorKind::completeness, "similarity JSON: layer count mismatch");
    for (const auto& layer : v) {
      if (layer.size() != n) fail(ErrorKind::completeness, "similarity JSON: model count mismatch");
      for (const auto& row : layer) {
        if (row.size() != n) fail(ErrorKind::completeness, "similarity JSON: model count mismatch");
        for (const auto& x : row) t.values.push_back(x.get<double>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("similarity JSON: ") + e.what());
  }
  t.check_complete();
  return t;
}

}  // namespace recall
