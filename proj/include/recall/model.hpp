#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/checkpoint.hpp"
#include "recall/rng.hpp"
#include "recall/tensor.hpp"

namespace recall {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
inline constexpr std::uint32_t kPad = 256;
inline constexpr std::uint32_t kBos = 257;
inline constexpr std::uint32_t kEos = 258;
inline constexpr std::size_t kByteVocab = 259;

using TokenIds = std::vector<std::uint32_t>;

struct ModelConfig {
  std::size_t vocab_size = kByteVocab;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t max_seq_len = 128;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  // Hidden-state taps: embedding output plus one per block.
  std::size_t num_taps() const { return num_layers + 1; }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) fail(ErrorKind::validation, std::string("model config: ") + what + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(embed_dim, "embed_dim");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(mlp_hidden, "mlp_hidden");
    positive(max_seq_len, "max_seq_len");
    if (embed_dim % num_heads != 0) {
      fail(ErrorKind::validation, "model config: embed_dim " + std::to_string(embed_dim) +
                                      " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (!(rope_base > 0.0) || !(norm_eps >= 0.0)) fail(ErrorKind::validation, "model config: rope_base must be > 0 and norm_eps >= 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},     {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"mlp_hidden", c.mlp_hidden},   {"max_seq_len", c.max_seq_len},
          {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
  auto it = ckpt.metadata.find("config_json");
  if (it == ckpt.metadata.end()) fail(ErrorKind::validation, "checkpoint metadata has no config_json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(it->second);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("config_json is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline void stamp_config(Checkpoint& ckpt, const ModelConfig& cfg, std::string model_id) {
  ckpt.metadata["model_id"] = std::move(model_id);
  ckpt.metadata["config_json"] = to_json(cfg).dump();
}

inline LayerGroupIndex build_layer_index(const Checkpoint& ckpt, const ModelConfig& cfg) {
  return build_layer_index(ckpt, cfg.num_layers);
}

// Canonical tensor names and shapes, in checkpoint order. Weight matrices are
// stored [in x out] and applied as x * W.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const std::size_t e = c.embed_dim, h = c.mlp_hidden;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.tok", Shape{c.vocab_size, e});
  for (std::size_t i = 0; i < c.num_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "norm_attn", Shape{e});
    out.emplace_back(p + "attn.wq", Shape{e, e});
    out.emplace_back(p + "attn.wk", Shape{e, e});
    out.emplace_back(p + "attn.wv", Shape{e, e});
    out.emplace_back(p + "attn.wo", Shape{e, e});
    out.emplace_back(p + "norm_mlp", Shape{e});
    out.emplace_back(p + "mlp.w_gate", Shape{e, h});
    out.emplace_back(p + "mlp.w_up", Shape{e, h});
    out.emplace_back(p + "mlp.w_down", Shape{h, e});
  }
  out.emplace_back("final_norm", Shape{e});
  out.emplace_back("lm_head", Shape{e, c.vocab_size});
  return out;
}

inline void check_checkpoint(const Checkpoint& ckpt, const ModelConfig& cfg) {
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    const Tensor* t = ckpt.find(name);
    if (!t) fail(ErrorKind::dimension, "checkpoint is missing tensor '" + name + "'");
    if (t->shape() != shape) {
      fail(ErrorKind::dimension, "tensor '" + name + "' has shape " + shape_string(t->shape()) +
                                     ", config expects " + shape_string(shape));
    }
  }
}

inline Checkpoint zero_checkpoint(const ModelConfig& cfg, std::string model_id = "zero") {
  Checkpoint ckpt;
  for (auto& [name, shape] : parameter_layout(cfg)) ckpt.add(name, Tensor(shape, 0.0f));
  stamp_config(ckpt, cfg, std::move(model_id));
  return ckpt;
}

// Gaussian init: embeddings with std `embed_std`, matrices with
// std `weight_gain / sqrt(fan_in)`, norm gains at 1.
inline Checkpoint random_checkpoint(const ModelConfig& cfg, std::uint64_t seed, std::string model_id = "base",
                                    double embed_std = 1.0, double weight_gain = 1.0) {
  cfg.validate();
  Checkpoint ckpt;
  for (auto& [name, shape] : parameter_layout(cfg)) {
    Tensor t(shape);
    if (shape.size() == 1) {
      for (auto& v : t.data()) v = 1.0f;
    } else {
      Rng rng(seed, name);
      const double std = name == "embed.tok" ? embed_std : weight_gain / std::sqrt(static_cast<double>(shape[0]));
      for (auto& v : t.data()) v = static_cast<float>(rng.normal() * std);
    }
    ckpt.add(name, std::move(t));
  }
  stamp_config(ckpt, cfg, std::move(model_id));
  return ckpt;
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

inline void check_byte_vocab(const ModelConfig& cfg) {
  if (cfg.vocab_size < kByteVocab) {
    fail(ErrorKind::validation, "byte tokenizer needs vocab_size >= 259, config has " + std::to_string(cfg.vocab_size));
  }
}

// [BOS] + bytes + [EOS], truncated to max_seq_len (BOS is always kept).
inline TokenIds tokenize(std::string_view text, const ModelConfig& cfg) {
  check_byte_vocab(cfg);
  if (text.find_first_not_of(" \t\r\n\f\v") == std::string_view::npos) fail(ErrorKind::input, "empty text");
  TokenIds ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(c);
  ids.push_back(kEos);
  if (ids.size() > cfg.max_seq_len) ids.resize(cfg.max_seq_len);
  return ids;
}

// Prompt for generation: [BOS] + bytes, no EOS.
inline TokenIds encode_prompt(std::string_view text, const ModelConfig& cfg) {
  check_byte_vocab(cfg);
  TokenIds ids{kBos};
  for (unsigned char c : text) ids.push_back(c);
  if (ids.size() > cfg.max_seq_len) ids.resize(cfg.max_seq_len);
  return ids;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// hs[0] is the embedding output, hs[i] the residual stream after block i-1
// (before the final norm). Each entry is [tokens x E].
using HiddenStates = std::vector<Tensor>;

struct ForwardResult {
  Tensor logits;
  HiddenStates hidden;
};

namespace detail {

// Rotates (2j, 2j+1) pairs inside every head by pos * base^(-2j/head_dim).
inline void apply_rope(Tensor& x, const ModelConfig& cfg) {
  const std::size_t hd = cfg.head_dim();
  for (std::size_t pos = 0; pos < x.rows(); ++pos) {
    auto r = x.row(pos);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      for (std::size_t j = 0; j + 1 < hd; j += 2) {
        const double freq = std::pow(cfg.rope_base, -static_cast<double>(j) / static_cast<double>(hd));
        const double ang = static_cast<double>(pos) * freq;
        const double c = std::cos(ang), s = std::sin(ang);
        const std::size_t i0 = h * hd + j;
        const double a = r[i0], b = r[i0 + 1];
        r[i0] = static_cast<float>(a * c - b * s);
        r[i0 + 1] = static_cast<float>(a * s + b * c);
      }
    }
  }
}

inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const ModelConfig& cfg) {
  const std::size_t n = q.rows(), hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out({n, cfg.embed_dim});
  std::vector<double> w(n), acc(hd);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < n; ++t) {
      double hi = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (std::size_t d = 0; d < hd; ++d) dot += static_cast<double>(q.at(t, off + d)) * k.at(s, off + d);
        w[s] = dot * scale;
        hi = std::max(hi, w[s]);
      }
      double total = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        w[s] = std::exp(w[s] - hi);
        total += w[s];
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t s = 0; s <= t; ++s) {
        const double p = w[s] / total;
        for (std::size_t d = 0; d < hd; ++d) acc[d] += p * v.at(s, off + d);
      }
      for (std::size_t d = 0; d < hd; ++d) out.at(t, off + d) = static_cast<float>(acc[d]);
    }
  }
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace detail

// Pre-norm decoder: x += Attn(RMSNorm(x)); x += MLP(RMSNorm(x)); causal mask,
// rotary q/k, gated-SiLU MLP. No KV cache.
inline ForwardResult forward(const Checkpoint& ckpt, const ModelConfig& cfg, std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) fail(ErrorKind::input, "forward on an empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    fail(ErrorKind::input, "sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                               std::to_string(cfg.max_seq_len));
  }
  check_checkpoint(ckpt, cfg);
  const std::size_t n = tokens.size(), e = cfg.embed_dim;
  const float eps = static_cast<float>(cfg.norm_eps);

  const Tensor& emb = ckpt.at("embed.tok");
  Tensor x({n, e});
  for (std::size_t t = 0; t < n; ++t) {
    if (tokens[t] >= cfg.vocab_size) {
      fail(ErrorKind::input, "token id " + std::to_string(tokens[t]) + " outside vocab of " + std::to_string(cfg.vocab_size));
    }
    auto src = emb.row(tokens[t]);
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }

  ForwardResult out;
  out.hidden.reserve(cfg.num_taps());
  out.hidden.push_back(x);

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const Tensor h = rms_norm(x, ckpt.at(p + "norm_attn"), eps);
    Tensor q = matmul(h, ckpt.at(p + "attn.wq"));
    Tensor k = matmul(h, ckpt.at(p + "attn.wk"));
    const Tensor v = matmul(h, ckpt.at(p + "attn.wv"));
    detail::apply_rope(q, cfg);
    detail::apply_rope(k, cfg);
    add_inplace(x, matmul(detail::causal_attention(q, k, v, cfg), ckpt.at(p + "attn.wo")));

    const Tensor h2 = rms_norm(x, ckpt.at(p + "norm_mlp"), eps);
    Tensor gate = matmul(h2, ckpt.at(p + "mlp.w_gate"));
    const Tensor up = matmul(h2, ckpt.at(p + "mlp.w_up"));
    for (std::size_t i = 0; i < gate.size(); ++i) {
      gate[i] = static_cast<float>(detail::silu(gate[i]) * static_cast<double>(up[i]));
    }
    add_inplace(x, matmul(gate, ckpt.at(p + "mlp.w_down")));
    out.hidden.push_back(x);
  }

  out.logits = matmul(rms_norm(x, ckpt.at("final_norm"), eps), ckpt.at("lm_head"));
  return out;
}

inline ForwardResult forward(const Checkpoint& ckpt, const ModelConfig& cfg, const TokenIds& tokens) {
  return forward(ckpt, cfg, std::span<const std::uint32_t>(tokens));
}

}  // namespace recall
