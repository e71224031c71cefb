#pragma once

#include <cmath>
#include <vector>

#include "recall/dataset.hpp"
#include "recall/model.hpp"
#include "recall/parallel.hpp"

namespace recall {

// Argmax of one logits row; ties go to the lowest token id.
inline std::uint32_t argmax_token(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<std::uint32_t>(best);
}

// Greedy continuation of `prompt` by up to `count` tokens (fewer if the
// sequence reaches max_seq_len).
inline TokenIds greedy_continue(const Checkpoint& ckpt, const ModelConfig& cfg, TokenIds prompt, std::size_t count) {
  TokenIds generated;
  for (std::size_t i = 0; i < count && prompt.size() < cfg.max_seq_len; ++i) {
    const auto fw = forward(ckpt, cfg, prompt);
    const auto next = argmax_token(fw.logits.row(fw.logits.rows() - 1));
    generated.push_back(next);
    prompt.push_back(next);
  }
  return generated;
}

// Decodes exactly as many tokens as the reference has bytes and compares.
inline bool exact_match(const Checkpoint& ckpt, const ModelConfig& cfg, const Sample& s) {
  const auto gen = greedy_continue(ckpt, cfg, encode_prompt(s.instruction, cfg), s.output.size());
  if (gen.size() != s.output.size()) return false;
  for (std::size_t i = 0; i < gen.size(); ++i)
    if (gen[i] != static_cast<unsigned char>(s.output[i])) return false;
  return true;
}

inline double evaluate(const Checkpoint& ckpt, const ModelConfig& cfg, const std::vector<Sample>& split,
                       std::size_t threads = 1) {
  if (split.empty()) fail(ErrorKind::input, "evaluate on an empty split");
  std::vector<char> hit(split.size(), 0);
  parallel_for(split.size(), threads, [&](std::size_t i) { hit[i] = exact_match(ckpt, cfg, split[i]) ? 1 : 0; });
  std::size_t n = 0;
  for (char h : hit) n += static_cast<std::size_t>(h);
  return static_cast<double>(n) / static_cast<double>(split.size());
}

// Summed cross-entropy (nats) and token count over the output bytes plus EOS
// of one sample, teacher forced on [BOS] instruction output [EOS].
inline std::pair<double, std::size_t> sample_loss(const Checkpoint& ckpt, const ModelConfig& cfg, const Sample& s) {
  TokenIds ids = encode_prompt(s.instruction, cfg);
  const std::size_t prompt_len = ids.size();
  for (unsigned char c : s.output) ids.push_back(c);
  ids.push_back(kEos);
  if (ids.size() > cfg.max_seq_len) ids.resize(cfg.max_seq_len);
  if (ids.size() <= prompt_len) return {0.0, 0};
  const auto fw = forward(ckpt, cfg, ids);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = prompt_len; t < ids.size(); ++t) {
    auto row = fw.logits.row(t - 1);
    double hi = row[0];
    for (float v : row) hi = std::max(hi, static_cast<double>(v));
    double z = 0.0;
    for (float v : row) z += std::exp(static_cast<double>(v) - hi);
    total += (std::log(z) + hi) - static_cast<double>(row[ids[t]]);
    ++count;
  }
  return {total, count};
}

// Mean token-level cross-entropy over a labelled split.
inline double mean_token_loss(const Checkpoint& ckpt, const ModelConfig& cfg, const std::vector<Sample>& split,
                              std::size_t threads = 1) {
  if (split.empty()) fail(ErrorKind::input, "loss on an empty split");
  std::vector<std::pair<double, std::size_t>> parts(split.size());
  parallel_for(split.size(), threads, [&](std::size_t i) { parts[i] = sample_loss(ckpt, cfg, split[i]); });
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& [l, c] : parts) {
    total += l;
    count += c;
  }
  if (count == 0) fail(ErrorKind::input, "no output tokens fit within max_seq_len");
  return total / static_cast<double>(count);
}

}  // namespace recall
