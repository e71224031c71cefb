#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/error.hpp"
#include "recall/tensor.hpp"

namespace recall {

struct NamedTensor {
  std::string name;
  Tensor tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Ordered name -> tensor container plus string metadata. Model checkpoints
// carry `model_id` and `config_json`; representation sidecars reuse the same
// container with their own names.
class Checkpoint {
 public:
  Checkpoint() = default;

  void add(std::string name, Tensor t) {
    if (index_.contains(name)) fail(ErrorKind::input, "duplicate tensor name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(t)});
  }

  const std::vector<NamedTensor>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }
  Tensor* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }

  const Tensor& at(const std::string& name) const {
    if (auto* t = find(name)) return *t;
    fail(ErrorKind::input, "checkpoint has no tensor '" + name + "'");
  }
  Tensor& at(const std::string& name) {
    if (auto* t = find(name)) return *t;
    fail(ErrorKind::input, "checkpoint has no tensor '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  std::map<std::string, std::string> metadata;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.entries_ == b.entries_ && a.metadata == b.metadata;
  }

 private:
  std::vector<NamedTensor> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.size() != b.size() || a.metadata != b.metadata) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i];
    const auto& y = b.entries()[i];
    if (x.name != y.name || !bit_equal(x.tensor, y.tensor)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Container file: u64 little-endian header length, JSON header, raw payload.
//
//   {"__metadata__": {"model_id": "...", ...},
//    "<name>": {"dtype": "F32", "shape": [..], "data_offsets": [begin, end]}, ...}
//
// Offsets are relative to the payload start. Tensors are stored back to back
// in entry order; the header is space-padded to a multiple of 8 bytes.
// ---------------------------------------------------------------------------

struct LoadOptions {
  bool allow_nonfinite = false;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline bool is_known_dtype(const std::string& s) {
  static const char* known[] = {"BOOL", "U8", "I8", "I16", "U16", "F16", "BF16",
                                "I32", "U32", "F32", "F64", "I64", "U64", "F8_E4M3", "F8_E5M2"};
  return std::any_of(std::begin(known), std::end(known), [&](const char* k) { return s == k; });
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ckpt) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  for (const auto& [k, v] : ckpt.metadata) meta[k] = v;
  header["__metadata__"] = std::move(meta);
  std::uint64_t offset = 0;
  for (const auto& e : ckpt.entries()) {
    const std::uint64_t bytes = e.tensor.size() * sizeof(float);
    header[e.name] = {{"dtype", "F32"}, {"shape", e.tensor.shape()}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::string out;
  out.reserve(8 + text.size() + offset);
  detail::put_u64_le(out, text.size());
  out += text;
  for (const auto& e : ckpt.entries()) {
    for (float f : e.tensor.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
  return out;
}

inline Checkpoint deserialize(const std::string& bytes, const LoadOptions& opts = {}) {
  using json = nlohmann::ordered_json;
  if (bytes.size() < 8) throw ParseError(ParseErrc::header_length, "file shorter than the 8-byte header length");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = detail::get_u64_le(raw);
  if (header_len > bytes.size() - 8) {
    throw ParseError(ParseErrc::header_length, "header length " + std::to_string(header_len) +
                                                   " exceeds file size " + std::to_string(bytes.size()));
  }

  std::vector<std::string> seen;
  json::parser_callback_t dedup = [&seen](int depth, json::parse_event_t ev, json& parsed) {
    if (depth == 1 && ev == json::parse_event_t::key) {
      const auto& k = parsed.get_ref<const std::string&>();
      if (std::find(seen.begin(), seen.end(), k) != seen.end()) {
        throw ParseError(ParseErrc::duplicate_name, "tensor '" + k + "' appears twice in the header");
      }
      seen.push_back(k);
    }
    return true;
  };
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len), dedup);
  } catch (const json::exception& e) {
    throw ParseError(ParseErrc::malformed_header, e.what());
  }
  if (!header.is_object()) throw ParseError(ParseErrc::malformed_header, "header is not a JSON object");

  const std::uint64_t payload_size = bytes.size() - 8 - header_len;
  const unsigned char* payload = raw + 8 + header_len;

  Checkpoint ckpt;
  struct Range {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Range> ranges;
  std::vector<std::pair<std::string, Shape>> layout;

  for (auto it = header.begin(); it != header.end(); ++it) {
    const std::string& name = it.key();
    const json& v = it.value();
    if (name == "__metadata__") {
      if (!v.is_object()) throw ParseError(ParseErrc::malformed_header, "__metadata__ is not an object");
      for (auto m = v.begin(); m != v.end(); ++m) {
        if (!m.value().is_string()) {
          throw ParseError(ParseErrc::malformed_header, "metadata value for '" + m.key() + "' is not a string");
        }
        ckpt.metadata[m.key()] = m.value().get<std::string>();
      }
      continue;
    }
    if (name.empty()) throw ParseError(ParseErrc::bad_name, "empty tensor name");
    if (!v.is_object() || !v.contains("dtype") || !v.contains("shape") || !v.contains("data_offsets")) {
      throw ParseError(ParseErrc::malformed_header, "entry '" + name + "' lacks dtype/shape/data_offsets");
    }
    if (!v["dtype"].is_string()) throw ParseError(ParseErrc::malformed_header, "dtype of '" + name + "' is not a string");
    const auto dtype = v["dtype"].get<std::string>();
    if (dtype != "F32") {
      if (detail::is_known_dtype(dtype)) {
        throw ParseError(ParseErrc::unsupported_dtype, "tensor '" + name + "' has dtype " + dtype + "; only F32 is supported");
      }
      throw ParseError(ParseErrc::malformed_header, "tensor '" + name + "' has unknown dtype '" + dtype + "'");
    }
    const json& js = v["shape"];
    if (!js.is_array() || js.empty()) throw ParseError(ParseErrc::malformed_header, "shape of '" + name + "' must be a non-empty array");
    Shape shape;
    for (const auto& d : js) {
      if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
        throw ParseError(ParseErrc::malformed_header, "shape of '" + name + "' has a non-positive extent");
      }
      shape.push_back(d.get<std::size_t>());
    }
    const json& off = v["data_offsets"];
    if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() || !off[1].is_number_unsigned()) {
      throw ParseError(ParseErrc::malformed_header, "data_offsets of '" + name + "' must be two unsigned integers");
    }
    const auto b = off[0].get<std::uint64_t>(), e = off[1].get<std::uint64_t>();
    if (e < b || e - b != numel(shape) * sizeof(float)) {
      throw ParseError(ParseErrc::bad_offsets, "byte range of '" + name + "' does not match shape " + shape_string(shape));
    }
    if (e > payload_size) {
      throw ParseError(ParseErrc::truncated_payload, "tensor '" + name + "' ends at byte " + std::to_string(e) +
                                                         " but payload has " + std::to_string(payload_size));
    }
    ranges.push_back({b, e, name});
    layout.emplace_back(name, std::move(shape));
  }

  std::vector<Range> sorted = ranges;
  std::sort(sorted.begin(), sorted.end(), [](const Range& x, const Range& y) { return x.begin < y.begin; });
  std::uint64_t cursor = 0;
  for (const auto& r : sorted) {
    if (r.begin < cursor) {
      throw ParseError(ParseErrc::overlapping_ranges, "tensor '" + r.name + "' overlaps a preceding tensor");
    }
    if (r.begin > cursor) throw ParseError(ParseErrc::bad_offsets, "gap in payload before tensor '" + r.name + "'");
    cursor = r.end;
  }
  if (cursor != payload_size) {
    throw ParseError(ParseErrc::bad_offsets, "payload has " + std::to_string(payload_size - cursor) + " trailing bytes");
  }

  for (std::size_t i = 0; i < layout.size(); ++i) {
    auto& [name, shape] = layout[i];
    const std::size_t n = numel(shape);
    std::vector<float> data(n);
    const unsigned char* p = payload + ranges[i].begin;
    for (std::size_t j = 0; j < n; ++j) {
      std::uint32_t bits = 0;
      for (int k = 3; k >= 0; --k) bits = (bits << 8) | p[4 * j + k];
      data[j] = std::bit_cast<float>(bits);
      if (!opts.allow_nonfinite && !std::isfinite(data[j])) {
        throw ParseError(ParseErrc::nonfinite_value, "tensor '" + name + "' holds a non-finite value at element " + std::to_string(j));
      }
    }
    ckpt.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return ckpt;
}

inline void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::io, "write to " + path.string() + " failed");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Checkpoint load(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  try {
    return deserialize(read_file(path), opts);
  } catch (const ParseError& e) {
    throw ParseError(e.code(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Layer grouping. Group 0 holds the embedding, group i+1 holds block i, and
// final_norm / lm_head join the last block's group, so G = num_layers + 1.
// ---------------------------------------------------------------------------

class LayerGroupIndex {
 public:
  LayerGroupIndex() = default;
  explicit LayerGroupIndex(std::size_t groups) : groups_(groups) {}

  std::size_t group_count() const noexcept { return groups_.size(); }
  const std::vector<std::string>& group(std::size_t g) const { return groups_.at(g); }
  const std::vector<std::vector<std::string>>& groups() const noexcept { return groups_; }

  std::size_t group_of(const std::string& name) const {
    auto it = owner_.find(name);
    if (it == owner_.end()) fail(ErrorKind::grouping, "tensor '" + name + "' is not in any group");
    return it->second;
  }

  void assign(const std::string& name, std::size_t g) {
    groups_.at(g).push_back(name);
    owner_[name] = g;
  }

 private:
  std::vector<std::vector<std::string>> groups_;
  std::unordered_map<std::string, std::size_t> owner_;
};

// Group id for a tensor name under the model naming grammar, or nullopt if the
// name does not conform. Block indices are not range-checked here.
inline std::optional<std::pair<bool, std::size_t>> parse_model_tensor_name(const std::string& name) {
  static const std::regex block(
      R"(layers\.(0|[1-9][0-9]*)\.(attn\.(wq|wk|wv|wo)|mlp\.(w_gate|w_up|w_down)|norm_attn|norm_mlp))");
  if (name == "embed.tok") return std::pair{false, std::size_t{0}};
  if (name == "final_norm" || name == "lm_head") return std::pair{true, std::size_t{0}};
  std::smatch m;
  if (std::regex_match(name, m, block)) return std::pair{false, std::stoul(m[1].str()) + 1};
  return std::nullopt;
}

inline LayerGroupIndex build_layer_index(const Checkpoint& ckpt, std::size_t num_layers) {
  LayerGroupIndex index(num_layers + 1);
  std::vector<std::string> orphans;
  for (const auto& e : ckpt.entries()) {
    auto parsed = parse_model_tensor_name(e.name);
    if (!parsed) {
      orphans.push_back(e.name);
      continue;
    }
    const auto [trailing, group] = *parsed;
    if (trailing) {
      index.assign(e.name, num_layers);
    } else if (group > num_layers) {
      fail(ErrorKind::grouping, "tensor '" + e.name + "' refers to block " + std::to_string(group - 1) +
                                    " but the model has " + std::to_string(num_layers) + " layers");
    } else {
      index.assign(e.name, group);
    }
  }
  if (!orphans.empty()) {
    std::string list;
    for (const auto& o : orphans) list += (list.empty() ? "" : ", ") + o;
    fail(ErrorKind::grouping, "tensor names outside the naming grammar: " + list);
  }
  return index;
}

}  // namespace recall
