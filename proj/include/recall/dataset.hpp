#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recall/error.hpp"

namespace recall {

// One instruction-tuning sample: {"instruction": ..., "output": ...}.
struct Sample {
  std::string instruction;
  std::string output;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Text fed to the model when extracting representations.
inline std::string sample_text(const Sample& s) { return s.instruction + s.output; }

inline std::vector<std::string> sample_texts(const std::vector<Sample>& samples) {
  std::vector<std::string> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(sample_text(s));
  return out;
}

inline std::string to_jsonl(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    nlohmann::ordered_json j = {{"instruction", s.instruction}, {"output", s.output}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Sample> parse_jsonl(const std::string& text, const std::string& origin = "<jsonl>") {
  std::vector<Sample> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Sample s{j.at("instruction").get<std::string>(), j.at("output").get<std::string>()};
      if (s.output.empty()) fail(ErrorKind::validation, origin + ":" + std::to_string(line_no) + ": empty output");
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::validation, origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void save_jsonl(const std::vector<Sample>& samples, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  f << to_jsonl(samples);
}

inline std::vector<Sample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open " + path.string());
  const std::string text{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return parse_jsonl(text, path.string());
}

}  // namespace recall
