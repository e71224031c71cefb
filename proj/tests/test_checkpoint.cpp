#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "recall/checkpoint.hpp"
#include "recall/model.hpp"
#include "recall/rng.hpp"

using namespace recall;

namespace {

std::string raw_file(const std::string& header, std::size_t payload_bytes) {
  std::string out;
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((header.size() >> (8 * i)) & 0xff));
  out += header;
  out.append(payload_bytes, '\0');
  return out;
}

ParseErrc parse_code(const std::string& bytes) {
  try {
    deserialize(bytes);
  } catch (const ParseError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no parse error";
  return ParseErrc::malformed_header;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("recall_test_" + name);
}

}  // namespace

TEST(CheckpointFile, SingleTensorRoundTrip) {
  Checkpoint c;
  c.add("w", Tensor({2, 3}, {1.5f, -2.0f, 0.0f, -0.0f, 1e-30f, 3.25f}));
  c.metadata["model_id"] = "m";
  const auto path = temp_path("one.st");
  save(c, path);
  const auto back = load(path);
  EXPECT_TRUE(bit_equal(c, back));
  EXPECT_EQ(serialize(back), serialize(c));
  std::filesystem::remove(path);
}

TEST(CheckpointFile, EmptyCheckpoint) {
  const auto back = deserialize(serialize(Checkpoint{}));
  EXPECT_TRUE(back.empty());
  EXPECT_TRUE(deserialize(raw_file("{}", 0)).empty());
}

TEST(CheckpointFile, PreservesNameOrder) {
  Checkpoint c;
  for (const char* n : {"zeta", "alpha", "mid"}) c.add(n, Tensor({1}, 1.0f));
  const auto back = deserialize(serialize(c));
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.entries()[0].name, "zeta");
  EXPECT_EQ(back.entries()[1].name, "alpha");
  EXPECT_EQ(back.entries()[2].name, "mid");
}

TEST(CheckpointFile, HeaderIsPaddedAndLittleEndian) {
  Checkpoint c;
  c.add("x", Tensor({1}, 1.0f));
  const auto bytes = serialize(c);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | p[i];
  EXPECT_EQ(len % 8, 0u);
  // 1.0f = 0x3f800000, stored little-endian at the end.
  EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - 1]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - 2]), 0x80);
}

TEST(CheckpointFile, OverlappingRangesRejected) {
  const std::string h =
      R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})";
  EXPECT_EQ(parse_code(raw_file(h, 12)), ParseErrc::overlapping_ranges);
}

TEST(CheckpointFile, MalformedCorpusRejected) {
  const std::string ok_entry = R"("a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]})";
  EXPECT_EQ(parse_code("abc"), ParseErrc::header_length);
  EXPECT_EQ(parse_code(raw_file("{}", 0).substr(0, 8) + std::string(1, '{')), ParseErrc::header_length);
  EXPECT_EQ(parse_code(raw_file("{\"a\":", 0)), ParseErrc::malformed_header);
  EXPECT_EQ(parse_code(raw_file("[]", 0)), ParseErrc::malformed_header);
  EXPECT_EQ(parse_code(raw_file("{" + ok_entry + "," + ok_entry + "}", 8)), ParseErrc::duplicate_name);
  EXPECT_EQ(parse_code(raw_file(R"({"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}})", 4)),
            ParseErrc::unsupported_dtype);
  EXPECT_EQ(parse_code(raw_file(R"({"a":{"dtype":"Q9","shape":[2],"data_offsets":[0,8]}})", 8)),
            ParseErrc::malformed_header);
  EXPECT_EQ(parse_code(raw_file("{" + ok_entry + "}", 4)), ParseErrc::truncated_payload);
  EXPECT_EQ(parse_code(raw_file(R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", 8)),
            ParseErrc::bad_offsets);
  EXPECT_EQ(parse_code(raw_file("{" + ok_entry + "}", 12)), ParseErrc::bad_offsets);
  EXPECT_EQ(parse_code(raw_file(R"({"a":{"dtype":"F32","shape":[0],"data_offsets":[0,0]}})", 0)),
            ParseErrc::malformed_header);
  EXPECT_EQ(parse_code(raw_file(R"({"a":{"dtype":"F32","shape":[2]}})", 8)), ParseErrc::malformed_header);
  EXPECT_EQ(parse_code(raw_file(R"({"__metadata__":{"k":1}})", 0)), ParseErrc::malformed_header);
}

TEST(CheckpointFile, NonFiniteRejectedUnlessAllowed) {
  Checkpoint c;
  c.add("x", Tensor({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()}));
  const auto bytes = serialize(c);
  try {
    deserialize(bytes);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.code(), ParseErrc::nonfinite_value);
  }
  EXPECT_TRUE(bit_equal(deserialize(bytes, {.allow_nonfinite = true}), c));
}

TEST(CheckpointFile, PropertyRandomRoundTrip) {
  Rng rng(2024);
  for (int trial = 0; trial < 30; ++trial) {
    Checkpoint c;
    const std::size_t n = rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
      Shape s;
      for (std::size_t r = 0, rank = 1 + rng.below(3); r < rank; ++r) s.push_back(1 + rng.below(5));
      Tensor t(s);
      for (auto& v : t.data()) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()) & 0xbf7fffffu);
      c.add("t" + std::to_string(i), std::move(t));
    }
    c.metadata["seed"] = std::to_string(trial);
    EXPECT_TRUE(bit_equal(deserialize(serialize(c)), c));
  }
}

TEST(CheckpointContainer, DuplicateAddRejected) {
  Checkpoint c;
  c.add("a", Tensor({1}));
  EXPECT_THROW(c.add("a", Tensor({1})), Error);
}

TEST(LayerIndex, TwoBlockModelHasThreeGroups) {
  ModelConfig cfg;
  cfg.embed_dim = 4;
  cfg.num_heads = 1;
  cfg.mlp_hidden = 4;
  cfg.num_layers = 2;
  const auto ckpt = zero_checkpoint(cfg);
  const auto idx = build_layer_index(ckpt, cfg);
  ASSERT_EQ(idx.group_count(), 3u);
  EXPECT_EQ(idx.group(0), std::vector<std::string>{"embed.tok"});
  for (const auto& n : idx.group(1)) EXPECT_EQ(n.rfind("layers.0.", 0), 0u) << n;
  EXPECT_EQ(idx.group_of("final_norm"), 2u);
  EXPECT_EQ(idx.group_of("lm_head"), 2u);
  EXPECT_EQ(idx.group_of("layers.1.attn.wq"), 2u);
}

TEST(LayerIndex, ThirtyTwoBlocksGiveThirtyThreeGroups) {
  Checkpoint c;
  c.add("embed.tok", Tensor({1}));
  for (int i = 0; i < 32; ++i) c.add("layers." + std::to_string(i) + ".attn.wq", Tensor({1}));
  c.add("final_norm", Tensor({1}));
  c.add("lm_head", Tensor({1}));
  EXPECT_EQ(build_layer_index(c, 32).group_count(), 33u);
}

TEST(LayerIndex, BlockBeyondConfigIsError) {
  Checkpoint c;
  c.add("layers.5.attn.wq", Tensor({1}));
  try {
    build_layer_index(c, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::grouping);
  }
}

TEST(LayerIndex, OrphanNamesListed) {
  Checkpoint c;
  c.add("embed.tok", Tensor({1}));
  c.add("layers.0.attn.wx", Tensor({1}));
  c.add("bias", Tensor({1}));
  try {
    build_layer_index(c, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::grouping);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("layers.0.attn.wx"), std::string::npos);
    EXPECT_NE(msg.find("bias"), std::string::npos);
  }
}

TEST(LayerIndex, PropertyPartitionAndDepthOrder) {
  for (std::size_t layers = 1; layers <= 6; ++layers) {
    ModelConfig cfg;
    cfg.embed_dim = 4;
    cfg.num_heads = 2;
    cfg.mlp_hidden = 3;
    cfg.num_layers = layers;
    const auto ckpt = zero_checkpoint(cfg);
    const auto idx = build_layer_index(ckpt, cfg);
    EXPECT_EQ(idx.group_count(), layers + 1);
    std::set<std::string> seen;
    std::size_t params = 0;
    for (std::size_t g = 0; g < idx.group_count(); ++g) {
      for (const auto& n : idx.group(g)) {
        EXPECT_TRUE(seen.insert(n).second) << n << " appears in two groups";
        params += ckpt.at(n).size();
      }
    }
    EXPECT_EQ(seen.size(), ckpt.size());
    EXPECT_EQ(params, ckpt.parameter_count());
    for (std::size_t i = 0; i < layers; ++i) {
      EXPECT_EQ(idx.group_of("layers." + std::to_string(i) + ".mlp.w_up"), i + 1);
    }
  }
}
