#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "sfp/checkpoint.hpp"
#include "support.hpp"

using namespace sfp;
using sfp::testing::random_tensor;

namespace {

std::string tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "sfp-test-io";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

ParameterStore<float> sample_store() {
  std::mt19937_64 g(7);
  ParameterStore<float> s;
  s.add("enc.w", random_tensor<float>(Shape{4, 2, 3, 3}, g));
  s.add("enc.b", random_tensor<float>(Shape{4}, g));
  s.add("codebook", random_tensor<float>(Shape{8, 4}, g));
  return s;
}

}  // namespace

TEST(TensorBasics, RowMajorIndexing) {
  Tensor<double> t(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 2}), 5);
  EXPECT_EQ(t.at({1, 0}), 3);
  EXPECT_THROW(t.at({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1, 2, 3}), ShapeError);
}

TEST(TensorBasics, StackAndSlice) {
  Tensor<double> a(Shape{2}, {1, 2}), b(Shape{2}, {3, 4});
  std::vector<Tensor<double>> items{a, b};
  auto s = stack<double>(items);
  EXPECT_EQ(s.shape(), (Shape{2, 2}));
  EXPECT_EQ(slice_leading(s, 1, 1), Tensor<double>(Shape{1, 2}, {3, 4}));
}

TEST(Sfpt, RoundTripIsBitExactInBothPrecisions) {
  std::mt19937_64 g(1);
  auto d = random_tensor(Shape{3, 5, 2}, g);
  EXPECT_EQ(decode_tensor<double>(encode_tensor(d)), d);
  auto f = d.cast<float>();
  EXPECT_EQ(decode_tensor<float>(encode_tensor(f)), f);
  const auto p = tmp_path("rt.sfpt");
  write_tensor_file(p, d);
  EXPECT_EQ(read_tensor_file<double>(p), d);
}

TEST(Sfpt, HeaderLayout) {
  Tensor<float> t(Shape{2, 3});
  auto b = encode_tensor(t);
  // magic 4 + version 4 + dtype 1 + rank 1 + 2 dims * 8 + 6 floats * 4
  ASSERT_EQ(b.size(), 4u + 4 + 1 + 1 + 16 + 24);
  EXPECT_EQ(std::memcmp(b.data(), "SFPT", 4), 0);
  EXPECT_EQ(b[4], 1);  // little-endian version 1
  EXPECT_EQ(b[8], 1);  // f32 tag
  EXPECT_EQ(b[9], 2);  // rank
  EXPECT_EQ(b[10], 2);
  EXPECT_EQ(b[18], 3);
  EXPECT_EQ(tensor_file_dtype(encode_tensor(t.cast<double>())), io::DType::f64);
}

TEST(Sfpt, CrossPrecisionLoadConverts) {
  Tensor<double> d(Shape{2}, {0.5, -1.25});
  EXPECT_EQ(decode_tensor<float>(encode_tensor(d)), (Tensor<float>(Shape{2}, {0.5f, -1.25f})));
}

TEST(Sfpt, MalformedInputsAreRejected) {
  auto b = encode_tensor(Tensor<double>(Shape{2}, {1, 2}));
  auto bad = b;
  bad[0] = 'X';
  EXPECT_THROW(decode_tensor<double>(bad), FormatError);
  auto trunc = b;
  trunc.pop_back();
  EXPECT_THROW(decode_tensor<double>(trunc), FormatError);
  auto extra = b;
  extra.push_back(0);
  EXPECT_THROW(decode_tensor<double>(extra), FormatError);
  auto rank0 = b;
  rank0[9] = 0;
  EXPECT_THROW(decode_tensor<double>(rank0), FormatError);
  auto ver = b;
  ver[4] = 9;
  EXPECT_THROW(decode_tensor<double>(ver), FormatError);
  EXPECT_THROW(encode_tensor(Tensor<double>(Shape{})), FormatError);
}

TEST(ParameterStoreTest, FingerprintTracksValuesAndNames) {
  auto s = sample_store();
  const auto h = s.fingerprint();
  EXPECT_EQ(sample_store().fingerprint(), h);
  s.mutable_value("enc.b")[0] += 1.0f;
  EXPECT_NE(s.fingerprint(), h);
  EXPECT_THROW(s.add("enc.b", Tensor<float>(Shape{1})), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint<float> ck{Component::policy, 0xABCDEFull, sample_store()};
  const auto p = tmp_path("rt.sfpc");
  save_checkpoint(p, ck);
  auto back = load_checkpoint<float>(p, Component::policy, 0xABCDEFull);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.digest, ck.digest);
}

TEST(Checkpoint, EveryFlippedByteIsDetected) {
  Checkpoint<float> ck{Component::world_model, 42, sample_store()};
  const auto bytes = encode_checkpoint(ck);
  for (std::size_t i = 0; i < bytes.size(); i += 7) {
    auto b = bytes;
    b[i] ^= 0x5A;
    EXPECT_THROW(decode_checkpoint<float>(b), FormatError) << "byte " << i;
  }
}

TEST(Checkpoint, PayloadCorruptionReportsCrc) {
  auto bytes = encode_checkpoint(Checkpoint<float>{Component::world_model, 1, sample_store()});
  bytes[40] ^= 1;
  try {
    decode_checkpoint<float>(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
  }
}

TEST(Checkpoint, WrongComponentOrDigestIsRejected) {
  const auto p = tmp_path("kind.sfpc");
  save_checkpoint(p, Checkpoint<float>{Component::world_model, 5, sample_store()});
  EXPECT_THROW(load_checkpoint<float>(p, Component::policy), FormatError);
  EXPECT_THROW(load_checkpoint<float>(p, Component::world_model, 6), FormatError);
  EXPECT_NO_THROW(load_checkpoint<float>(p, Component::world_model, 5));
  EXPECT_NO_THROW(load_checkpoint<float>(p, Component::world_model));
}

TEST(Checkpoint, PrecisionCrossLoad) {
  Checkpoint<float> ck{Component::policy, 0, sample_store()};
  auto d = decode_checkpoint<double>(encode_checkpoint(ck));
  EXPECT_EQ(d.params.cast<float>(), ck.params);
}
