#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "atomflow/common.hpp"
#include "atomflow/serialize.hpp"
#include "atomflow/tensor.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using atomflow::Tensor;

namespace {

fs::path temp_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "atomflow_ts_test";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.ndim(), 3);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.dim(0), 2);
  EXPECT_EQ(t.dim(2), 4);
  // Row-major: last axis fastest.
  EXPECT_EQ(t.idx3(0, 0, 1), 1u);
  EXPECT_EQ(t.idx3(0, 1, 0), 4u);
  EXPECT_EQ(t.idx3(1, 0, 0), 12u);
  t[t.idx3(1, 2, 3)] = 5.0;
  EXPECT_EQ(t[23], 5.0);
  for (size_t i = 0; i < 23; ++i) EXPECT_EQ(t[i], 0.0);
}

TEST(Tensor, ConstructedZeroFilled) {
  Tensor t({3, 3});
  for (size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(t[i], 0.0);
}

TEST(Tensor, FromDataValidatesCount) {
  EXPECT_NO_THROW(Tensor({2, 2}, {1, 2, 3, 4}));
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), std::runtime_error);
}

TEST(Tensor, BadDimsRejected) {
  EXPECT_THROW(Tensor({2, 0}), std::runtime_error);
  EXPECT_THROW(Tensor({-1, 3}), std::runtime_error);
}

TEST(Tensor, ReshapePreservesDataRequiresSameNumel) {
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.dim(0), 3);
  for (size_t i = 0; i < 6; ++i) EXPECT_EQ(r[i], static_cast<double>(i));
  EXPECT_THROW(t.reshaped({4, 2}), std::runtime_error);
}

TEST(Tensor, ScalarAndFull) {
  Tensor s = Tensor::scalar(2.5);
  EXPECT_EQ(s.numel(), 1u);
  EXPECT_EQ(s[0], 2.5);
  Tensor f = Tensor::full({2, 2}, -1.0);
  for (size_t i = 0; i < 4; ++i) EXPECT_EQ(f[i], -1.0);
}

TEST(Tensor, Helpers) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {1, 2, 3, 4.5});
  EXPECT_TRUE(atomflow::bit_equal(a, a));
  EXPECT_FALSE(atomflow::bit_equal(a, b));
  EXPECT_DOUBLE_EQ(atomflow::max_abs_diff(a, b), 0.5);
  EXPECT_TRUE(atomflow::all_finite(a));
  b[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(atomflow::all_finite(b));
}

TEST(Check, ThrowsWithMessage) {
  try {
    AF_CHECK(1 == 2, "expected " << 1 << " to equal " << 2);
    FAIL() << "should have thrown";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("expected 1 to equal 2"), std::string::npos);
  }
}

TEST(Seed, MixIsDeterministicAndStreamSeparated) {
  EXPECT_EQ(atomflow::mix_seed(42, 1), atomflow::mix_seed(42, 1));
  EXPECT_NE(atomflow::mix_seed(42, 1), atomflow::mix_seed(42, 2));
  EXPECT_NE(atomflow::mix_seed(42, 1), atomflow::mix_seed(43, 1));
}

TEST(Serialize, RoundTripBitIdentical) {
  Tensor t = aftest::random_tensor({3, 4, 5}, 11, -100.0, 100.0);
  t[0] = 0.0;
  t[1] = -0.0;
  t[2] = 1e-300;
  t[3] = 1e300;
  fs::path p = temp_dir() / "rt.atf";
  atomflow::atf::write_tensor(p.string(), t);
  Tensor back = atomflow::atf::read_tensor(p.string());
  ASSERT_TRUE(back.same_shape(t));
  EXPECT_TRUE(atomflow::bit_equal(t, back));
  // -0.0 preserved bit-exactly.
  EXPECT_TRUE(std::signbit(back[1]));
}

TEST(Serialize, HeaderLayout) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  fs::path p = temp_dir() / "hdr.atf";
  atomflow::atf::write_tensor(p.string(), t);
  std::ifstream in(p, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  ASSERT_EQ(bytes.size(), 4u + 1 + 1 + 2 * 4 + 6 * 8);
  EXPECT_EQ(bytes[0], 'A');
  EXPECT_EQ(bytes[1], 'T');
  EXPECT_EQ(bytes[2], 'F');
  EXPECT_EQ(bytes[3], '1');
  EXPECT_EQ(bytes[4], 0);  // dtype f64
  EXPECT_EQ(bytes[5], 2);  // ndim
  // dims little-endian u32
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(bytes[10], 3);
}

TEST(Serialize, MissingFileError) {
  try {
    atomflow::atf::read_tensor((temp_dir() / "nope.atf").string());
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("nope.atf"), std::string::npos);
  }
}

TEST(Serialize, BadMagicRejected) {
  fs::path p = temp_dir() / "bad_magic.atf";
  std::ofstream(p, std::ios::binary) << "NOPE" << std::string(64, '\0');
  EXPECT_THROW(atomflow::atf::read_tensor(p.string()), std::runtime_error);
}

TEST(Serialize, TruncatedPayloadRejected) {
  Tensor t({4}, {1, 2, 3, 4});
  fs::path p = temp_dir() / "trunc.atf";
  atomflow::atf::write_tensor(p.string(), t);
  fs::resize_file(p, fs::file_size(p) - 5);
  EXPECT_THROW(atomflow::atf::read_tensor(p.string()), std::runtime_error);
}

TEST(Serialize, TrailingBytesRejected) {
  Tensor t({4}, {1, 2, 3, 4});
  fs::path p = temp_dir() / "trail.atf";
  atomflow::atf::write_tensor(p.string(), t);
  std::ofstream(p, std::ios::binary | std::ios::app) << "xx";
  EXPECT_THROW(atomflow::atf::read_tensor(p.string()), std::runtime_error);
}

}  // namespace
