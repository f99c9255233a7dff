#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "steerlab/tensor_file.hpp"
#include "support/support.hpp"

using namespace steerlab;

namespace {

std::vector<TensorBlob> sample_blobs() {
  return {{"a", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b.c", {4}, {-1, 0.5f, 0, 7}}};
}

}  // namespace

TEST(TensorFile, WriteThenReadIsLossless) {
  const auto dir = fixtures::scratch_dir("tf_roundtrip");
  const auto blobs = sample_blobs();
  write_tensor_file(dir / "x.tensors", blobs, {{"format", "test"}});
  const auto f = TensorFile::open(dir / "x.tensors");
  EXPECT_TRUE(f.contains("a"));
  EXPECT_FALSE(f.contains("z"));
  EXPECT_EQ(f.info("a").shape, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(f.read("a"), blobs[0].data);
  EXPECT_EQ(f.read("b.c"), blobs[1].data);
}

TEST(TensorFile, HeaderIsPaddedToEightBytes) {
  const auto dir = fixtures::scratch_dir("tf_pad");
  write_tensor_file(dir / "x.tensors", sample_blobs(), {});
  std::ifstream in(dir / "x.tensors", std::ios::binary);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  EXPECT_EQ(len % 8, 0u);
}

TEST(TensorFile, TruncatedPayloadNamesTheTensor) {
  const auto dir = fixtures::scratch_dir("tf_trunc");
  write_tensor_file(dir / "x.tensors", sample_blobs(), {});
  const auto size = std::filesystem::file_size(dir / "x.tensors");
  std::filesystem::resize_file(dir / "x.tensors", size - 4);
  try {
    TensorFile::open(dir / "x.tensors");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("b.c"), std::string::npos) << e.what();
  }
}

TEST(TensorFile, RejectsGarbageHeader) {
  const auto dir = fixtures::scratch_dir("tf_garbage");
  std::ofstream out(dir / "x.tensors", std::ios::binary);
  const std::uint64_t len = 5;
  out.write(reinterpret_cast<const char*>(&len), 8);
  out << "{oops";
  out.close();
  EXPECT_THROW(TensorFile::open(dir / "x.tensors"), ValidationError);
}

TEST(TensorFile, MissingFileIsBundleError) {
  EXPECT_THROW(TensorFile::open("/nonexistent/x.tensors"), BundleError);
}
