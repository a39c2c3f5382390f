// SPDX-License-Identifier: Apache-2.0
#include <blvit/data.hpp>

#include <gtest/gtest.h>

#include <filesystem>

using namespace blvit;
using namespace blvit::data;

namespace {

DatasetSpec small_spec() {
  DatasetSpec s;
  s.train_count = 103;
  s.val_count = 20;
  s.seed = 5;
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("blvit_data_test_" + name)).string();
}

}  // namespace

TEST(SyntheticShapes, ByteIdenticalForFixedSeed) {
  const auto [a, va] = make_dataset(small_spec());
  const auto [b, vb] = make_dataset(small_spec());
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(va.pixels, vb.pixels);
  EXPECT_NE(a.pixels, va.pixels);
  DatasetSpec other = small_spec();
  other.seed = 6;
  EXPECT_NE(make_dataset(other).first.pixels, a.pixels);
}

TEST(SyntheticShapes, ClassBalancedWithinOne) {
  const auto d = synthetic_shapes(103, small_spec(), false);
  std::vector<int> counts(10, 0);
  for (int l : d.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) EXPECT_LE(std::abs(c - 103 / 10.0), 1.0);
}

TEST(SyntheticShapes, PixelsAndBoxesWellFormed) {
  const auto d = synthetic_shapes(50, small_spec(), false);
  ASSERT_EQ(d.pixels.size(), 50u * 32u * 32u);
  ASSERT_EQ(d.boxes.size(), 50u);
  for (double v : d.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Box& b = d.boxes[i];
    EXPECT_LT(b.x0, b.x1);
    EXPECT_LE(b.x1, 32u);
    EXPECT_LE(b.y1, 32u);
    // the shape is brighter inside its box than outside on average
    double in = 0, out = 0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const double v = d.pixels[i * 1024 + y * 32 + x];
        if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) {
          in += v;
          ++n_in;
        } else {
          out += v;
          ++n_out;
        }
      }
    EXPECT_GT(in / n_in, out / n_out + 0.2) << "sample " << i;
  }
}

TEST(SyntheticShapes, BatchExtraction) {
  const auto d = synthetic_shapes(10, small_spec(), false);
  const std::vector<std::size_t> idx{3, 7};
  Tensor t = d.images(idx);
  EXPECT_EQ(t.shape(), (Shape{2, 32, 32, 1}));
  EXPECT_EQ(t.values()[1024], d.pixels[7 * 1024]);
  EXPECT_EQ(d.labels_of(idx), (std::vector<int>{3, 7}));
}

TEST(SyntheticShapes, RejectsTooManyClasses) {
  DatasetSpec s = small_spec();
  s.num_classes = 11;
  EXPECT_THROW(make_dataset(s), ConfigError);
}

TEST(Idx, ParsesTwoFourByFourImages) {
  std::vector<std::uint8_t> bytes{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4};
  for (int i = 0; i < 32; ++i) bytes.push_back(static_cast<std::uint8_t>(i * 8));
  const auto a = parse_idx(bytes);
  EXPECT_EQ(a.dims, (std::vector<std::uint32_t>{2, 4, 4}));
  ASSERT_EQ(a.values.size(), 32u);
  EXPECT_EQ(a.values[31], 248);
  const auto labels = parse_idx(std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 2, 4, 9});
  const Dataset d = from_idx(a, labels, 10);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.image_size, 4u);
  EXPECT_DOUBLE_EQ(d.pixels[31], 248.0 / 255.0);
  EXPECT_EQ(d.labels, (std::vector<int>{4, 9}));
}

TEST(Idx, ErrorsCarryByteOffsets) {
  auto message = [](std::vector<std::uint8_t> bytes) {
    try {
      parse_idx(bytes);
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message({0, 1, 8, 3}).find("byte offset 0"), std::string::npos);
  EXPECT_NE(message({0, 0, 8, 3, 0, 0, 0, 2, 0, 0}).find("byte offset 8"), std::string::npos);
  EXPECT_NE(message({0, 0, 8, 1, 0, 0, 0, 3, 1, 2}).find("byte offset 8"), std::string::npos);
  EXPECT_NE(message({0, 0, 8, 1, 0, 0, 0, 0}).find("byte offset 4"), std::string::npos);
  EXPECT_THROW(from_idx(parse_idx(std::vector<std::uint8_t>{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7}),
                        parse_idx(std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 1, 10}), 10),
               ParseError);
}

TEST(Idx, FileRoundTripThroughMakeDataset) {
  const auto train = synthetic_shapes(30, small_spec(), false);
  const auto [images, labels] = to_idx(train);
  EXPECT_EQ(encode_idx(images)[3], 3);
  EXPECT_EQ(encode_idx(labels)[3], 1);
  DatasetSpec spec = small_spec();
  spec.source = Source::Idx;
  spec.train_images = spec.val_images = temp_path("images.idx");
  spec.train_labels = spec.val_labels = temp_path("labels.idx");
  write_bytes(spec.train_images, encode_idx(images));
  write_bytes(spec.train_labels, encode_idx(labels));
  const auto [back, val] = make_dataset(spec);
  EXPECT_EQ(back.labels, train.labels);
  for (std::size_t i = 0; i < train.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], train.pixels[i], 0.5 / 255.0 + 1e-12);
  spec.image_size = 28;
  EXPECT_THROW(make_dataset(spec), ParseError);
  std::filesystem::remove(spec.train_images);
  std::filesystem::remove(spec.train_labels);
  EXPECT_THROW(load_idx(spec.train_images, spec.train_labels, 10), ParseError);
}
