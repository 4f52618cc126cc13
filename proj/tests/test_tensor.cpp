#include <gtest/gtest.h>

#include "uacvae/errors.hpp"
#include "uacvae/tensor.hpp"

using namespace uacvae;

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 6.0f);
  EXPECT_EQ(shape_string(t.shape()), "[2,3]");
}

TEST(Tensor, LeadingDimsFoldIntoRows) {
  Tensor<double> t({2, 3, 4});
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_EQ(t.size(), 24u);
}

TEST(Tensor, CountMismatchThrows) { EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), DimensionError); }

TEST(Tensor, CastRoundTrip) {
  Tensor<float> t({1, 3}, {0.5f, -1.25f, 3.0f});
  EXPECT_EQ(t.cast<double>().cast<float>(), t);
}
