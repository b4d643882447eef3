#include "jointstereo/error.hpp"
#include "jointstereo/geometry.hpp"
#include "test_support.hpp"
#include "doctest_torch.hpp"

using namespace jointstereo;
using namespace jointstereo::testing;

namespace {

FeatureMap row(std::vector<double> values) {
  auto t = torch::tensor(values, torch::kDouble).view({1, 1, 1, -1});
  return FeatureMap{t, 1};
}

DisparityMap constant_disparity(double value, int64_t h, int64_t w, int scale = 1) {
  return DisparityMap::dense(torch::full({1, h, w}, value, torch::kDouble), scale);
}

std::vector<double> as_vector(const torch::Tensor& t) {
  auto flat = t.to(torch::kDouble).contiguous().view({-1});
  return std::vector<double>(flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel());
}

}  // namespace

TEST_CASE("inverse_warp with zero disparity is the identity") {
  auto f = random_double({2, 3, 5, 7}, 1);
  auto out = inverse_warp(FeatureMap{f, 1}, DisparityMap::dense(torch::zeros({2, 5, 7}, torch::kDouble)));
  CHECK(torch::equal(out.data, f));
}

TEST_CASE("inverse_warp integer shift zero-fills the first columns") {
  auto out = inverse_warp(row({4, 10, 20, 30}), constant_disparity(1.0, 1, 4));
  CHECK((as_vector(out.data) == std::vector<double>{0, 4, 10, 20}));
}

TEST_CASE("inverse_warp half-pixel shift interpolates against zero padding") {
  auto out = inverse_warp(row({4, 10, 20, 30}), constant_disparity(0.5, 1, 4));
  const auto v = as_vector(out.data);
  const std::vector<double> expected{2, 7, 15, 25};
  for (size_t i = 0; i < 4; ++i) CHECK(v[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("inverse_warp matches the column-shift oracle for constant integer disparity") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t w = 3 + static_cast<int64_t>(rng() % 12);
    const int64_t d = static_cast<int64_t>(rng() % static_cast<uint64_t>(w));
    auto f = random_double({1, 2, 3, w}, rng());
    auto out = inverse_warp(FeatureMap{f, 1}, constant_disparity(static_cast<double>(d), 3, w));
    CHECK((out.data - shift_oracle(f, d)).abs().max().item<double>() < 1e-12);
  }
}

TEST_CASE("inverse_warp matches the per-pixel bilinear oracle for varying disparity") {
  auto f = random_double({2, 3, 4, 9}, 3);
  auto d = uniform_double({2, 4, 9}, 0.0, 6.0, 4);
  auto out = inverse_warp(FeatureMap{f, 1}, DisparityMap::dense(d));
  CHECK((out.data - bilinear_oracle(f, d)).abs().max().item<double>() < 1e-12);
}

TEST_CASE("inverse_warp is linear in the features") {
  auto f = random_double({1, 2, 3, 8}, 7), g = random_double({1, 2, 3, 8}, 8);
  auto d = DisparityMap::dense(uniform_double({1, 3, 8}, 0.0, 5.0, 9));
  auto lhs = inverse_warp(FeatureMap{2.5 * f - 0.75 * g, 1}, d).data;
  auto rhs = 2.5 * inverse_warp(FeatureMap{f, 1}, d).data - 0.75 * inverse_warp(FeatureMap{g, 1}, d).data;
  CHECK((lhs - rhs).abs().max().item<double>() < 1e-12);
}

TEST_CASE("inverse_warp treats invalid disparity as zero shift") {
  auto f = random_double({1, 1, 1, 4}, 11);
  DisparityMap d{torch::full({1, 1, 4}, 2.0, torch::kDouble), torch::zeros({1, 1, 4}, torch::kBool), 1};
  CHECK(torch::equal(inverse_warp(FeatureMap{f, 1}, d).data, f));
}

TEST_CASE("inverse_warp rejects shape and scale mismatches") {
  auto f = FeatureMap{random_double({1, 1, 2, 4}, 1), 1};
  CHECK_THROWS_AS(inverse_warp(f, constant_disparity(0, 2, 5)), ContractViolation);
  CHECK_THROWS_AS(inverse_warp(f, constant_disparity(0, 2, 4, 2)), ContractViolation);
}

TEST_CASE("rescale_disparity examples") {
  SUBCASE("factor-2 downsample averages and halves") {
    auto out = rescale_disparity(constant_disparity(2.0, 2, 2), 2);
    CHECK(out.scale == 2);
    CHECK(out.values.sizes() == torch::IntArrayRef({1, 1, 1}));
    CHECK(out.values.item<double>() == doctest::Approx(1.0));
    CHECK(out.valid.item<bool>());
  }
  SUBCASE("same scale is unchanged") {
    auto d = DisparityMap::dense(uniform_double({1, 3, 5}, 0, 4, 2), 2);
    auto out = rescale_disparity(d, 2);
    CHECK(torch::equal(out.values, d.values));
    CHECK(torch::equal(out.valid, d.valid));
  }
  SUBCASE("upsampling a scale-2 cell of 3 gives a 2x2 map of 6") {
    auto out = rescale_disparity(constant_disparity(3.0, 1, 1, 2), 1);
    CHECK(out.values.sizes() == torch::IntArrayRef({1, 2, 2}));
    CHECK((out.values - 6.0).abs().max().item<double>() < 1e-12);
    CHECK(out.valid.all().item<bool>());
  }
  SUBCASE("non-integral ratios are rejected") {
    CHECK_THROWS_AS(rescale_disparity(constant_disparity(1, 6, 6, 2), 3), ContractViolation);
    CHECK_THROWS_AS(rescale_disparity(constant_disparity(1, 6, 6, 3), 2), ContractViolation);
  }
}

TEST_CASE("rescale_disparity round-trips constant maps") {
  for (int s : {2, 4, 8}) {
    auto d = constant_disparity(5.0, 16, 32);
    auto back = rescale_disparity(rescale_disparity(d, s), 1);
    CHECK((back.values - 5.0).abs().max().item<double>() < 1e-12);
    CHECK(back.valid.all().item<bool>());
  }
}

TEST_CASE("rescale_disparity keeps a downsampled cell valid only when all sources are") {
  auto valid = torch::ones({1, 2, 4}, torch::kBool);
  valid[0][0][0] = false;
  DisparityMap d{torch::ones({1, 2, 4}, torch::kDouble), valid, 1};
  auto out = rescale_disparity(d, 2);
  CHECK_FALSE(out.valid[0][0][0].item<bool>());
  CHECK(out.valid[0][0][1].item<bool>());
}

TEST_CASE("warp_validity_mask examples") {
  CHECK(warp_validity_mask(constant_disparity(0, 2, 4), 4).all().item<bool>());
  auto one = warp_validity_mask(constant_disparity(1, 1, 4), 4);
  CHECK_FALSE(one[0][0][0].item<bool>());
  CHECK(one[0][0].narrow(0, 1, 3).all().item<bool>());
  CHECK_FALSE(warp_validity_mask(constant_disparity(5, 1, 4), 4).any().item<bool>());

  DisparityMap partly{torch::zeros({1, 1, 4}, torch::kDouble), torch::tensor({true, false, true, true}).view({1, 1, 4}), 1};
  auto mask = warp_validity_mask(partly, 4);
  CHECK(torch::equal(mask, partly.valid));
}

TEST_CASE("correlation_1d examples") {
  auto f = row({1, 2});
  auto out = correlation_1d(f, f, 1).data;
  CHECK(out.sizes() == torch::IntArrayRef({1, 2, 1, 2}));
  CHECK((as_vector(out[0][0]) == std::vector<double>{1, 4}));
  CHECK((as_vector(out[0][1]) == std::vector<double>{0, 2}));

  auto zero = correlation_1d(FeatureMap{random_double({1, 3, 2, 5}, 1), 1},
                             FeatureMap{torch::zeros({1, 3, 2, 5}, torch::kDouble), 1}, 3);
  CHECK(zero.data.abs().max().item<double>() == 0.0);
}

TEST_CASE("correlation_1d zero shift on identical inputs is the mean of squares") {
  auto f = random_double({2, 5, 3, 6}, 21);
  auto out = correlation_1d(FeatureMap{f, 1}, FeatureMap{f, 1}, 2).data;
  auto expected = f.pow(2).mean(1);
  CHECK((out.select(1, 0) - expected).abs().max().item<double>() < 1e-12);
}

TEST_CASE("correlation_1d matches a brute-force loop") {
  auto l = random_double({1, 3, 2, 6}, 31), r = random_double({1, 3, 2, 6}, 32);
  auto out = correlation_1d(FeatureMap{l, 1}, FeatureMap{r, 1}, 4).data;
  auto la = l.accessor<double, 4>(), ra = r.accessor<double, 4>();
  for (int64_t d = 0; d <= 4; ++d)
    for (int64_t y = 0; y < 2; ++y)
      for (int64_t x = 0; x < 6; ++x) {
        double sum = 0;
        if (x - d >= 0)
          for (int64_t c = 0; c < 3; ++c) sum += la[0][c][y][x] * ra[0][c][y][x - d];
        CHECK(out[0][d][y][x].item<double>() == doctest::Approx(sum / 3.0).epsilon(1e-12));
      }
}

TEST_CASE("correlation_1d rejects mismatched inputs") {
  auto a = FeatureMap{random_double({1, 2, 2, 4}, 1), 1};
  auto b = FeatureMap{random_double({1, 2, 2, 5}, 2), 1};
  CHECK_THROWS_AS(correlation_1d(a, b, 2), ContractViolation);
  CHECK_THROWS_AS(correlation_1d(a, FeatureMap{a.data, 2}, 2), ContractViolation);
}

TEST_CASE("geometry kernels pass finite-difference gradient checks") {
  SUBCASE("inverse_warp, features and disparity") {
    auto f = random_double({2, 3, 4, 8}, 41);
    auto d = fractional_disparity({2, 4, 8}, 5, 42);
    auto err = gradient_relative_error(
        [](const std::vector<torch::Tensor>& in) {
          auto out = inverse_warp(FeatureMap{in[0], 1}, DisparityMap::dense(in[1]));
          return (out.data * out.data).sum() + out.data.sum();
        },
        {f, d});
    CHECK(err < 1e-4);
  }
  SUBCASE("correlation_1d, both inputs") {
    auto l = random_double({2, 3, 4, 8}, 43), r = random_double({2, 3, 4, 8}, 44);
    auto err = gradient_relative_error(
        [](const std::vector<torch::Tensor>& in) {
          auto out = correlation_1d(FeatureMap{in[0], 1}, FeatureMap{in[1], 1}, 3).data;
          return (out * out).sum() + out.sum();
        },
        {l, r});
    CHECK(err < 1e-4);
  }
}
