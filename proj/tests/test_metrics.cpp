#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pluralfill/errors.hpp"
#include "pluralfill/metrics.hpp"
#include "pluralfill/ops.hpp"
#include "support/test_support.hpp"

using namespace pluralfill;
using pluralfill::testing::random_array;

namespace {

// Straightforward per-window SSIM written independently of the library.
double ssim_oracle(const Array& a, const Array& b) {
  const int64_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  auto gray = [&](const Array& x, int64_t y, int64_t xx) {
    double s = 0;
    for (int64_t c = 0; c < C; ++c) s += x[(c * H + y) * W + xx];
    return s / C;
  };
  const double c1 = 0.02 * 0.02, c2 = 0.06 * 0.06;
  double total = 0;
  int count = 0;
  for (int64_t y = 0; y + 8 <= H; ++y) {
    for (int64_t x = 0; x + 8 <= W; ++x) {
      std::vector<double> pa, pb;
      for (int dy = 0; dy < 8; ++dy)
        for (int dx = 0; dx < 8; ++dx) {
          pa.push_back(gray(a, y + dy, x + dx));
          pb.push_back(gray(b, y + dy, x + dx));
        }
      double ma = 0, mb = 0;
      for (int i = 0; i < 64; ++i) {
        ma += pa[i];
        mb += pb[i];
      }
      ma /= 64;
      mb /= 64;
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < 64; ++i) {
        va += (pa[i] - ma) * (pa[i] - ma);
        vb += (pb[i] - mb) * (pb[i] - mb);
        cov += (pa[i] - ma) * (pb[i] - mb);
      }
      va /= 64;
      vb /= 64;
      cov /= 64;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

Eigen::MatrixXd column(const std::vector<double>& v) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
  for (size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return m;
}

}  // namespace

TEST_CASE("psnr") {
  const Array a = random_array({3, 8, 8}, 1);
  CHECK(psnr(a, a) == 99.0f);
  Array b({3, 8, 8}, 0.1f), c({3, 8, 8}, -0.1f);
  // mse 0.04, peak 2 -> 10 log10(4 / 0.04) = 20
  CHECK(psnr(b, c) == doctest::Approx(20.0f).epsilon(1e-5));
  const Array d = random_array({3, 8, 8}, 2);
  CHECK(psnr(a, d) == psnr(d, a));
  CHECK_THROWS_AS(psnr(a, Array({3, 8, 4})), ShapeError);
}

TEST_CASE("masked psnr only counts hidden pixels") {
  Array a({3, 4, 4}, 0.0f), b({3, 4, 4}, 0.0f);
  Array mask({4, 4}, 1.0f);
  mask[5] = 0.0f;
  for (int c = 0; c < 3; ++c) {
    b[c * 16 + 5] = 0.2f;  // hidden pixel off by 0.2
    b[c * 16 + 0] = 1.0f;  // visible pixel differences are ignored
  }
  CHECK(masked_psnr(a, b, mask) == doctest::Approx(20.0f).epsilon(1e-5));
  CHECK(masked_psnr(a, b, Array({4, 4}, 1.0f)) == 99.0f);
  CHECK_THROWS_AS(masked_psnr(a, b, Array({4, 3}, 1.0f)), ShapeError);
}

TEST_CASE("ssim") {
  const Array a = random_array({3, 16, 16}, 5);
  CHECK(ssim(a, a) == doctest::Approx(1.0f).epsilon(1e-6));

  // Zero-mean pattern against its negation.
  Array z({3, 16, 16});
  for (int64_t i = 0; i < z.size(); ++i) z[i] = ((i / 16 + i % 16) % 2) ? 0.5f : -0.5f;
  Array neg = z;
  for (float& v : neg.data()) v = -v;
  CHECK(ssim(z, neg) < 0.0f);

  const Array b = random_array({3, 16, 16}, 6);
  CHECK(std::fabs(static_cast<double>(ssim(a, b)) - ssim_oracle(a, b)) < 1e-6);
  CHECK_THROWS_AS(ssim(Array({3, 7, 16}), Array({3, 7, 16})), ShapeError);
}

TEST_CASE("frechet distance") {
  Eigen::MatrixXd f = Eigen::MatrixXd::Random(20, 5);
  CHECK(std::fabs(frechet_distance(f, f)) < 1e-4);

  // 1-D: (mu1 - mu2)^2 + (sigma1 - sigma2)^2 with sample (n-1) variances.
  std::vector<double> x{0.1, 0.5, -0.3, 1.2, 0.7, -0.8, 0.0, 0.4};
  std::vector<double> y{2.0, 2.9, 1.1, 3.5, 2.2, 0.9, 1.7, 2.6, 3.1};
  auto stats = [](const std::vector<double>& v, double& mu, double& sd) {
    mu = 0;
    for (double e : v) mu += e;
    mu /= v.size();
    double s = 0;
    for (double e : v) s += (e - mu) * (e - mu);
    sd = std::sqrt(s / (v.size() - 1));
  };
  double m1, s1, m2, s2;
  stats(x, m1, s1);
  stats(y, m2, s2);
  const double want = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
  CHECK(frechet_distance(column(x), column(y)) == doctest::Approx(want).epsilon(1e-5));

  Eigen::MatrixXd g = Eigen::MatrixXd::Random(12, 5) * 3.0;
  CHECK(frechet_distance(f, g) >= 0.0);
  CHECK(frechet_distance(f, g) == doctest::Approx(frechet_distance(g, f)).epsilon(1e-9));
  // Rank-deficient covariances (fewer samples than dims) stay finite and >= 0.
  Eigen::MatrixXd thin = Eigen::MatrixXd::Random(3, 10), thin2 = Eigen::MatrixXd::Random(3, 10);
  const double d = frechet_distance(thin, thin2);
  CHECK(std::isfinite(d));
  CHECK(d >= 0.0);
}

TEST_CASE("frechet feature distance over images") {
  FeatureExtractor fx;
  std::vector<Array> a, b;
  for (uint64_t i = 0; i < 8; ++i) {
    a.push_back(random_array({3, 16, 16}, 100 + i));
    b.push_back(random_array({3, 16, 16}, 200 + i, -0.2f, 0.9f));
  }
  CHECK(std::fabs(frechet_feature_distance(a, a, fx)) < 1e-4);
  CHECK(frechet_feature_distance(a, b, fx) > 0.0);
  a.pop_back();
  CHECK_THROWS_AS(frechet_feature_distance(a, b, fx), Error);
}

TEST_CASE("feature extractor is frozen and seed-determined") {
  FeatureExtractor f1, f2, f3(77);
  CHECK(f1.params().bit_equal(f2.params()));
  CHECK_FALSE(f1.params().bit_equal(f3.params()));
  const Array x = random_array({2, 3, 32, 32}, 4);
  Tape t;
  auto maps = f1.forward(t, t.constant(x));
  REQUIRE(maps.size() == 4);
  CHECK(maps[0].shape() == Shape{2, 16, 16, 16});
  CHECK(maps[3].shape() == Shape{2, 64, 2, 2});
  CHECK(t.trainable_leaves().empty());
  CHECK(f1.pooled_features(x).shape() == Shape{2, f1.pooled_dim()});
  const Array img = random_array({3, 32, 32}, 8);
  CHECK(f1.perceptual_distance(img, img) == 0.0f);
  CHECK(f1.perceptual_distance(img, random_array({3, 32, 32}, 9)) > 0.0f);
  CHECK_THROWS_AS(f1.forward(t, t.constant(Array({1, 1, 8, 8}))), ShapeError);
}

TEST_CASE("metric rows serialise") {
  nlohmann::json j = MetricRow{"psnr", "20-30", 21.5, 3};
  CHECK(j["metric"] == "psnr");
  CHECK(j["bucket"] == "20-30");
  CHECK(j["value"] == 21.5);
  CHECK(j["seed"] == 3);
}
