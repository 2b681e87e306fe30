#include "pluralfill/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "pluralfill/errors.hpp"

namespace pluralfill {

namespace {

float psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  const double db = 10.0 * std::log10(static_cast<double>(kPsnrPeak) * kPsnrPeak / mse);
  return static_cast<float>(std::min(db, static_cast<double>(kPsnrCap)));
}

void require_same(const Array& a, const Array& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::vector<double> grayscale(const Array& x, int64_t& H, int64_t& W) {
  if (x.rank() != 3) throw ShapeError("expected [C,H,W] image, got " + shape_str(x.shape()));
  const int64_t C = x.dim(0);
  H = x.dim(1);
  W = x.dim(2);
  std::vector<double> g(static_cast<size_t>(H * W), 0.0);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H * W; ++i) g[i] += x[c * H * W + i];
  for (auto& v : g) v /= static_cast<double>(C);
  return g;
}

Eigen::MatrixXd to_matrix(const Array& rows) {
  Eigen::MatrixXd m(rows.dim(0), rows.dim(1));
  for (int64_t i = 0; i < rows.dim(0); ++i)
    for (int64_t j = 0; j < rows.dim(1); ++j) m(i, j) = rows[i * rows.dim(1) + j];
  return m;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

float psnr(const Array& a, const Array& b) {
  require_same(a, b, "psnr");
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return psnr_from_mse(a.size() ? s / static_cast<double>(a.size()) : 0.0);
}

float masked_psnr(const Array& a, const Array& b, const Array& mask) {
  require_same(a, b, "masked_psnr");
  if (a.rank() != 3 || mask.shape() != Shape{a.dim(1), a.dim(2)}) {
    throw ShapeError("masked_psnr: mask " + shape_str(mask.shape()) + " does not match image " + shape_str(a.shape()));
  }
  const int64_t C = a.dim(0), HW = a.dim(1) * a.dim(2);
  double s = 0.0;
  int64_t n = 0;
  for (int64_t i = 0; i < HW; ++i) {
    if (mask[i] != 0.0f) continue;
    for (int64_t c = 0; c < C; ++c) {
      const double d = static_cast<double>(a[c * HW + i]) - b[c * HW + i];
      s += d * d;
    }
    n += C;
  }
  return psnr_from_mse(n ? s / static_cast<double>(n) : 0.0);
}

float ssim(const Array& a, const Array& b) {
  require_same(a, b, "ssim");
  int64_t H = 0, W = 0;
  const auto ga = grayscale(a, H, W);
  const auto gb = grayscale(b, H, W);
  if (H < kSsimWindow || W < kSsimWindow) throw ShapeError("ssim: image smaller than the 8x8 window");
  const double c1 = std::pow(0.01 * kPsnrPeak, 2), c2 = std::pow(0.03 * kPsnrPeak, 2);
  const double n = kSsimWindow * kSsimWindow;
  double total = 0.0;
  int64_t windows = 0;
  for (int64_t y = 0; y + kSsimWindow <= H; ++y) {
    for (int64_t x = 0; x + kSsimWindow <= W; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = 0; dy < kSsimWindow; ++dy) {
        for (int dx = 0; dx < kSsimWindow; ++dx) {
          const double va = ga[(y + dy) * W + x + dx], vb = gb[(y + dy) * W + x + dx];
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return static_cast<float>(total / static_cast<double>(windows));
}

double frechet_distance(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb) {
  if (fa.cols() != fb.cols()) throw ShapeError("frechet_distance: feature widths differ");
  if (fa.rows() < 2 || fb.rows() < 2) throw Error("frechet_distance: need at least 2 samples per set");
  auto stats = [](const Eigen::MatrixXd& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = f.colwise().mean().transpose();
    const Eigen::MatrixXd centred = f.rowwise() - mu.transpose();
    cov = centred.transpose() * centred / static_cast<double>(f.rows() - 1);
    cov.diagonal().array() += 1e-6;
  };
  Eigen::VectorXd mua, mub;
  Eigen::MatrixXd ca, cb;
  stats(fa, mua, ca);
  stats(fb, mub, cb);
  const Eigen::MatrixXd ra = sqrt_psd(ca);
  const Eigen::MatrixXd cross = sqrt_psd(ra * cb * ra);
  const double d = (mua - mub).squaredNorm() + ca.trace() + cb.trace() - 2.0 * cross.trace();
  return std::max(0.0, d);
}

double frechet_feature_distance(const std::vector<Array>& set_a, const std::vector<Array>& set_b,
                                const FeatureExtractor& fx) {
  if (set_a.size() < 8 || set_b.size() < 8) throw Error("frechet_feature_distance: each set needs >= 8 images");
  auto features = [&](const std::vector<Array>& set) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(set.size()), fx.pooled_dim());
    for (size_t i = 0; i < set.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = to_matrix(fx.pooled_features(set[i]));
    return m;
  };
  return frechet_distance(features(set_a), features(set_b));
}

void to_json(nlohmann::json& j, const MetricRow& r) {
  j = {{"metric", r.metric}, {"bucket", r.bucket}, {"value", r.value}, {"seed", r.seed}};
}

}  // namespace pluralfill
