#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "pluralfill/features.hpp"

namespace pluralfill {

// Images are [C,H,W] in [-1,1]; masks are [H,W] with 1 = visible.

constexpr float kPsnrPeak = 2.0f;
constexpr float kPsnrCap = 99.0f;

float psnr(const Array& a, const Array& b);
/// PSNR restricted to the hidden pixels of `mask` (all channels).
float masked_psnr(const Array& a, const Array& b, const Array& mask);

/// Mean SSIM over 8x8 sliding windows (stride 1) of the channel-mean image.
float ssim(const Array& a, const Array& b);
constexpr int kSsimWindow = 8;

/// Fréchet distance between Gaussians fitted to the rows of fa and fb.
double frechet_distance(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb);
/// Fréchet distance over pooled extractor features; each set needs >= 8 images.
double frechet_feature_distance(const std::vector<Array>& set_a, const std::vector<Array>& set_b,
                                const FeatureExtractor& fx);

struct MetricRow {
  std::string metric;
  std::string bucket;
  double value = 0.0;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const MetricRow& r);

}  // namespace pluralfill
