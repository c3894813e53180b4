#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace p2ld {

/// Evaluation input problems (CLI exit code 5).
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// 10·log10(max_val² / mse); +inf when mse == 0.
double psnr_from_mse(double mse, double max_val);

/// PSNR over every channel of two same-shaped images (any depth, read as double).
double psnr(const cv::Mat& a, const cv::Mat& b, double max_val = 255.0);

/// Luminance 0.299 R + 0.587 G + 0.114 B as CV_64F. Single-channel input is
/// converted to double unchanged. Input channel order is RGB.
cv::Mat luminance(const cv::Mat& image);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;
};

/// Normalised 1-D Gaussian taps of length `window`.
std::vector<double> gaussian_taps(int window, double sigma);

/// Mean SSIM over every position where the full window fits, computed on
/// luminance. Throws MetricError when shapes differ or a side is below the window.
double ssim(const cv::Mat& a, const cv::Mat& b, const SsimParams& params = {});

struct GaussianMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and covariance (N−1 normalisation) of the rows of `feats`.
GaussianMoments moments(const Eigen::MatrixXd& feats);

/// ‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2}). The trace of the square root is taken
/// from the eigenvalues of the symmetric matrix Σa^{1/2} Σb Σa^{1/2}, negatives clamped.
double frechet_distance(const GaussianMoments& a, const GaussianMoments& b);

/// FID between two feature sets (rows are samples). Warns on stderr when either
/// set has fewer than dim + 1 rows.
double fid(const Eigen::MatrixXd& feats_a, const Eigen::MatrixXd& feats_b);

/// Deterministic map from an image batch (N×3×H×W in [-1, 1]) to N×dim features.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual int output_dim() const = 0;
  virtual torch::Tensor extract(const torch::Tensor& batch) const = 0;
};

/// Small fixed-seed random conv net with global average pooling. Images are
/// resized to 128×128 first. Only useful for relative comparisons.
class RandomConvExtractor : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = 0, int dim = 64);
  std::string name() const override;
  int output_dim() const override { return dim_; }
  torch::Tensor extract(const torch::Tensor& batch) const override;

 private:
  std::uint64_t seed_;
  int dim_;
  std::vector<torch::Tensor> weights_;
};

/// A TorchScript embedding network (e.g. an exported Inception pool layer) that
/// maps N×3×299×299 inputs in [-1, 1] to N×dim features.
class ScriptedExtractor : public FeatureExtractor {
 public:
  explicit ScriptedExtractor(const std::filesystem::path& path);
  ~ScriptedExtractor() override;
  std::string name() const override;
  int output_dim() const override;
  torch::Tensor extract(const torch::Tensor& batch) const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// "builtin" selects RandomConvExtractor(0, 64); anything else is a TorchScript file.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& spec);

/// Row i holds the features of images[i] (8-bit RGB). Throws MetricError on empty input.
Eigen::MatrixXd extract_features(const std::vector<cv::Mat>& images, const FeatureExtractor& ex,
                                 std::size_t batch_size = 16);

struct ImageScore {
  std::string id;
  double ssim = 0.0;
  double psnr = 0.0;
};

struct MetricReport {
  std::string extractor;
  double fid = 0.0;
  double ssim_mean = 0.0;
  double psnr_mean = 0.0;
  std::vector<ImageScore> per_image;
  std::vector<std::string> warnings;
};

/// Pairs images by file stem. Ground truth is resized to the generated image's
/// size when they differ. Throws MetricError when no stems are shared.
MetricReport evaluate_set(const std::filesystem::path& generated_dir, const std::filesystem::path& ground_truth_dir,
                          const FeatureExtractor& ex);

/// {extractor, fid, ssim_mean, psnr_mean, per_image:[{id, ssim, psnr}]}; infinities as "inf".
std::string to_json(const MetricReport& report);
MetricReport report_from_json(const std::string& text);

}  // namespace p2ld
