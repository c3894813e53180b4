#include "p2ld/metrics.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <set>

#include <json.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/script.h>

#include "p2ld/data.hpp"

namespace p2ld {

namespace fs = std::filesystem;

double psnr_from_mse(double mse, double max_val) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

double psnr(const cv::Mat& a, const cv::Mat& b, double max_val) {
  if (a.size() != b.size() || a.channels() != b.channels()) throw MetricError("psnr: image shapes differ");
  cv::Mat da, db;
  a.convertTo(da, CV_64F);
  b.convertTo(db, CV_64F);
  cv::Mat diff = da - db;
  const cv::Scalar per_channel = cv::sum(diff.mul(diff));
  const double sq = per_channel[0] + per_channel[1] + per_channel[2] + per_channel[3];
  const double mse = sq / static_cast<double>(a.total() * a.channels());
  return psnr_from_mse(mse, max_val);
}

cv::Mat luminance(const cv::Mat& image) {
  cv::Mat d;
  image.convertTo(d, CV_64F);
  if (d.channels() == 1) return d;
  if (d.channels() != 3) throw MetricError("luminance: expected 1 or 3 channels");
  std::vector<cv::Mat> ch;
  cv::split(d, ch);
  return 0.299 * ch[0] + 0.587 * ch[1] + 0.114 * ch[2];
}

std::vector<double> gaussian_taps(int window, double sigma) {
  std::vector<double> taps(window);
  const double c = (window - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    taps[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += taps[i];
  }
  for (auto& t : taps) t /= sum;
  return taps;
}

double ssim(const cv::Mat& a, const cv::Mat& b, const SsimParams& p) {
  if (a.size() != b.size() || a.channels() != b.channels()) throw MetricError("ssim: image shapes differ");
  if (a.rows < p.window || a.cols < p.window)
    throw MetricError("ssim: image smaller than the " + std::to_string(p.window) + "x" + std::to_string(p.window) +
                      " window");
  const cv::Mat x = luminance(a);
  const cv::Mat y = luminance(b);
  const cv::Mat taps(gaussian_taps(p.window, p.sigma), true);

  // Filter then keep only positions whose window lies fully inside the image,
  // so the border mode never contributes.
  const int r = p.window / 2;
  const cv::Rect valid(r, r, a.cols - 2 * r, a.rows - 2 * r);
  auto blur = [&](const cv::Mat& m) {
    cv::Mat out;
    cv::sepFilter2D(m, out, CV_64F, taps, taps, cv::Point(-1, -1), 0.0, cv::BORDER_REFLECT);
    return cv::Mat(out, valid).clone();
  };
  const cv::Mat mx = blur(x), my = blur(y);
  const cv::Mat sxx = blur(x.mul(x)) - mx.mul(mx);
  const cv::Mat syy = blur(y.mul(y)) - my.mul(my);
  const cv::Mat sxy = blur(x.mul(y)) - mx.mul(my);

  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  cv::Mat num = (2.0 * mx.mul(my) + c1).mul(2.0 * sxy + c2);
  cv::Mat den = (mx.mul(mx) + my.mul(my) + c1).mul(sxx + syy + c2);
  cv::Mat map;
  cv::divide(num, den, map);
  return cv::mean(map)[0];
}

GaussianMoments moments(const Eigen::MatrixXd& feats) {
  if (feats.rows() < 2) throw MetricError("moments: need at least two samples");
  GaussianMoments m;
  m.mean = feats.colwise().mean().transpose();
  const Eigen::MatrixXd centered = feats.rowwise() - m.mean.transpose();
  m.cov = centered.transpose() * centered / static_cast<double>(feats.rows() - 1);
  return m;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianMoments& a, const GaussianMoments& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows())
    throw MetricError("fid: feature dimensions differ (" + std::to_string(a.mean.size()) + " vs " +
                      std::to_string(b.mean.size()) + ")");
  const Eigen::MatrixXd root_a = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = root_a * b.cov * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double trace_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
  return std::max(0.0, value);
}

double fid(const Eigen::MatrixXd& feats_a, const Eigen::MatrixXd& feats_b) {
  if (feats_a.cols() != feats_b.cols())
    throw MetricError("fid: feature dimensions differ (" + std::to_string(feats_a.cols()) + " vs " +
                      std::to_string(feats_b.cols()) + ")");
  const auto dim = feats_a.cols();
  if (feats_a.rows() < dim + 1 || feats_b.rows() < dim + 1)
    std::cerr << "warning: fid with " << feats_a.rows() << "/" << feats_b.rows() << " samples in " << dim
              << " dimensions; covariance is rank-deficient\n";
  return frechet_distance(moments(feats_a), moments(feats_b));
}

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed, int dim) : seed_(seed), dim_(dim) {
  auto gen = at::detail::createCPUGenerator(seed);
  const std::vector<std::array<int64_t, 2>> shapes = {{16, 3}, {32, 16}, {dim, 32}};
  for (const auto& [out, in] : shapes) {
    const double std = std::sqrt(2.0 / (in * 9.0));
    weights_.push_back(torch::randn({out, in, 3, 3}, gen, torch::kFloat32) * std);
  }
}

std::string RandomConvExtractor::name() const {
  return "builtin-rand" + std::to_string(dim_) + "-seed" + std::to_string(seed_);
}

torch::Tensor RandomConvExtractor::extract(const torch::Tensor& batch) const {
  torch::NoGradGuard guard;
  namespace F = torch::nn::functional;
  auto h = F::interpolate(batch.to(torch::kFloat32), F::InterpolateFuncOptions()
                                                         .size(std::vector<int64_t>{128, 128})
                                                         .mode(torch::kBilinear)
                                                         .align_corners(false));
  for (const auto& w : weights_) h = torch::relu(torch::conv2d(h, w, {}, 2, 1));
  return h.mean({2, 3});
}

struct ScriptedExtractor::Impl {
  mutable torch::jit::Module module;
  std::string name;
  mutable int dim = -1;
};

ScriptedExtractor::ScriptedExtractor(const fs::path& path) : impl_(std::make_unique<Impl>()) {
  try {
    impl_->module = torch::jit::load(path.string(), torch::kCPU);
  } catch (const std::exception& e) {
    throw MetricError("cannot load extractor " + path.string() + ": " + e.what());
  }
  impl_->module.eval();
  impl_->name = "torchscript:" + path.filename().string();
}

ScriptedExtractor::~ScriptedExtractor() = default;

std::string ScriptedExtractor::name() const { return impl_->name; }

int ScriptedExtractor::output_dim() const {
  if (impl_->dim < 0) extract(torch::zeros({1, 3, 299, 299}));
  return impl_->dim;
}

torch::Tensor ScriptedExtractor::extract(const torch::Tensor& batch) const {
  torch::NoGradGuard guard;
  namespace F = torch::nn::functional;
  auto x = F::interpolate(batch.to(torch::kFloat32), F::InterpolateFuncOptions()
                                                         .size(std::vector<int64_t>{299, 299})
                                                         .mode(torch::kBilinear)
                                                         .align_corners(false));
  auto out = impl_->module.forward({x}).toTensor().flatten(1);
  impl_->dim = static_cast<int>(out.size(1));
  return out;
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& spec) {
  if (spec == "builtin") return std::make_unique<RandomConvExtractor>(0, 64);
  return std::make_unique<ScriptedExtractor>(spec);
}

Eigen::MatrixXd extract_features(const std::vector<cv::Mat>& images, const FeatureExtractor& ex,
                                 std::size_t batch_size) {
  if (images.empty()) throw MetricError("extract_features: empty image list");
  Eigen::MatrixXd out;
  std::size_t row = 0;
  // Images are embedded one at a time within a batch loop so differing sizes are fine.
  for (std::size_t begin = 0; begin < images.size(); begin += batch_size) {
    const auto end = std::min(images.size(), begin + batch_size);
    for (auto i = begin; i < end; ++i) {
      const auto& img = images[i];
      if (img.type() != CV_8UC3) throw MetricError("extract_features: expected 8-bit RGB images");
      cv::Mat contiguous = img.isContinuous() ? img : img.clone();
      auto t = torch::from_blob(contiguous.data, {img.rows, img.cols, 3}, torch::kUInt8)
                   .permute({2, 0, 1})
                   .to(torch::kFloat32)
                   .unsqueeze(0) /
                   127.5 -
               1.0;
      auto f = ex.extract(t).to(torch::kFloat64).contiguous();
      if (out.size() == 0) out.resize(static_cast<Eigen::Index>(images.size()), f.size(1));
      const double* data = f.data_ptr<double>();
      for (int64_t c = 0; c < f.size(1); ++c) out(static_cast<Eigen::Index>(row), c) = data[c];
      ++row;
    }
  }
  return out;
}

namespace {

std::map<std::string, fs::path> images_in(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MetricError("not a directory: " + dir.string());
  static const std::set<std::string> exts = {".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG"};
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && exts.count(e.path().extension().string())) out.emplace(e.path().stem().string(), e.path());
  return out;
}

nlohmann::json number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

double number_from(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
  }
  return j.get<double>();
}

}  // namespace

MetricReport evaluate_set(const fs::path& generated_dir, const fs::path& ground_truth_dir, const FeatureExtractor& ex) {
  const auto gen = images_in(generated_dir);
  const auto gt = images_in(ground_truth_dir);
  MetricReport report;
  report.extractor = ex.name();

  std::vector<cv::Mat> gen_images, gt_images;
  for (const auto& [id, path] : gen) {
    const auto other = gt.find(id);
    if (other == gt.end()) {
      report.warnings.push_back("generated '" + id + "' has no ground truth; excluded");
      continue;
    }
    cv::Mat g, t;
    try {
      g = load_rgb(path);
      t = load_rgb(other->second);
    } catch (const DataError& e) {
      report.warnings.push_back(std::string(e.what()) + "; excluded");
      continue;
    }
    if (t.size() != g.size()) cv::resize(t, t, g.size(), 0, 0, cv::INTER_LINEAR);
    report.per_image.push_back({id, ssim(g, t), psnr(g, t)});
    gen_images.push_back(std::move(g));
    gt_images.push_back(std::move(t));
  }
  for (const auto& [id, path] : gt)
    if (!gen.count(id)) report.warnings.push_back("ground truth '" + id + "' has no generated image; excluded");
  if (report.per_image.empty())
    throw MetricError("no common basenames between " + generated_dir.string() + " and " + ground_truth_dir.string());
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";

  double ssim_sum = 0.0, psnr_sum = 0.0;
  for (const auto& s : report.per_image) {
    ssim_sum += s.ssim;
    psnr_sum += s.psnr;
  }
  report.ssim_mean = ssim_sum / static_cast<double>(report.per_image.size());
  report.psnr_mean = psnr_sum / static_cast<double>(report.per_image.size());

  if (gen_images.size() < 2) {
    report.warnings.push_back("fid needs at least two images; reported as 0");
    report.fid = 0.0;
  } else {
    report.fid = fid(extract_features(gen_images, ex), extract_features(gt_images, ex));
  }
  return report;
}

std::string to_json(const MetricReport& r) {
  nlohmann::json j;
  j["extractor"] = r.extractor;
  j["fid"] = number(r.fid);
  j["ssim_mean"] = number(r.ssim_mean);
  j["psnr_mean"] = number(r.psnr_mean);
  j["per_image"] = nlohmann::json::array();
  for (const auto& s : r.per_image) j["per_image"].push_back({{"id", s.id}, {"ssim", number(s.ssim)}, {"psnr", number(s.psnr)}});
  return j.dump(2);
}

MetricReport report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricReport r;
  r.extractor = j.at("extractor").get<std::string>();
  r.fid = number_from(j.at("fid"));
  r.ssim_mean = number_from(j.at("ssim_mean"));
  r.psnr_mean = number_from(j.at("psnr_mean"));
  for (const auto& s : j.at("per_image"))
    r.per_image.push_back({s.at("id").get<std::string>(), number_from(s.at("ssim")), number_from(s.at("psnr"))});
  return r;
}

}  // namespace p2ld
