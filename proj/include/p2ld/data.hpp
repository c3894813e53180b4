#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace p2ld {

namespace fs = std::filesystem;

/// Raised for malformed or inconsistent input data (maps to CLI exit code 1).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Category { Male, Female, CartoonMale, CartoonFemale, Others };

inline constexpr std::array<Category, 5> kAllCategories = {
    Category::Male, Category::Female, Category::CartoonMale, Category::CartoonFemale, Category::Others};

std::string to_string(Category c);
/// Accepts the canonical names ("CartoonMale") case-insensitively; throws DataError otherwise.
Category parse_category(const std::string& name);

enum class Split { Train, Test, Unassigned };

std::string to_string(Split s);
Split parse_split(const std::string& name);

/// One aligned (photo, drawing) sample. Rasters are loaded lazily from the paths.
struct ImagePair {
  std::string id;
  fs::path photo_path;
  fs::path drawing_path;
  Category category = Category::Others;
  Split split = Split::Unassigned;
};

struct ScanWarning {
  std::string id;
  std::string message;
};

struct DatasetManifest {
  std::vector<ImagePair> pairs;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  std::vector<ScanWarning> warnings;  // not persisted

  std::vector<const ImagePair*> subset(Split s) const;
  std::size_t count(Split s) const;
  std::map<Category, std::size_t> category_histogram() const;
};

/// Reads an `id,category` CSV. A header line is tolerated. Unknown ids are kept; the
/// caller decides what to do with them.
std::map<std::string, Category> read_category_map(const fs::path& csv);

/// Pairs files by identical stem across the two directories, sorted by id.
/// Files missing a counterpart are skipped and recorded in `warnings`; a size
/// mismatch between photo and drawing throws DataError naming the id.
DatasetManifest scan_pairs(const fs::path& photo_dir, const fs::path& drawing_dir,
                           const std::optional<fs::path>& category_map = std::nullopt);

/// Seeded uniform shuffle followed by a prefix split; |train| = floor(fraction * N).
DatasetManifest split_dataset(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed);

/// Number of training items for a given size and fraction, computed without
/// floating-point surprises for fractions given with few decimals.
std::size_t train_count(std::size_t n, double train_fraction);

void save_manifest(const DatasetManifest& manifest, const fs::path& path);
DatasetManifest load_manifest(const fs::path& path);

/// Model-ready tensors, each 3×S×S with values in [-1, 1].
struct NormalizedPair {
  torch::Tensor photo;
  torch::Tensor drawing;
  int size = 0;
};

/// Loads an image file as 8-bit RGB. Throws DataError when unreadable.
cv::Mat load_rgb(const fs::path& path);
void save_rgb_png(const cv::Mat& rgb, const fs::path& path);

/// Checks S >= 32 and S % 32 == 0; throws std::invalid_argument otherwise.
void validate_image_size(int size);

/// Bilinear resize of an 8-bit RGB raster to S×S.
cv::Mat resize_rgb(const cv::Mat& rgb, int size);

/// 8-bit RGB → float tensor 3×S×S, x ↦ x/127.5 − 1, resized bilinearly to S.
torch::Tensor normalize_image(const cv::Mat& rgb, int size);

NormalizedPair preprocess(const cv::Mat& photo_rgb, const cv::Mat& drawing_rgb, int size);
NormalizedPair preprocess(const ImagePair& pair, int size);

/// Tensor 3×H×W (or 1×3×H×W) in [-1, 1] → 8-bit RGB. Values are clipped first,
/// then mapped with x ↦ floor((x + 1)·127.5 + 0.5).
cv::Mat denormalize(const torch::Tensor& t);

/// Scalar form of the byte mapping used by denormalize.
std::uint8_t denormalize_value(double x);

}  // namespace p2ld
