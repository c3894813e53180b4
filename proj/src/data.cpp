#include "p2ld/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "p2ld/util.hpp"

namespace p2ld {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool is_image_file(const fs::path& p) {
  static const std::set<std::string> exts = {".png", ".jpg", ".jpeg"};
  return fs::is_regular_file(p) && exts.count(lower(p.extension().string())) > 0;
}

std::map<std::string, fs::path> images_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!is_image_file(entry.path())) continue;
    const auto stem = entry.path().stem().string();
    auto [it, inserted] = out.emplace(stem, entry.path());
    // Two files with the same stem (a.png, a.jpg): keep the lexicographically first.
    if (!inserted && entry.path() < it->second) it->second = entry.path();
  }
  return out;
}

cv::Size image_size(const fs::path& p) {
  const cv::Mat m = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("unreadable image: " + p.string());
  return m.size();
}

}  // namespace

std::string to_string(Category c) {
  switch (c) {
    case Category::Male: return "Male";
    case Category::Female: return "Female";
    case Category::CartoonMale: return "CartoonMale";
    case Category::CartoonFemale: return "CartoonFemale";
    case Category::Others: return "Others";
  }
  return "Others";
}

Category parse_category(const std::string& name) {
  const auto key = lower(trim(name));
  for (auto c : kAllCategories)
    if (lower(to_string(c)) == key) return c;
  throw DataError("unknown category '" + name + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

Split parse_split(const std::string& name) {
  const auto key = lower(trim(name));
  if (key == "train") return Split::Train;
  if (key == "test") return Split::Test;
  if (key == "unassigned" || key.empty()) return Split::Unassigned;
  throw DataError("unknown split '" + name + "'");
}

std::vector<const ImagePair*> DatasetManifest::subset(Split s) const {
  std::vector<const ImagePair*> out;
  for (const auto& p : pairs)
    if (p.split == s) out.push_back(&p);
  return out;
}

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(
      std::count_if(pairs.begin(), pairs.end(), [s](const ImagePair& p) { return p.split == s; }));
}

std::map<Category, std::size_t> DatasetManifest::category_histogram() const {
  std::map<Category, std::size_t> h;
  for (auto c : kAllCategories) h[c] = 0;
  for (const auto& p : pairs) ++h[p.category];
  return h;
}

std::map<std::string, Category> read_category_map(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw DataError("cannot open category map: " + csv.string());
  std::map<std::string, Category> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw DataError(csv.string() + ":" + std::to_string(lineno) + ": expected 'id,category'");
    const auto id = trim(line.substr(0, comma));
    const auto cat = trim(line.substr(comma + 1));
    if (lineno == 1 && lower(id) == "id" && lower(cat) == "category") continue;
    out[id] = parse_category(cat);
  }
  return out;
}

DatasetManifest scan_pairs(const fs::path& photo_dir, const fs::path& drawing_dir,
                           const std::optional<fs::path>& category_map) {
  const auto photos = images_by_stem(photo_dir);
  const auto drawings = images_by_stem(drawing_dir);
  std::map<std::string, Category> categories;
  if (category_map) categories = read_category_map(*category_map);

  DatasetManifest manifest;
  for (const auto& [id, photo] : photos) {
    const auto d = drawings.find(id);
    if (d == drawings.end()) {
      manifest.warnings.push_back({id, "photo has no matching drawing; skipped"});
      continue;
    }
    const auto ps = image_size(photo);
    const auto ds = image_size(d->second);
    if (ps != ds) {
      std::ostringstream msg;
      msg << "dimension mismatch for '" << id << "': photo " << ps.width << "x" << ps.height << ", drawing "
          << ds.width << "x" << ds.height;
      throw DataError(msg.str());
    }
    ImagePair pair{id, photo, d->second, Category::Others, Split::Unassigned};
    if (auto c = categories.find(id); c != categories.end()) pair.category = c->second;
    manifest.pairs.push_back(std::move(pair));
  }
  for (const auto& [id, drawing] : drawings)
    if (!photos.count(id)) manifest.warnings.push_back({id, "drawing has no matching photo; skipped"});
  std::sort(manifest.warnings.begin(), manifest.warnings.end(),
            [](const ScanWarning& a, const ScanWarning& b) { return a.id < b.id; });
  return manifest;
}

std::size_t train_count(std::size_t n, double train_fraction) {
  // Small epsilon so that e.g. 0.7 * 10 counts as 7 despite 0.7 not being exact.
  return static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 1e-9));
}

DatasetManifest split_dataset(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("train_fraction must lie in (0, 1)");
  if (manifest.pairs.empty()) throw DataError("empty manifest");

  DatasetManifest out = manifest;
  out.seed = seed;
  out.train_fraction = train_fraction;

  std::vector<std::size_t> order(out.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  shuffle_indices(order, rng);

  const auto n_train = train_count(order.size(), train_fraction);
  for (std::size_t k = 0; k < order.size(); ++k)
    out.pairs[order[k]].split = k < n_train ? Split::Train : Split::Test;
  return out;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  nlohmann::json j;
  j["seed"] = manifest.seed;
  j["train_fraction"] = manifest.train_fraction;
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : manifest.pairs) {
    j["pairs"].push_back({{"id", p.id},
                          {"photo_path", p.photo_path.string()},
                          {"drawing_path", p.drawing_path.string()},
                          {"category", to_string(p.category)},
                          {"split", to_string(p.split)}});
  }
  write_text_atomic(path, j.dump(2) + "\n");
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.seed = j.value("seed", std::uint64_t{0});
    m.train_fraction = j.value("train_fraction", 0.7);
    for (const auto& p : j.at("pairs")) {
      m.pairs.push_back({p.at("id").get<std::string>(), p.at("photo_path").get<std::string>(),
                         p.at("drawing_path").get<std::string>(),
                         parse_category(p.value("category", std::string("Others"))),
                         parse_split(p.value("split", std::string("unassigned")))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

cv::Mat load_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("unreadable image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

void save_rgb_png(const cv::Mat& rgb, const fs::path& path) {
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image: " + path.string());
}

void validate_image_size(int size) {
  if (size < 32 || size % 32 != 0)
    throw std::invalid_argument("image size must be a positive multiple of 32 (got " + std::to_string(size) + ")");
}

cv::Mat resize_rgb(const cv::Mat& rgb, int size) {
  if (rgb.type() != CV_8UC3) throw DataError("expected an 8-bit RGB raster");
  if (rgb.rows == size && rgb.cols == size) return rgb.clone();
  cv::Mat out;
  cv::resize(rgb, out, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  return out;
}

torch::Tensor normalize_image(const cv::Mat& rgb, int size) {
  validate_image_size(size);
  cv::Mat resized = resize_rgb(rgb, size);
  auto t = torch::from_blob(resized.data, {size, size, 3}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32)
               .contiguous();
  return t / 127.5 - 1.0;
}

NormalizedPair preprocess(const cv::Mat& photo_rgb, const cv::Mat& drawing_rgb, int size) {
  validate_image_size(size);
  if (photo_rgb.size() != drawing_rgb.size()) throw DataError("photo and drawing sizes differ");
  return {normalize_image(photo_rgb, size), normalize_image(drawing_rgb, size), size};
}

NormalizedPair preprocess(const ImagePair& pair, int size) {
  validate_image_size(size);
  const auto photo = load_rgb(pair.photo_path);
  const auto drawing = load_rgb(pair.drawing_path);
  if (photo.size() != drawing.size()) throw DataError("dimension mismatch for '" + pair.id + "'");
  return preprocess(photo, drawing, size);
}

std::uint8_t denormalize_value(double x) {
  x = std::clamp(x, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::min(255.0, std::floor((x + 1.0) * 127.5 + 0.5)));
}

cv::Mat denormalize(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kCPU).to(torch::kFloat64);
  if (x.dim() == 4) {
    TORCH_CHECK(x.size(0) == 1, "denormalize expects a single image");
    x = x.squeeze(0);
  }
  TORCH_CHECK(x.dim() == 3 && x.size(0) == 3, "denormalize expects a 3×H×W tensor");
  x = torch::floor((x.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).clamp(0, 255);
  auto bytes = x.to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  const int h = static_cast<int>(bytes.size(0));
  const int w = static_cast<int>(bytes.size(1));
  cv::Mat out(h, w, CV_8UC3);
  std::memcpy(out.data, bytes.data_ptr<std::uint8_t>(), static_cast<std::size_t>(h) * w * 3);
  return out;
}

}  // namespace p2ld
