#include "skyrm/dataset.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "skyrm/image_io.hpp"
#include "skyrm/metrics.hpp"

namespace skyrm {

void validate_dataset(const Dataset& data, const std::string& what) {
  if (data.num_classes < 2 || data.num_classes > 3)
    throw ConfigError(what + ": num_classes must be 2 or 3, got " + std::to_string(data.num_classes));
  for (const auto& s : data.samples) {
    if (!s.image.same_dims(s.mask))
      throw DataError(what + ": sample '" + s.source_id + "' image is " + dims_str(s.image.h, s.image.w) +
                      " but mask is " + dims_str(s.mask.h, s.mask.w));
    for (std::uint8_t v : s.mask.data)
      if (v >= data.num_classes)
        throw DataError(what + ": sample '" + s.source_id + "' has class " + std::to_string(v) + " but the set has " +
                        std::to_string(data.num_classes) + " classes");
  }
}

ClassMask to_two_class(const ClassMask& mask) {
  ClassMask out = mask;
  for (auto& v : out.data)
    if (v == kDefect) v = kBackground;
  return out;
}

Dataset to_two_class(const Dataset& data) {
  Dataset out = data;
  out.num_classes = 2;
  for (auto& s : out.samples) s.mask = to_two_class(s.mask);
  return out;
}

SplitSummary split_summary(const Dataset& data) {
  SplitSummary sum;
  sum.images = data.size();
  if (data.empty()) {
    sum.warnings.push_back("empty split");
    return sum;
  }
  std::set<std::string> sources;
  std::uint64_t positive = 0, total = 0;
  for (const auto& s : data.samples) {
    const auto cut = s.source_id.rfind('_');
    sources.insert(cut == std::string::npos ? s.source_id : s.source_id.substr(0, cut));
    positive += static_cast<std::uint64_t>(std::count(s.mask.data.begin(), s.mask.data.end(), kSkyrmion));
    total += s.mask.size();
    sum.skyrmion_instances += connected_components(s.mask, kSkyrmion).size();
  }
  sum.sources = sources.size();
  sum.skyrmion_fraction = total ? static_cast<double>(positive) / static_cast<double>(total) : 0.0;
  return sum;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  for (const auto& s : data.samples) {
    save_image(dir / "images" / (s.source_id + ".png"), s.image);
    save_mask(dir / "masks" / (s.source_id + ".png"), s.mask);
  }
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  std::map<std::string, std::filesystem::path> by_stem;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext != ".png" && ext != ".pgm") continue;
    const std::string stem = entry.path().stem().string();
    if (by_stem.contains(stem))
      throw DataError("'" + dir.string() + "': two images share the stem '" + stem + "'");
    by_stem.emplace(stem, entry.path());
  }
  std::vector<std::filesystem::path> out;
  for (auto& [stem, path] : by_stem) out.push_back(path);
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir, int num_classes, bool collapse_defects) {
  Dataset data;
  data.num_classes = num_classes;
  const auto mask_dir = dir / "masks";
  for (const auto& img_path : list_images(dir / "images")) {
    const std::string stem = img_path.stem().string();
    std::filesystem::path mask_path = mask_dir / (stem + ".png");
    if (!std::filesystem::exists(mask_path)) mask_path = mask_dir / (stem + ".pgm");
    if (!std::filesystem::exists(mask_path))
      throw DataError("'" + img_path.string() + "' has no mask in '" + mask_dir.string() + "'");
    Sample s{load_image(img_path), load_mask(mask_path, collapse_defects ? 3 : num_classes), stem};
    if (num_classes == 2) s.mask = to_two_class(s.mask);
    if (!s.image.same_dims(s.mask))
      throw DataError("'" + img_path.string() + "' is " + dims_str(s.image.h, s.image.w) + " but '" +
                      mask_path.string() + "' is " + dims_str(s.mask.h, s.mask.w));
    data.samples.push_back(std::move(s));
  }
  if (data.empty()) throw DataError("'" + (dir / "images").string() + "' contains no images");
  return data;
}

}  // namespace skyrm
