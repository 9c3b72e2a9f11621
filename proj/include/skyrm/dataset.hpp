#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "skyrm/image.hpp"

namespace skyrm {

struct Sample {
  Image image;
  ClassMask mask;
  std::string source_id;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Samples sharing one class count. Masks of a 3-class set may be viewed as
/// 2-class by folding defects into background.
struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 3;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
};

/// Throws DataError if any image/mask pair differs in dims or any mask holds a
/// class index >= num_classes.
void validate_dataset(const Dataset& data, const std::string& what);

/// Defect pixels become background.
ClassMask to_two_class(const ClassMask& mask);
Dataset to_two_class(const Dataset& data);

struct SplitSummary {
  std::size_t images = 0;
  std::size_t sources = 0;
  double skyrmion_fraction = 0.0;
  std::size_t skyrmion_instances = 0;  // 8-connected
  std::vector<std::string> warnings;
};

/// Sources are the stem of source_id up to its last '_' (the whole id if
/// there is none), so frames of one video group together.
SplitSummary split_summary(const Dataset& data);

/// `<dir>/images/<id>.png` and `<dir>/masks/<id>.png`.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);

/// Loads `<dir>/images/*.{pgm,png}` with masks of matching stem from
/// `<dir>/masks/`, sorted by stem. Mask files may hold defects even when
/// num_classes is 2 if collapse_defects is set; they then become background.
Dataset load_dataset(const std::filesystem::path& dir, int num_classes, bool collapse_defects = true);

/// Image files in a directory (no masks needed), sorted by stem.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace skyrm
