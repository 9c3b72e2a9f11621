#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "skyrm/unet.hpp"

namespace skyrm {

struct TrainingMeta {
  int epoch = 0;
  double best_val_mcc = 0.0;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainingMeta&, const TrainingMeta&) = default;
};

struct Checkpoint {
  UNetConfig config;
  UNetParams<float> params;
  TrainingMeta meta;
};

enum class CheckpointErrorKind { io, bad_magic, version_mismatch, truncated, crc_mismatch, shape_mismatch, malformed };

const char* to_string(CheckpointErrorKind kind);

class CheckpointError : public DataError {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& detail)
      : DataError(std::string(to_string(kind)) + ": " + detail), kind_(kind), detail_(detail) {}
  CheckpointErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  CheckpointErrorKind kind_;
  std::string detail_;
};

inline constexpr char kCheckpointMagic[4] = {'S', 'K', 'R', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian):
//   "SKRM" | u32 version | u32 len + UTF-8 config record (key=value lines)
//   | u32 tensor count | per tensor: u32 len + name, u32 rank, u32 dims[rank],
//   f32 payload | u32 CRC32 of everything before it.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);

/// Parses a checkpoint image. When `expected` is given, the stored tensors must
/// match that config's layout; otherwise they must match the embedded config.
/// Nothing is returned unless the whole image validates.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const UNetConfig* expected = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected = nullptr);

/// The key=value record stored in the checkpoint header.
std::string config_record(const UNetConfig& config, const TrainingMeta& meta);

}  // namespace skyrm
