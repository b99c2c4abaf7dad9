#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "safnet/model.hpp"

namespace safnet {

// Checkpoint archive layout (all integers little-endian):
//   8 bytes   magic "SAFNETCK"
//   u32       format version
//   u64       metadata length M
//   M bytes   UTF-8 JSON: {"format": "safnet-checkpoint", "version": 1,
//             "config": {...}, "extra": {...},
//             "arrays": [{"name": ..., "shape": [n, c, h, w]}, ...]}
//   then every array's float64 payload in "arrays" order.
inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'F', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Archive {
  std::string config_json;   // ModelConfig::to_json()
  std::string extra_json = "{}";  // free-form object (training state)
  std::vector<std::pair<std::string, TensorD>> arrays;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

template <typename T>
void save_model(const std::filesystem::path& path, const ModelConfig& cfg,
                const Weights<T>& weights);

// Reads a checkpoint written by save_model or the trainer; optimizer state
// arrays are ignored.
template <typename T>
SafNet<T> load_model(const std::filesystem::path& path);

// Writes through a sibling temporary file and renames it into place, so a
// failed write never leaves a partial file at `path`.
void write_atomically(const std::filesystem::path& path,
                      const std::function<void(std::ostream&)>& writer);

}  // namespace safnet
