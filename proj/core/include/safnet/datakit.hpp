#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "safnet/image.hpp"
#include "safnet/radiometry.hpp"

// Scene directories, HDR files, synthetic oracle scenes and dataset
// statistics.
//
// Scene directory layout:
//   input_1.png|.tif  input_2.*  input_3.*   8/16-bit LDR frames, short to long
//   exposures.txt                            three log2 exposures, one per line
//   gt.hdr | gt.pfm                          optional linear ground truth
//   flow_21.pfm  flow_23.pfm                 optional reference->frame flows
namespace safnet {

struct Scene {
  std::string id;
  std::array<LdrImage, 3> ldr;
  std::array<double, 3> exposures_log2{};
  std::optional<LinearImage> gt;
  // Flows from the reference grid into frames 1 and 3.
  std::optional<std::array<FlowField, 2>> gt_flows;
  // Synthetic scenes only: 1 where any channel of frame i saturated.
  std::optional<std::array<TensorD, 3>> clip_masks;

  int height() const { return ldr[1].height(); }
  int width() const { return ldr[1].width(); }
  // Throws LoadError describing the first broken invariant.
  void validate() const;
};

Scene load_scene(const std::filesystem::path& dir);

enum class HdrFormat { Radiance, Pfm };

HdrFormat parse_hdr_format(const std::string& name);  // "hdr" | "pfm"
const char* extension(HdrFormat format);              // ".hdr" | ".pfm"

void save_hdr(const LinearImage& image, const std::filesystem::path& path, HdrFormat format);
LinearImage load_hdr(const std::filesystem::path& path);

// Writes a scene in the directory layout above: 16-bit PNG frames, the
// ground truth in `gt_format`, and flow PFMs when present.
void write_scene(const Scene& scene, const std::filesystem::path& dir,
                 HdrFormat gt_format = HdrFormat::Pfm);

enum class Texture { Gradient, Blobs };

Texture parse_texture(const std::string& name);

struct SynthOptions {
  std::uint64_t seed = 0;
  int height = 512;
  int width = 512;
  double dx = 0;  // frame 1 shows the scene shifted by -motion, frame 3 by +motion
  double dy = 0;
  std::array<double, 3> exposures_log2{0, 2, 4};
  Texture texture = Texture::Blobs;
  double gamma = kDefaultGamma;
};

// Smooth radiance field H in [0, 1); frame 1 samples it at q + d, frame 3 at
// q - d, so gt_flows are (-dx, -dy) and (+dx, +dy). LDR values are not
// quantised.
Scene synth_scene(const SynthOptions& opt);

inline constexpr double kSaturationThreshold = 0.95;

// Fraction of pixels whose max over RGB is >= thresh.
double saturation_ratio(const LdrImage& l2, double thresh = kSaturationThreshold);

// Mean Euclidean displacement length in pixels.
double motion_magnitude(const FlowField& flow);

struct DatasetStats {
  double motion_magnitude = 0;  // NaN when no flow is available
  double saturation_ratio = 0;
};

struct SceneStats {
  std::string scene_id;
  DatasetStats stats;
};

// Per-scene statistics; motion averages both flow files of a scene, taken
// from `flow_root/<scene_id>/` when given, else from the scene directory.
// Rows are sorted by scene id.
std::vector<SceneStats> dataset_stats(const std::filesystem::path& root,
                                      const std::optional<std::filesystem::path>& flow_root,
                                      double thresh = kSaturationThreshold);

// Scene subdirectories of root (those holding exposures.txt), sorted.
std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& root);

}  // namespace safnet
