#include "safnet/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "safnet/checkpoint.hpp"
#include "safnet/image_io.hpp"

namespace safnet {

namespace fs = std::filesystem;

namespace {

std::optional<fs::path> find_frame(const fs::path& dir, int i) {
  for (const char* ext : {".png", ".tif", ".tiff", ".PNG", ".TIF", ".TIFF"}) {
    const fs::path p = dir / ("input_" + std::to_string(i) + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

std::array<double, 3> read_exposures(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError(path.string() + ": missing exposures file");
  std::array<double, 3> e{};
  for (int i = 0; i < 3; ++i) {
    if (!(is >> e[i]) || !std::isfinite(e[i])) {
      throw LoadError(path.string() + ": expected three log2 exposure values");
    }
  }
  return e;
}

FlowField load_flow(const fs::path& path) {
  const TensorD t = io::read_pfm(path);
  if (t.c() < 2) throw LoadError(path.string() + ": flow file needs two channels");
  return {slice_channels(t, 0, 2)};
}

// Slack for HDR formats whose quantisation can overshoot 1 (RGBE rounds up to
// half a mantissa step).
constexpr double kGtOvershoot = 1.0 / 64;

struct Blob {
  double cx, cy, inv2s2;
  std::array<double, 3> amp;
};

// Continuous radiance field; evaluating it at shifted coordinates gives the
// exact translated views.
class Radiance {
 public:
  Radiance(const SynthOptions& opt) : texture_(opt.texture), h_(opt.height), w_(opt.width) {
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : tint_) v = 0.7 + 0.3 * u(rng);
    for (auto& p : phase_) p = 2 * std::numbers::pi * u(rng);
    period_[0] = 10 + 30 * u(rng);
    period_[1] = 10 + 30 * u(rng);
    const double size = std::min(h_, w_);
    const int count = 10;
    for (int i = 0; i < count; ++i) {
      Blob b;
      b.cx = (-0.1 + 1.2 * u(rng)) * w_;
      b.cy = (-0.1 + 1.2 * u(rng)) * h_;
      const double s = size * (0.04 + 0.16 * u(rng));
      b.inv2s2 = 1.0 / (2 * s * s);
      // Log-uniform peak strength spreads content across all exposures.
      const double peak = std::exp(std::log(0.01) + (std::log(1.5) - std::log(0.01)) * u(rng));
      for (auto& a : b.amp) a = peak * (0.6 + 0.4 * u(rng));
      blobs_.push_back(b);
    }
  }

  double operator()(int c, double x, double y) const {
    const double tex = 1.0 + 0.3 * std::sin(2 * std::numbers::pi * x / period_[0] + phase_[0]) *
                                 std::sin(2 * std::numbers::pi * y / period_[1] + phase_[1]);
    double raw = 0;
    if (texture_ == Texture::Gradient) {
      raw = 0.01 + 2.5 * std::pow(std::clamp((x + y) / double(w_ + h_), 0.0, 1.0), 2.0);
    } else {
      raw = 0.005 + 0.03 * std::clamp(x / w_, 0.0, 1.0);
      for (const Blob& b : blobs_) {
        const double dx = x - b.cx, dy = y - b.cy;
        raw += b.amp[c] * std::exp(-(dx * dx + dy * dy) * b.inv2s2);
      }
    }
    return 1.0 - std::exp(-raw * tex * tint_[c]);
  }

 private:
  Texture texture_;
  int h_, w_;
  std::array<double, 3> tint_{};
  std::array<double, 2> phase_{};
  std::array<double, 2> period_{};
  std::vector<Blob> blobs_;
};

}  // namespace

void Scene::validate() const {
  for (int i = 0; i < 3; ++i) {
    try {
      ldr[i].validate();
    } catch (const Error& e) {
      throw LoadError(id + ": frame " + std::to_string(i + 1) + ": " + e.what());
    }
    if (ldr[i].pixels.shape() != ldr[1].pixels.shape()) {
      throw LoadError(id + ": frame sizes differ (" + ldr[i].pixels.shape().str() + " vs " +
                      ldr[1].pixels.shape().str() + ")");
    }
  }
  if (!(exposures_log2[0] < exposures_log2[1] && exposures_log2[1] < exposures_log2[2])) {
    throw LoadError(id + ": exposures must be strictly increasing");
  }
  if (gt) {
    if (gt->pixels.shape() != ldr[1].pixels.shape()) {
      throw LoadError(id + ": ground truth size " + gt->pixels.shape().str() +
                      " differs from the frames");
    }
    for (double v : gt->pixels.values()) {
      if (!(v >= 0.0 && v <= 1.0)) throw LoadError(id + ": ground truth outside [0, 1]");
    }
  }
  if (gt_flows) {
    for (const auto& f : *gt_flows) {
      if (f.height() != height() || f.width() != width()) {
        throw LoadError(id + ": flow size differs from the frames");
      }
    }
  }
}

Scene load_scene(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw LoadError(dir.string() + ": not a scene directory");
  Scene s;
  s.id = dir.filename().string();
  if (s.id.empty()) s.id = dir.parent_path().filename().string();
  s.exposures_log2 = read_exposures(dir / "exposures.txt");
  for (int i = 0; i < 3; ++i) {
    const auto p = find_frame(dir, i + 1);
    if (!p) {
      throw LoadError((dir / ("input_" + std::to_string(i + 1) + ".png")).string() +
                      ": missing input frame");
    }
    s.ldr[i] = LdrImage{io::read_ldr(*p), std::exp2(s.exposures_log2[i])};
  }
  for (const char* name : {"gt.hdr", "gt.pfm"}) {
    if (fs::exists(dir / name)) {
      LinearImage gt = load_hdr(dir / name);
      for (double& v : gt.pixels.values()) {
        if (v > 1.0 && v <= 1.0 + kGtOvershoot) v = 1.0;
      }
      s.gt = std::move(gt);
      break;
    }
  }
  if (fs::exists(dir / "flow_21.pfm") && fs::exists(dir / "flow_23.pfm")) {
    s.gt_flows = std::array<FlowField, 2>{load_flow(dir / "flow_21.pfm"),
                                          load_flow(dir / "flow_23.pfm")};
  }
  s.validate();
  return s;
}

HdrFormat parse_hdr_format(const std::string& name) {
  if (name == "hdr" || name == "radiance") return HdrFormat::Radiance;
  if (name == "pfm") return HdrFormat::Pfm;
  throw ConfigError("unknown HDR format '" + name + "' (expected hdr or pfm)");
}

const char* extension(HdrFormat format) {
  return format == HdrFormat::Pfm ? ".pfm" : ".hdr";
}

void save_hdr(const LinearImage& image, const fs::path& path, HdrFormat format) {
  for (double v : image.pixels.values()) {
    if (!std::isfinite(v) || v < 0) {
      throw ContractError(path.string() + ": HDR image must be finite and nonnegative");
    }
  }
  if (format == HdrFormat::Pfm) {
    io::write_pfm(path, image.pixels);
  } else {
    io::write_rgbe(path, image.pixels);
  }
}

LinearImage load_hdr(const fs::path& path) {
  TensorD t = io::read_hdr_image(path);
  if (t.c() != 3) throw LoadError(path.string() + ": HDR image must have three channels");
  return {std::move(t)};
}

void write_scene(const Scene& scene, const fs::path& dir, HdrFormat gt_format) {
  fs::create_directories(dir);
  for (int i = 0; i < 3; ++i) {
    io::write_png(dir / ("input_" + std::to_string(i + 1) + ".png"), scene.ldr[i].pixels, 16);
  }
  write_atomically(dir / "exposures.txt", [&](std::ostream& os) {
    os.precision(17);
    for (double e : scene.exposures_log2) os << e << '\n';
  });
  if (scene.gt) save_hdr(*scene.gt, dir / (std::string("gt") + extension(gt_format)), gt_format);
  if (scene.gt_flows) {
    io::write_pfm(dir / "flow_21.pfm", (*scene.gt_flows)[0].uv);
    io::write_pfm(dir / "flow_23.pfm", (*scene.gt_flows)[1].uv);
  }
}

Texture parse_texture(const std::string& name) {
  if (name == "gradient") return Texture::Gradient;
  if (name == "blobs") return Texture::Blobs;
  throw ConfigError("unknown texture '" + name + "' (expected gradient or blobs)");
}

Scene synth_scene(const SynthOptions& opt) {
  if (opt.height < 16 || opt.width < 16) {
    throw ContractError("synthetic scene must be at least 16x16");
  }
  if (std::abs(opt.dx) * 2 >= opt.width || std::abs(opt.dy) * 2 >= opt.height) {
    throw ContractError("motion too large: frames would not overlap");
  }
  const auto& e = opt.exposures_log2;
  if (!(e[0] < e[1] && e[1] < e[2])) throw ContractError("exposures must be strictly increasing");

  const Radiance f(opt);
  const int h = opt.height, w = opt.width;
  Scene s;
  s.id = "synth_" + std::to_string(opt.seed);
  s.exposures_log2 = e;
  TensorD gt({1, 3, h, w});
  std::array<TensorD, 3> radiance{TensorD({1, 3, h, w}), TensorD({1, 3, h, w}),
                                  TensorD({1, 3, h, w})};
  const double shift[3] = {1.0, 0.0, -1.0};
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        gt.at(0, c, y, x) = f(c, x, y);
        for (int i = 0; i < 3; ++i) {
          radiance[i].at(0, c, y, x) =
              i == 1 ? gt.at(0, c, y, x) : f(c, x + shift[i] * opt.dx, y + shift[i] * opt.dy);
        }
      }
    }
  }
  std::array<TensorD, 3> clips;
  for (int i = 0; i < 3; ++i) {
    const double t = std::exp2(e[i]);
    s.ldr[i] = linear_to_ldr(LinearImage{radiance[i]}, t, opt.gamma);
    clips[i] = TensorD({1, 1, h, w});
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        bool clipped = false;
        for (int c = 0; c < 3; ++c) clipped |= radiance[i].at(0, c, y, x) * t >= 1.0;
        clips[i].at(0, 0, y, x) = clipped ? 1.0 : 0.0;
      }
    }
  }
  s.gt = LinearImage{std::move(gt)};
  s.gt_flows = std::array<FlowField, 2>{FlowField::constant(h, w, -opt.dx, -opt.dy),
                                        FlowField::constant(h, w, opt.dx, opt.dy)};
  s.clip_masks = std::move(clips);
  return s;
}

double saturation_ratio(const LdrImage& l2, double thresh) {
  const Shape s = l2.pixels.shape();
  if (s.plane() == 0) return 0;
  std::size_t count = 0;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      double m = 0;
      for (int c = 0; c < s.c; ++c) m = std::max(m, l2.pixels.at(0, c, y, x));
      count += m >= thresh;
    }
  }
  return static_cast<double>(count) / static_cast<double>(s.plane());
}

double motion_magnitude(const FlowField& flow) {
  const std::size_t n = flow.uv.shape().plane();
  if (n == 0) return 0;
  const double* u = flow.uv.plane(0, 0);
  const double* v = flow.uv.plane(0, 1);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::hypot(u[i], v[i]);
  return acc / static_cast<double>(n);
}

std::vector<fs::path> list_scenes(const fs::path& root) {
  if (!fs::is_directory(root)) throw LoadError(root.string() + ": not a directory");
  if (fs::exists(root / "exposures.txt")) return {root};
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "exposures.txt")) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SceneStats> dataset_stats(const fs::path& root,
                                      const std::optional<fs::path>& flow_root,
                                      double thresh) {
  std::vector<SceneStats> rows;
  for (const fs::path& dir : list_scenes(root)) {
    const Scene scene = load_scene(dir);
    SceneStats row{scene.id, {}};
    row.stats.saturation_ratio = saturation_ratio(scene.ldr[1], thresh);
    const fs::path flow_dir = flow_root ? *flow_root / scene.id : dir;
    const fs::path f21 = flow_dir / "flow_21.pfm", f23 = flow_dir / "flow_23.pfm";
    if (fs::exists(f21) && fs::exists(f23)) {
      row.stats.motion_magnitude =
          0.5 * (motion_magnitude(load_flow(f21)) + motion_magnitude(load_flow(f23)));
    } else {
      row.stats.motion_magnitude = std::nan("");
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(),
            [](const SceneStats& a, const SceneStats& b) { return a.scene_id < b.scene_id; });
  return rows;
}

}  // namespace safnet
