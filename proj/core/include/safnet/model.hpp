#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "safnet/autograd.hpp"
#include "safnet/image.hpp"
#include "safnet/radiometry.hpp"

namespace safnet {

enum class Variant { SafNet, SafNetS };
enum class RefineBlock { Residual, Plain };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);  // "safnet" | "safnet-s"

struct ModelConfig {
  int enc_channels = 40;
  int dec_channels = 120;
  int dec_groups = 3;
  int levels = 4;
  int refine_channels = 80;
  RefineBlock refine_blocks = RefineBlock::Residual;
  std::vector<int> refine_dilations{1, 2, 4, 2, 1};
  // Flow and masks are estimated at half the input resolution and upsampled.
  bool half_res_io = true;
  double gamma = kDefaultGamma;
  double mu = kDefaultMu;

  static ModelConfig for_variant(Variant v);
  Variant variant() const;
  // Throws ConfigError when the architecture constraints are violated.
  void validate() const;
  // Spatial extents must be multiples of this for the eval path.
  int divisor() const;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);

  bool operator==(const ModelConfig&) const = default;
};

enum class ParamKind { ConvWeight, DeconvWeight, Bias, PreluSlope };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

// Every learnable tensor of the network, in a fixed order. The decoder
// appears once: the same tensors serve all pyramid levels.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);

// Named parameter collection, ordered as parameter_layout().
template <typename T>
class Weights {
 public:
  // He fan-in normal conv weights, zero biases, PReLU slope 0.25.
  static Weights init(const ModelConfig& cfg, std::uint64_t seed);
  // All conv/deconv weights and biases zero; PReLU slopes 0.25.
  static Weights zeros(const ModelConfig& cfg);
  // Builds from named tensors; every layout entry must be present with the
  // right shape.
  static Weights from_tensors(
      const ModelConfig& cfg,
      const std::vector<std::pair<std::string, TensorD>>& tensors);

  const ag::Var<T>& get(const std::string& name) const;
  ag::Var<T>& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, ag::Var<T>>>& entries() const {
    return params_;
  }
  std::vector<std::pair<std::string, ag::Var<T>>>& entries() { return params_; }

  std::size_t parameter_count() const;
  std::size_t parameter_count(std::string_view prefix) const;

  // Deep copy (fresh nodes, no shared storage).
  Weights clone() const;
  template <typename U>
  Weights<U> cast() const;
  std::vector<std::pair<std::string, TensorD>> to_tensors() const;

  void zero_grads();
  void set_requires_grad(bool on);

 private:
  void add(std::string name, Tensor<T> value);

  std::vector<std::pair<std::string, ag::Var<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;

  template <typename>
  friend class Weights;
};

// phi[k-1] holds level k (k = 1..levels) at 1/2^k of the encoder input.
template <typename T>
struct FeaturePyramid {
  std::vector<ag::Var<T>> levels;
};

template <typename T>
struct DecoderState {
  ag::Var<T> flow21;  // N x 2 x h x w
  ag::Var<T> flow23;
  ag::Var<T> mask1;   // N x 1 x h x w
  ag::Var<T> mask3;
  int level = 0;

  // All-zero state entering the coarsest level.
  static DecoderState initial(int batch, int height, int width, int level);
};

// Network inputs for a batch of exposure triplets.
template <typename T>
struct FrameBatch {
  std::array<ag::Var<T>, 3> ldr;     // N x 3 x H x W display values
  std::array<ag::Var<T>, 3> linear;  // N x 3 x H x W radiance
  std::array<ag::Var<T>, 3> input;   // N x 6 x H x W, [ldr, linear]
  Tensor<T> coefficients;            // initial fusion coefficients from ldr[1]

  // exposures[i][n] is the exposure time of frame i for batch item n.
  static FrameBatch make(const std::array<Tensor<T>, 3>& ldr,
                         const std::array<std::vector<double>, 3>& exposures,
                         double gamma);
  int batch() const { return ldr[0].shape().n; }
  int height() const { return ldr[0].shape().h; }
  int width() const { return ldr[0].shape().w; }
};

template <typename T>
struct FlowMaskOutput {
  ag::Var<T> flow21;
  ag::Var<T> flow23;
  ag::Var<T> mask1;
  ag::Var<T> mask3;
};

template <typename T>
struct NetworkOutput {
  ag::Var<T> flow21;
  ag::Var<T> flow23;
  ag::Var<T> mask1;
  ag::Var<T> mask3;
  ag::Var<T> merged;   // H_m
  ag::Var<T> refined;  // H_r
};

template <typename T>
class SafNet {
 public:
  SafNet(ModelConfig cfg, Weights<T> weights);

  const ModelConfig& config() const { return cfg_; }
  const Weights<T>& weights() const { return weights_; }
  Weights<T>& weights() { return weights_; }

  // Shared encoder; x: N x 6 x H x W with H, W divisible by 2^levels.
  FeaturePyramid<T> encode(const ag::Var<T>& x) const;

  // One application of the shared decoder at state.level, emitting the state
  // for level - 1 at twice the resolution.
  DecoderState<T> decode_step(const DecoderState<T>& state, const ag::Var<T>& phi1,
                              const ag::Var<T>& phi2, const ag::Var<T>& phi3) const;

  // Coarse-to-fine loop over all levels; outputs at the encoder input size.
  FlowMaskOutput<T> run_decoder(const FeaturePyramid<T>& p1,
                                const FeaturePyramid<T>& p2,
                                const FeaturePyramid<T>& p3) const;

  // Flow, masks and merged HDR at the batch resolution.
  NetworkOutput<T> stage1(const FrameBatch<T>& batch) const;

  // Residual detail network; all inputs at the same resolution.
  ag::Var<T> refine(const std::array<ag::Var<T>, 3>& inputs, const ag::Var<T>& flow21,
                    const ag::Var<T>& flow23, const ag::Var<T>& mask1,
                    const ag::Var<T>& mask3, const ag::Var<T>& merged) const;

  // Inference path: stage 1 and refiner on the whole frame.
  NetworkOutput<T> forward(const FrameBatch<T>& batch) const;

  // Training path: stage 1 on the whole crop, refiner on window x window
  // tiles moved to the batch dimension, then reassembled. With `detach` the
  // refiner sees stage-1 outputs without gradient flow back into them.
  NetworkOutput<T> forward_windowed(const FrameBatch<T>& batch, int window,
                                    bool detach = false) const;

 private:
  ag::Var<T> conv(const std::string& name, const ag::Var<T>& x, int stride, int pad,
                  int dilation, int groups) const;
  ag::Var<T> conv_prelu(const std::string& name, const ag::Var<T>& x, int stride,
                        int pad = 1, int dilation = 1, int groups = 1) const;

  ModelConfig cfg_;
  Weights<T> weights_;
};

// Single-scene inference result at the input resolution.
struct FusionResult {
  FlowField flow21;
  FlowField flow23;
  SelectionMask mask1;
  SelectionMask mask3;
  LinearImage merged;
  LinearImage refined;
};

// End-to-end inference on one exposure triplet (under, reference, over).
// Inputs whose size is not a multiple of cfg.divisor() are reflect-padded
// and the outputs cropped back.
template <typename T>
FusionResult forward_full(const LdrImage& l1, const LdrImage& l2, const LdrImage& l3,
                          const SafNet<T>& net);

// Reflect-pads (mirror without edge repeat) bottom/right to the given extent.
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int height, int width);

}  // namespace safnet
