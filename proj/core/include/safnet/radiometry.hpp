#pragma once

#include <span>

#include "safnet/autograd.hpp"
#include "safnet/image.hpp"

// Pointwise radiometric math: display <-> linear conversion, mu-law range
// compression, fusion coefficients and the explicit HDR merge.
namespace safnet {

inline constexpr double kDefaultGamma = 2.2;
inline constexpr double kDefaultMu = 5000.0;

// Initial per-pixel fusion coefficients for the under (1), reference (2) and
// over (3) exposed frames. Each is 1 x 1 x H x W; lam1 + lam2 + lam3 == 1.
struct FusionCoefficients {
  TensorD lam1;
  TensorD lam2;
  TensorD lam3;
};

// Coefficients after selection-mask reweighting; still sum to one.
struct FusionWeights {
  TensorD w1;
  TensorD w2;
  TensorD w3;
};

// pixels^gamma / t. Throws InvalidExposure for t <= 0.
LinearImage ldr_to_linear(const LdrImage& ldr, double gamma = kDefaultGamma);

// clamp(h * t, 0, 1)^(1/gamma).
LdrImage linear_to_ldr(const LinearImage& hdr, double exposure,
                       double gamma = kDefaultGamma);

// log(1 + mu * clamp(h, 0, 1)) / log(1 + mu), elementwise.
TensorD tonemap_mu(const TensorD& hdr, double mu = kDefaultMu);

// Piecewise-linear coefficients from the reference frame's per-pixel
// max-over-RGB value y: lam1 = max(0, 2y - 1), lam3 = max(0, 1 - 2y).
FusionCoefficients initial_coefficients(const LdrImage& reference);

// W1 = L1*M1, W3 = L3*M3, W2 = L2 + L1*(1 - M1) + L3*(1 - M3).
// Throws ContractError for mask values outside [0, 1].
FusionWeights reweight_coefficients(const FusionCoefficients& lam,
                                    const SelectionMask& m1,
                                    const SelectionMask& m3);

// W1*H1 + W2*H2 + W3*H3 for weights that sum to one. Evaluated as
// H2 + W1*(H1 - H2) + W3*(H3 - H2) so that zero masks return H2 bit-exactly.
LinearImage merge_hdr(const LinearImage& h1_warped, const LinearImage& h2,
                      const LinearImage& h3_warped, const FusionWeights& w);

// Batched kernels used by the network.

// ldr: N x 3 x H x W; one exposure per batch item.
template <typename T>
Tensor<T> ldr_to_linear(const Tensor<T>& ldr, std::span<const double> exposures,
                        double gamma);

template <typename T>
ag::Var<T> ldr_to_linear(const ag::Var<T>& ldr, std::span<const double> exposures,
                         double gamma);

// Returns N x 3 x H x W holding (lam1, lam2, lam3) per pixel.
template <typename T>
Tensor<T> initial_coefficients(const Tensor<T>& reference_ldr);

// mu-law of the input clamped to [0, 1].
template <typename T>
ag::Var<T> tonemap_mu(const ag::Var<T>& hdr, double mu);

// Mask-reweighted explicit merge; h*: N x 3 x H x W, m*: N x 1 x H x W,
// lam: output of initial_coefficients.
template <typename T>
ag::Var<T> merge_hdr(const ag::Var<T>& h1_warped, const ag::Var<T>& h2,
                     const ag::Var<T>& h3_warped, const ag::Var<T>& m1,
                     const ag::Var<T>& m3, const Tensor<T>& lam);

}  // namespace safnet
