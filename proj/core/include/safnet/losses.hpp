#pragma once

#include <cstdint>
#include <vector>

#include "safnet/autograd.hpp"
#include "safnet/image.hpp"

namespace safnet {

// Weights of the training objective
//   L = (L1(T(Hr), T(Hgt)) + alpha * Lp) + beta * (L1(T(Hm), T(Hgt)) + Lc).
struct LossWeights {
  double alpha = 0.01;
  double beta = 0.1;
};

// Soft census transform: s(d) = d / sqrt(sign_eps + d^2) over a patch x patch
// window on the RGB mean, compared with (a-b)^2 / (hamming_eps + (a-b)^2).
struct CensusOptions {
  int patch = 7;
  double sign_eps = 0.0081;
  double hamming_eps = 0.1;
};

// Frozen multi-stage feature map used by the perceptual loss.
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<ag::Var<T>> features(const ag::Var<T>& image) const = 0;
};

// Seeded random conv stack: 3x3 stride-2 convolutions, each followed by ReLU.
template <typename T>
class RandomConvFeatures final : public FeatureExtractor<T> {
 public:
  explicit RandomConvFeatures(std::uint64_t seed,
                              std::vector<int> channels = {16, 32, 64});
  std::vector<ag::Var<T>> features(const ag::Var<T>& image) const override;

 private:
  std::vector<ag::Var<T>> weights_;
  std::vector<ag::Var<T>> biases_;
};

// Mean |T(pred) - T(gt)| with mu-law T applied after clamping to [0, 1].
template <typename T>
ag::Var<T> tonemapped_l1(const ag::Var<T>& pred, const ag::Var<T>& gt, double mu);

// Sum over stages of the mean L1 distance between features.
template <typename T>
ag::Var<T> perceptual_loss(const ag::Var<T>& pred, const ag::Var<T>& gt,
                           const FeatureExtractor<T>& fx);

// Mean soft Hamming distance over all pixels whose full window lies inside
// the image and all patch^2 - 1 neighbours. Zero if no pixel qualifies.
template <typename T>
ag::Var<T> census_loss(const ag::Var<T>& pred, const ag::Var<T>& gt,
                       const CensusOptions& opt = {});

struct LossReport {
  double l1_r = 0;
  double perc_r = 0;
  double l1_m = 0;
  double census_m = 0;
  double total = 0;
};

template <typename T>
struct LossTerms {
  ag::Var<T> l1_r;
  ag::Var<T> perc_r;
  ag::Var<T> l1_m;
  ag::Var<T> census_m;
  ag::Var<T> total;

  LossReport report() const;
};

template <typename T>
LossTerms<T> total_loss(const ag::Var<T>& refined, const ag::Var<T>& merged,
                        const ag::Var<T>& gt, const FeatureExtractor<T>& fx,
                        double mu, const LossWeights& weights = {},
                        const CensusOptions& census = {});

LossReport total_loss(const LinearImage& refined, const LinearImage& merged,
                      const LinearImage& gt, const FeatureExtractor<double>& fx,
                      double mu, const LossWeights& weights = {});

}  // namespace safnet
