#include "safnet/losses.hpp"

#include <cmath>
#include <random>

#include "safnet/ops.hpp"
#include "safnet/radiometry.hpp"

namespace safnet {

using ag::Var;

template <typename T>
RandomConvFeatures<T>::RandomConvFeatures(std::uint64_t seed, std::vector<int> channels) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  int cin = 3;
  for (int cout : channels) {
    Tensor<T> w({cout, cin, 3, 3});
    const double std = std::sqrt(2.0 / (cin * 9.0));
    for (auto& v : w.values()) v = static_cast<T>(normal(rng) * std);
    weights_.emplace_back(std::move(w), false);
    biases_.emplace_back(Tensor<T>({1, cout, 1, 1}), false);
    cin = cout;
  }
}

template <typename T>
std::vector<Var<T>> RandomConvFeatures<T>::features(const Var<T>& image) const {
  std::vector<Var<T>> out;
  Var<T> x = image;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    x = ops::relu(ops::conv2d(x, weights_[i], biases_[i], {2, 1, 1, 1}));
    out.push_back(x);
  }
  return out;
}

template <typename T>
Var<T> tonemapped_l1(const Var<T>& pred, const Var<T>& gt, double mu) {
  require_same_shape(pred.shape(), gt.shape(), "tonemapped_l1");
  return ops::mean_abs_diff(tonemap_mu(pred, mu), tonemap_mu(gt, mu));
}

template <typename T>
Var<T> perceptual_loss(const Var<T>& pred, const Var<T>& gt, const FeatureExtractor<T>& fx) {
  require_same_shape(pred.shape(), gt.shape(), "perceptual_loss");
  const auto fp = fx.features(pred);
  const auto fg = fx.features(gt);
  std::vector<std::pair<Var<T>, double>> terms;
  for (std::size_t i = 0; i < fp.size(); ++i) {
    terms.emplace_back(ops::mean_abs_diff(fp[i], fg[i]), 1.0);
  }
  return ops::weighted_sum(terms);
}

namespace {

template <typename T>
Tensor<T> gray(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> g({s.n, 1, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    T* dst = g.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < plane; ++i) dst[i] /= static_cast<T>(s.c);
  }
  return g;
}

}  // namespace

template <typename T>
Var<T> census_loss(const Var<T>& pred, const Var<T>& gt, const CensusOptions& opt) {
  require_same_shape(pred.shape(), gt.shape(), "census_loss");
  if (opt.patch < 1 || opt.patch % 2 == 0) {
    throw ContractError("census patch size must be odd");
  }
  const Shape s = pred.shape();
  const int r = opt.patch / 2;
  const Tensor<T> ga = gray(pred.value());
  const Tensor<T> gb = gray(gt.value());
  const int vh = s.h - 2 * r;
  const int vw = s.w - 2 * r;
  const double count =
      (vh > 0 && vw > 0) ? double(s.n) * vh * vw * (opt.patch * opt.patch - 1) : 0.0;

  const double se = opt.sign_eps;
  const double he = opt.hamming_eps;
  // Visits every (pixel, neighbour) pair with the difference of soft signs.
  auto sweep = [s, r, count, se](const Tensor<T>& ga, const Tensor<T>& gb, auto&& visit) {
    if (count == 0) return;
    for (int n = 0; n < s.n; ++n) {
      const T* a = ga.plane(n, 0);
      const T* b = gb.plane(n, 0);
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          if (dy == 0 && dx == 0) continue;
          for (int y = r; y < s.h - r; ++y) {
            for (int x = r; x < s.w - r; ++x) {
              const int p = y * s.w + x;
              const int q = (y + dy) * s.w + (x + dx);
              const double da = double(a[q]) - a[p];
              const double db = double(b[q]) - b[p];
              const double sa = da / std::sqrt(se + da * da);
              const double sb = db / std::sqrt(se + db * db);
              visit(n, p, q, da, db, sa - sb);
            }
          }
        }
      }
    }
  };

  double acc = 0;
  sweep(ga, gb, [&](int, int, int, double, double, double diff) {
    const double d2 = diff * diff;
    acc += d2 / (he + d2);
  });
  Tensor<T> value({1, 1, 1, 1}, static_cast<T>(count > 0 ? acc / count : 0.0));

  return Var<T>::from_op(std::move(value), {pred, gt}, [=](ag::Node<T>& self) {
    auto& pa = *self.inputs[0];
    auto& pb = *self.inputs[1];
    Tensor<T> gga({s.n, 1, s.h, s.w});
    Tensor<T> ggb({s.n, 1, s.h, s.w});
    const double scale = double(self.grad[0]) / count;
    sweep(ga, gb, [&](int n, int p, int q, double da, double db, double diff) {
      const double den = he + diff * diff;
      const double dh = 2.0 * diff * he / (den * den) * scale;
      const double dsa = se / std::pow(se + da * da, 1.5);
      const double dsb = se / std::pow(se + db * db, 1.5);
      T* ra = gga.plane(n, 0);
      T* rb = ggb.plane(n, 0);
      ra[q] += static_cast<T>(dh * dsa);
      ra[p] -= static_cast<T>(dh * dsa);
      rb[q] -= static_cast<T>(dh * dsb);
      rb[p] += static_cast<T>(dh * dsb);
    });
    auto spread = [&](ag::Node<T>& node, const Tensor<T>& gg) {
      if (!node.requires_grad) return;
      Tensor<T> g(s);
      const std::size_t plane = s.plane();
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          T* dst = g.plane(n, c);
          const T* src = gg.plane(n, 0);
          for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] / static_cast<T>(s.c);
        }
      }
      ag::accumulate(node, g);
    };
    spread(pa, gga);
    spread(pb, ggb);
  });
}

template <typename T>
LossReport LossTerms<T>::report() const {
  return {double(l1_r.value()[0]), double(perc_r.value()[0]), double(l1_m.value()[0]),
          double(census_m.value()[0]), double(total.value()[0])};
}

template <typename T>
LossTerms<T> total_loss(const Var<T>& refined, const Var<T>& merged, const Var<T>& gt,
                        const FeatureExtractor<T>& fx, double mu,
                        const LossWeights& weights, const CensusOptions& census) {
  require_same_shape(refined.shape(), gt.shape(), "total_loss refined");
  require_same_shape(merged.shape(), gt.shape(), "total_loss merged");
  const Var<T> tr = tonemap_mu(refined, mu);
  const Var<T> tm = tonemap_mu(merged, mu);
  const Var<T> tg = tonemap_mu(gt, mu);
  LossTerms<T> t;
  t.l1_r = ops::mean_abs_diff(tr, tg);
  t.perc_r = perceptual_loss(tr, tg, fx);
  t.l1_m = ops::mean_abs_diff(tm, tg);
  t.census_m = census_loss(tm, tg, census);
  const Var<T> loss_r = ops::weighted_sum<T>({{t.l1_r, 1.0}, {t.perc_r, weights.alpha}});
  const Var<T> loss_m = ops::weighted_sum<T>({{t.l1_m, 1.0}, {t.census_m, 1.0}});
  t.total = ops::weighted_sum<T>({{loss_r, 1.0}, {loss_m, weights.beta}});
  return t;
}

LossReport total_loss(const LinearImage& refined, const LinearImage& merged,
                      const LinearImage& gt, const FeatureExtractor<double>& fx,
                      double mu, const LossWeights& weights) {
  ag::NoGradGuard no_grad;
  return total_loss(Var<double>(refined.pixels), Var<double>(merged.pixels),
                    Var<double>(gt.pixels), fx, mu, weights)
      .report();
}

#define SAFNET_INSTANTIATE(T)                                                          \
  template class RandomConvFeatures<T>;                                                \
  template struct LossTerms<T>;                                                        \
  template Var<T> tonemapped_l1(const Var<T>&, const Var<T>&, double);                 \
  template Var<T> perceptual_loss(const Var<T>&, const Var<T>&,                        \
                                  const FeatureExtractor<T>&);                         \
  template Var<T> census_loss(const Var<T>&, const Var<T>&, const CensusOptions&);     \
  template LossTerms<T> total_loss(const Var<T>&, const Var<T>&, const Var<T>&,        \
                                   const FeatureExtractor<T>&, double,                 \
                                   const LossWeights&, const CensusOptions&);

SAFNET_INSTANTIATE(float)
SAFNET_INSTANTIATE(double)
#undef SAFNET_INSTANTIATE

}  // namespace safnet
