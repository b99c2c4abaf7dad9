#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "safnet/autograd.hpp"

namespace safnet::testing {

inline TensorD random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0;
  int checked = 0;
  std::string worst;
};

// Compares reverse-mode gradients of the scalar f() against central finite
// differences. Up to `samples` entries of each leaf are probed (all of them
// when the leaf is smaller). Relative error is |a - n| / max(|a|, |n|, floor).
template <typename F>
GradCheckResult grad_check(const std::vector<std::pair<std::string, ag::Var<double>>>& leaves,
                           F&& f, int samples = 8, std::uint64_t seed = 1,
                           double eps = 1e-6, double floor = 1e-7) {
  for (const auto& [name, v] : leaves) const_cast<ag::Var<double>&>(v).zero_grad();
  ag::backward(f());
  std::vector<TensorD> analytic;
  for (const auto& [name, v] : leaves) {
    analytic.push_back(v.grad().empty() ? TensorD(v.shape()) : v.grad());
  }

  GradCheckResult res;
  std::mt19937_64 rng(seed);
  ag::NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    ag::Var<double> leaf = leaves[li].second;
    TensorD& value = leaf.mutable_value();
    std::vector<std::size_t> idx(value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > static_cast<std::size_t>(samples)) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples);
    }
    for (std::size_t i : idx) {
      const double orig = value[i];
      value[i] = orig + eps;
      const double fp = f().value()[0];
      value[i] = orig - eps;
      const double fm = f().value()[0];
      value[i] = orig;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic[li][i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = leaves[li].first + "[" + std::to_string(i) + "] analytic " +
                    std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace safnet::testing
