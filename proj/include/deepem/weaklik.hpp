#ifndef DEEPEM_WEAKLIK_HPP_
#define DEEPEM_WEAKLIK_HPP_

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>

#include <Eigen/Dense>

#include "deepem/synthvol.hpp"

namespace deepem {

inline constexpr double kDefaultTruncation = 1.63;  // minimal nodule radius, voxels
inline constexpr double kSigmaFloor = 0.5;

struct HalfGaussianParams {
  double sigma = 2.0;
  double mu = kDefaultTruncation;

  void validate() const;
  bool operator==(const HalfGaussianParams&) const = default;
};

/// t = max(|dz| - mu, 0)
template <typename Scalar>
Scalar truncated_offset(Scalar dz, Scalar mu) {
  return std::max(std::abs(dz) - mu, Scalar(0));
}

/// Log of 2/sqrt(2 pi sigma^2) * exp(-t^2 / (2 sigma^2)).
template <typename Scalar>
Scalar log_half_gaussian_density(Scalar dz, Scalar sigma, Scalar mu) {
  const Scalar t = truncated_offset(dz, mu);
  return std::log(Scalar(2)) - Scalar(0.5) * std::log(Scalar(2) * std::numbers::pi_v<Scalar> * sigma * sigma) -
         t * t / (Scalar(2) * sigma * sigma);
}

template <typename Scalar>
Scalar half_gaussian_density(Scalar dz, Scalar sigma, Scalar mu) {
  return std::exp(log_half_gaussian_density(dz, sigma, mu));
}

double slice_likelihood(int z_weak, const NoduleBox& proposal, const HalfGaussianParams& hg);
double log_slice_likelihood(int z_weak, const NoduleBox& proposal, const HalfGaussianParams& hg);

/// Center relative to the lung region plus a bias entry.
using LobeFeature = Eigen::Vector4d;
using LobeMatrix = Eigen::Matrix<double, kNumLobes, 4>;
using LobeVector = Eigen::Matrix<double, kNumLobes, 1>;

struct LobeParams {
  LobeMatrix theta = LobeMatrix::Zero();

  bool operator==(const LobeParams& o) const { return theta == o.theta; }
};

/// Throws DataError when the box center is outside the grid.
LobeFeature lobe_feature(const NoduleBox& box, const Volume& volume);

/// Softmax over the six lobe scores theta * f, max-subtracted.
LobeVector lobe_probabilities(const LobeFeature& f, const LobeParams& lp);
LobeVector lobe_log_probabilities(const LobeFeature& f, const LobeParams& lp);

double lobe_likelihood(int lobe, const NoduleBox& proposal, const Volume& volume, const LobeParams& lp);

struct SlicePair {
  int central_slice = 0;
  NoduleBox box;
};

/// sigma^2 = mean(t_i^2), floored at kSigmaFloor. Throws ConfigError on an empty sample.
HalfGaussianParams fit_sigma(std::span<const SlicePair> sample, double mu);

struct LobeExample {
  int lobe = 1;
  LobeFeature feature = LobeFeature::Zero();
};

LobeExample make_lobe_example(int lobe, const NoduleBox& box, const Volume& volume);

/// Mean negative log-likelihood of the batch; fills the analytic gradient when given.
double lobe_nll(std::span<const LobeExample> batch, const LobeParams& lp, LobeMatrix* gradient = nullptr);

struct LobeStep {
  LobeParams params;
  double loss = 0.0;  // batch NLL before the step
};

LobeStep lobe_fit_step(std::span<const LobeExample> batch, const LobeParams& lp, double learning_rate);

}  // namespace deepem

#endif  // DEEPEM_WEAKLIK_HPP_
