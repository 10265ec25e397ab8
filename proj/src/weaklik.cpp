#include "deepem/weaklik.hpp"

#include "deepem/error.hpp"

namespace deepem {

void HalfGaussianParams::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("half-Gaussian sigma must be positive");
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("half-Gaussian mu must be non-negative");
}

double log_slice_likelihood(int z_weak, const NoduleBox& proposal, const HalfGaussianParams& hg) {
  return log_half_gaussian_density(static_cast<double>(z_weak) - proposal.center.z(), hg.sigma, hg.mu);
}

double slice_likelihood(int z_weak, const NoduleBox& proposal, const HalfGaussianParams& hg) {
  return std::exp(log_slice_likelihood(z_weak, proposal, hg));
}

LobeFeature lobe_feature(const NoduleBox& box, const Volume& volume) {
  if (!volume.contains(box.center)) throw DataError("proposal center outside the grid");
  const Region& lung = volume.lung_region();
  LobeFeature f;
  f.head<3>() = ((box.center.array() - lung.lo.cast<double>()) / lung.extent()).matrix();
  f[3] = 1.0;
  return f;
}

LobeVector lobe_log_probabilities(const LobeFeature& f, const LobeParams& lp) {
  const LobeVector scores = lp.theta * f;
  const double m = scores.maxCoeff();
  return scores.array() - (m + std::log((scores.array() - m).exp().sum()));
}

LobeVector lobe_probabilities(const LobeFeature& f, const LobeParams& lp) {
  return lobe_log_probabilities(f, lp).array().exp();
}

double lobe_likelihood(int lobe, const NoduleBox& proposal, const Volume& volume, const LobeParams& lp) {
  if (lobe < 1 || lobe > kNumLobes) throw ConfigError("lobe must be in 1..6");
  return lobe_probabilities(lobe_feature(proposal, volume), lp)[lobe - 1];
}

HalfGaussianParams fit_sigma(std::span<const SlicePair> sample, double mu) {
  if (sample.empty()) throw ConfigError("fit_sigma needs a nonempty sample");
  if (mu < 0.0) throw ConfigError("mu must be non-negative");
  double sum_sq = 0.0;
  for (const SlicePair& p : sample) {
    const double t = truncated_offset(static_cast<double>(p.central_slice) - p.box.center.z(), mu);
    sum_sq += t * t;
  }
  const double sigma = std::sqrt(sum_sq / static_cast<double>(sample.size()));
  return {std::max(sigma, kSigmaFloor), mu};
}

LobeExample make_lobe_example(int lobe, const NoduleBox& box, const Volume& volume) {
  if (lobe < 1 || lobe > kNumLobes) throw ConfigError("lobe must be in 1..6");
  return {lobe, lobe_feature(box, volume)};
}

double lobe_nll(std::span<const LobeExample> batch, const LobeParams& lp, LobeMatrix* gradient) {
  if (batch.empty()) throw ConfigError("lobe batch must be nonempty");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  if (gradient) gradient->setZero();
  for (const LobeExample& e : batch) {
    const LobeVector logp = lobe_log_probabilities(e.feature, lp);
    loss -= inv * logp[e.lobe - 1];
    if (gradient) {
      LobeVector residual = logp.array().exp();
      residual[e.lobe - 1] -= 1.0;
      *gradient += inv * residual * e.feature.transpose();
    }
  }
  return loss;
}

LobeStep lobe_fit_step(std::span<const LobeExample> batch, const LobeParams& lp, double learning_rate) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  LobeMatrix grad;
  LobeStep step;
  step.loss = lobe_nll(batch, lp, &grad);
  if (!grad.allFinite()) throw NumericError("non-finite lobe gradient");
  step.params.theta = lp.theta - learning_rate * grad;
  return step;
}

}  // namespace deepem
