#ifndef DEEPEM_DETECTOR_HPP_
#define DEEPEM_DETECTOR_HPP_

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "deepem/synthvol.hpp"

namespace deepem {

// Feature layout: mean, max, std inside the box, ring contrast (inside mean minus
// shell mean), center normalized to the lung region (x, y, z), log diameter.
inline constexpr int kNumFeatures = 8;
using FeatureVector = Eigen::Matrix<double, kNumFeatures, 1>;
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, kNumFeatures, Eigen::RowMajor>;

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
}

/// log(1 + exp(x)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > Scalar(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

struct Proposal {
  NoduleBox box;
  double logit = 0.0;
  int anchor_id = 0;

  double probability() const { return sigmoid(logit); }
};

/// One (weights, bias) block of length kNumFeatures + 1 per anchor scale.
struct DetectorParams {
  static constexpr int kBlock = kNumFeatures + 1;

  Eigen::VectorXd weights;
  std::vector<double> scales;

  static DetectorParams zeros(std::vector<double> scales);

  int scale_count() const { return static_cast<int>(scales.size()); }
  /// Nearest anchor scale to a diameter; ties go to the smaller index.
  int scale_index_for(double diameter) const;
  auto block(int scale_index) const { return weights.segment<kBlock>(kBlock * scale_index); }
  double logit(const FeatureVector& f, int scale_index) const;

  /// Throws ConfigError on an empty scale list, a size mismatch, or non-finite weights.
  void validate() const;

  bool operator==(const DetectorParams& o) const {
    return scales == o.scales && weights.size() == o.weights.size() && weights == o.weights;
  }
};

/// Direct per-box evaluation. Throws ConfigError for d <= 0 and DataError when the
/// box misses the grid.
FeatureVector extract_features(const Volume& volume, const NoduleBox& box);

/// Anchor boxes and their cached features for one volume. Features do not depend on
/// the detector weights, so a scan's anchors are built once and rescored per step.
/// Ordering is grid-major, scale-minor; anchor_id is the row index.
struct AnchorSet {
  std::vector<NoduleBox> boxes;
  std::vector<int> scale_index;
  FeatureMatrix features;
  int grid_points = 0;

  int size() const { return static_cast<int>(boxes.size()); }
};

/// Anchor centers are integer voxels lo + stride/2 + k*stride inside the lung region.
AnchorSet build_anchors(const Volume& volume, std::span<const double> scales, int stride);

/// Logits for every anchor under params.
Eigen::VectorXd score_anchors(const AnchorSet& anchors, const DetectorParams& params);

std::vector<Proposal> to_proposals(const AnchorSet& anchors, const Eigen::VectorXd& logits);

/// Exhaustive scoring: one proposal per (grid point, scale).
std::vector<Proposal> propose(const Volume& volume, const DetectorParams& params, int stride);

struct LossGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;
};

struct Example {
  FeatureVector features;
  int scale_index = 0;
};

/// Averaged positive and negative cross-entropies with the exact gradient.
/// An empty side contributes nothing; both empty throws ConfigError.
LossGradient supervised_loss(std::span<const Example> positives, std::span<const Example> negatives,
                             const DetectorParams& params);

LossGradient supervised_loss(const Volume& volume, std::span<const NoduleBox> positives,
                             std::span<const NoduleBox> negatives, const DetectorParams& params);

/// params - learning_rate * gradient. Throws NumericError on a non-finite gradient.
DetectorParams sgd_step(const DetectorParams& params, const Eigen::VectorXd& gradient, double learning_rate);

/// Anchor ids used for fully supervised training of one scan.
struct Selection {
  std::vector<int> positives;
  std::vector<int> negatives;
};

/// Positives: anchors whose center lies strictly within a truth radius.
/// Negatives: the 2 * |positives| (at least 2) highest-logit remaining anchors.
Selection select_supervised(const AnchorSet& anchors, const Eigen::VectorXd& logits,
                            std::span<const NoduleBox> truth);

std::vector<Example> gather_examples(const AnchorSet& anchors, std::span<const int> anchor_ids);

}  // namespace deepem

#endif  // DEEPEM_DETECTOR_HPP_
