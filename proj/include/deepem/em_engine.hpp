#ifndef DEEPEM_EM_ENGINE_HPP_
#define DEEPEM_EM_ENGINE_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepem/detector.hpp"
#include "deepem/eval.hpp"
#include "deepem/synthvol.hpp"
#include "deepem/weaklik.hpp"

namespace deepem {

enum class InferenceMode { Map, Sampling };

std::string to_string(InferenceMode mode);
InferenceMode inference_mode_from_string(const std::string& name);

struct EmConfig {
  double logit_threshold = -3.0;
  double nms_iou = 0.1;
  int samples_per_label = 2;
  double weak_fraction = 1.0 / 16.0;
  /// Unset means 2 mu + 3 sigma of the fitted slice model.
  std::optional<double> neg_slice_margin;
  InferenceMode inference_mode = InferenceMode::Map;

  double detector_lr = 0.05;
  double lobe_lr = 2.0;
  /// Both learning rates are scaled by 1 / (1 + lr_decay * (epoch - 1)).
  double lr_decay = 0.3;
  int init_epochs = 5;
  int em_epochs = 15;

  int stride = 2;
  std::vector<double> anchor_scales{4.0, 7.0};
  double mu = kDefaultTruncation;
  /// Used only when the fully supervised split carries no slice annotations.
  double sigma_fallback = 2.0;

  void validate() const;
  double negative_margin(const HalfGaussianParams& hg) const {
    return neg_slice_margin ? *neg_slice_margin : 2.0 * hg.mu + 3.0 * hg.sigma;
  }
};

/// Detector weights, lobe regression and slice model: the full parameter set.
struct ModelParams {
  DetectorParams detector;
  LobeParams lobe;
  HalfGaussianParams slice;

  bool operator==(const ModelParams&) const = default;
};

struct Posterior {
  std::vector<Proposal> support;
  std::vector<double> weights;
};

/// Boxes are cubes of side d centered at their centers.
double iou_3d(const NoduleBox& a, const NoduleBox& b);

/// Drop logit < threshold, then greedy NMS in descending logit (ties: lower anchor_id)
/// suppressing IoU > nms_iou against any kept box.
std::vector<Proposal> filter_proposals(std::span<const Proposal> proposals, const EmConfig& cfg);

/// Normalized sigmoid(logit) * slice density * lobe probability, computed in log space.
/// Empty input yields nullopt (the weak label is skipped).
std::optional<Posterior> posterior(std::span<const Proposal> filtered, const WeakLabel& weak, const Volume& volume,
                                   const ModelParams& params);

/// Argmax weight; ties go to the lower anchor_id.
Proposal infer_map(const Posterior& post);

/// m_hat i.i.d. draws with replacement.
std::vector<Proposal> infer_sampling(const Posterior& post, int m_hat, Rng& rng);

/// Highest-logit proposals farther than margin slices from every weak slice, capped at
/// 2 * |weak| (at least 2).
std::vector<Proposal> hard_negatives(std::span<const Proposal> filtered, std::span<const WeakLabel> weak,
                                     double margin);

/// A frozen E-step for one weak scan. positives[i] was inferred for label lobes[i] /
/// slices[i]; sampling mode stores M * m_hat entries.
struct EStep {
  std::vector<Proposal> positives;
  std::vector<int> lobes;
  std::vector<int> slices;
  std::vector<Proposal> negatives;
  int labels_used = 0;
  int labels_skipped = 0;
};

EStep run_e_step(const AnchorSet& anchors, const Eigen::VectorXd& logits, std::span<const WeakLabel> weak,
                 const Volume& volume, const ModelParams& params, const EmConfig& cfg, Rng& rng);

/// Expected complete-data log-likelihood of params at a frozen E-step.
double q_value(const EStep& estep, const AnchorSet& anchors, const Volume& volume, const ModelParams& params);

/// One ascent step on q_value: detector by sgd on the supervised loss over inferred
/// positives and hard negatives, lobe regression on (lobe, inferred box); sigma fixed.
ModelParams weak_m_step(const EStep& estep, const AnchorSet& anchors, const Volume& volume,
                        const ModelParams& params, double detector_lr, double lobe_lr);

/// Thresholded, NMS-filtered proposals of one scan.
std::vector<Proposal> detect(const AnchorSet& anchors, const ModelParams& params, const EmConfig& cfg);

FrocResult evaluate(std::span<const LabeledScan> scans, std::span<const AnchorSet> anchors, const ModelParams& params,
                    const EmConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  double supervised_loss = 0.0;
  int weak_labels_used = 0;
  int weak_labels_skipped = 0;
  std::optional<double> froc;  // validation FROC in [0,1]
};

struct TrainingResult {
  ModelParams params;
  std::vector<EpochMetrics> history;
  int epochs = 0;
};

ModelParams initial_params(const EmConfig& cfg);

/// Initialization epochs of fully supervised training, then per epoch a weak pass over
/// a weak_fraction subsample of d_weak followed by a fully supervised pass over d_full.
/// Only the `weak` field of d_weak scans is read. An empty d_weak reduces to plain
/// supervised training with the same random stream.
TrainingResult train_em(std::span<const LabeledScan> d_full, std::span<const LabeledScan> d_weak,
                              std::span<const LabeledScan> validation, const EmConfig& cfg, std::uint64_t seed);

}  // namespace deepem

#endif  // DEEPEM_EM_ENGINE_HPP_
