#include "deepem/em_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deepem/error.hpp"

namespace deepem {

std::string to_string(InferenceMode mode) { return mode == InferenceMode::Map ? "map" : "sampling"; }

InferenceMode inference_mode_from_string(const std::string& name) {
  if (name == "map") return InferenceMode::Map;
  if (name == "sampling") return InferenceMode::Sampling;
  throw ConfigError("unknown inference mode: " + name);
}

void EmConfig::validate() const {
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ConfigError("nms_iou must be in (0,1)");
  if (samples_per_label < 1) throw ConfigError("samples_per_label must be >= 1");
  if (!(weak_fraction > 0.0 && weak_fraction <= 1.0)) throw ConfigError("weak_fraction must be in (0,1]");
  if (neg_slice_margin && *neg_slice_margin < 0.0) throw ConfigError("neg_slice_margin must be non-negative");
  if (!(detector_lr > 0.0) || !(lobe_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (lr_decay < 0.0) throw ConfigError("lr_decay must be non-negative");
  if (init_epochs < 0 || em_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (anchor_scales.empty()) throw ConfigError("at least one anchor scale required");
  for (double s : anchor_scales)
    if (!(s > 0.0)) throw ConfigError("anchor scales must be positive");
  if (!(mu >= 0.0) || !(sigma_fallback > 0.0)) throw ConfigError("invalid slice model settings");
}

double iou_3d(const NoduleBox& a, const NoduleBox& b) {
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(a.center[k] - a.radius(), b.center[k] - b.radius());
    const double hi = std::min(a.center[k] + a.radius(), b.center[k] + b.radius());
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  const double uni = std::pow(a.diameter, 3) + std::pow(b.diameter, 3) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

bool stronger(const Proposal& a, const Proposal& b) {
  return a.logit != b.logit ? a.logit > b.logit : a.anchor_id < b.anchor_id;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<Proposal> filter_proposals(std::span<const Proposal> proposals, const EmConfig& cfg) {
  std::vector<Proposal> candidates;
  for (const Proposal& p : proposals)
    if (p.logit >= cfg.logit_threshold) candidates.push_back(p);
  std::sort(candidates.begin(), candidates.end(), stronger);

  std::vector<Proposal> kept;
  for (const Proposal& p : candidates) {
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Proposal& k) { return iou_3d(k.box, p.box) > cfg.nms_iou; });
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

std::optional<Posterior> posterior(std::span<const Proposal> filtered, const WeakLabel& weak, const Volume& volume,
                                   const ModelParams& params) {
  if (filtered.empty()) return std::nullopt;
  if (weak.lobe < 1 || weak.lobe > kNumLobes) throw ConfigError("weak label lobe must be in 1..6");
  Eigen::ArrayXd logw(static_cast<Eigen::Index>(filtered.size()));
  for (std::size_t i = 0; i < filtered.size(); ++i) {
    const Proposal& p = filtered[i];
    const double log_prior = -softplus(-p.logit);
    const double log_slice = log_slice_likelihood(weak.central_slice, p.box, params.slice);
    const double log_lobe = lobe_log_probabilities(lobe_feature(p.box, volume), params.lobe)[weak.lobe - 1];
    logw[static_cast<Eigen::Index>(i)] = log_prior + log_slice + log_lobe;
  }
  const Eigen::ArrayXd w = (logw - logw.maxCoeff()).exp();
  const Eigen::ArrayXd normalized = w / w.sum();

  Posterior post;
  post.support.assign(filtered.begin(), filtered.end());
  post.weights.assign(normalized.data(), normalized.data() + normalized.size());
  return post;
}

Proposal infer_map(const Posterior& post) {
  if (post.support.empty() || post.support.size() != post.weights.size()) throw ConfigError("invalid posterior");
  std::size_t best = 0;
  for (std::size_t i = 1; i < post.weights.size(); ++i) {
    if (post.weights[i] > post.weights[best] ||
        (post.weights[i] == post.weights[best] && post.support[i].anchor_id < post.support[best].anchor_id))
      best = i;
  }
  return post.support[best];
}

std::vector<Proposal> infer_sampling(const Posterior& post, int m_hat, Rng& rng) {
  if (m_hat < 1) throw ConfigError("m_hat must be >= 1");
  if (post.support.empty() || post.support.size() != post.weights.size()) throw ConfigError("invalid posterior");
  std::vector<double> cumulative(post.weights.size());
  std::partial_sum(post.weights.begin(), post.weights.end(), cumulative.begin());
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < post.weights.size(); ++i)
    if (post.weights[i] > 0.0) last_positive = i;

  std::uniform_real_distribution<double> unit(0.0, cumulative.back());
  std::vector<Proposal> draws;
  draws.reserve(static_cast<std::size_t>(m_hat));
  for (int k = 0; k < m_hat; ++k) {
    const double u = unit(rng);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    const std::size_t idx = it == cumulative.end() ? last_positive : static_cast<std::size_t>(it - cumulative.begin());
    draws.push_back(post.support[idx]);
  }
  return draws;
}

std::vector<Proposal> hard_negatives(std::span<const Proposal> filtered, std::span<const WeakLabel> weak,
                                     double margin) {
  std::vector<Proposal> far;
  for (const Proposal& p : filtered) {
    const bool is_far = std::all_of(weak.begin(), weak.end(), [&](const WeakLabel& w) {
      return std::abs(p.box.center.z() - static_cast<double>(w.central_slice)) > margin;
    });
    if (is_far) far.push_back(p);
  }
  std::sort(far.begin(), far.end(), stronger);
  const std::size_t cap = std::max<std::size_t>(2, 2 * weak.size());
  if (far.size() > cap) far.resize(cap);
  return far;
}

EStep run_e_step(const AnchorSet& anchors, const Eigen::VectorXd& logits, std::span<const WeakLabel> weak,
                 const Volume& volume, const ModelParams& params, const EmConfig& cfg, Rng& rng) {
  const std::vector<Proposal> all = to_proposals(anchors, logits);
  const std::vector<Proposal> filtered = filter_proposals(all, cfg);
  EStep estep;
  for (const WeakLabel& label : weak) {
    const auto post = posterior(filtered, label, volume, params);
    if (!post) {
      ++estep.labels_skipped;
      continue;
    }
    ++estep.labels_used;
    std::vector<Proposal> inferred;
    if (cfg.inference_mode == InferenceMode::Map)
      inferred.push_back(infer_map(*post));
    else
      inferred = infer_sampling(*post, cfg.samples_per_label, rng);
    for (const Proposal& p : inferred) {
      estep.positives.push_back(p);
      estep.lobes.push_back(label.lobe);
      estep.slices.push_back(label.central_slice);
    }
  }
  estep.negatives = hard_negatives(filtered, weak, cfg.negative_margin(params.slice));
  return estep;
}

namespace {

std::vector<Example> examples_of(const AnchorSet& anchors, std::span<const Proposal> proposals) {
  std::vector<int> ids;
  ids.reserve(proposals.size());
  for (const Proposal& p : proposals) ids.push_back(p.anchor_id);
  return gather_examples(anchors, ids);
}

std::vector<LobeExample> lobe_examples_of(const EStep& estep, const Volume& volume) {
  std::vector<LobeExample> out;
  out.reserve(estep.positives.size());
  for (std::size_t i = 0; i < estep.positives.size(); ++i)
    out.push_back(make_lobe_example(estep.lobes[i], estep.positives[i].box, volume));
  return out;
}

}  // namespace

double q_value(const EStep& estep, const AnchorSet& anchors, const Volume& volume, const ModelParams& params) {
  double q = 0.0;
  const auto pos = examples_of(anchors, estep.positives);
  const auto neg = examples_of(anchors, estep.negatives);
  if (!pos.empty() || !neg.empty()) q -= supervised_loss(pos, neg, params.detector).loss;
  if (!estep.positives.empty()) {
    double slice = 0.0;
    for (std::size_t i = 0; i < estep.positives.size(); ++i)
      slice += log_slice_likelihood(estep.slices[i], estep.positives[i].box, params.slice);
    q += slice / static_cast<double>(estep.positives.size());
    q -= lobe_nll(lobe_examples_of(estep, volume), params.lobe);
  }
  return q;
}

ModelParams weak_m_step(const EStep& estep, const AnchorSet& anchors, const Volume& volume,
                        const ModelParams& params, double detector_lr, double lobe_lr) {
  const auto pos = examples_of(anchors, estep.positives);
  const auto neg = examples_of(anchors, estep.negatives);
  if (pos.empty() && neg.empty()) throw ConfigError("weak_m_step needs inferred positives or negatives");
  ModelParams next = params;
  const LossGradient lg = supervised_loss(pos, neg, params.detector);
  if (!std::isfinite(lg.loss)) throw NumericError("non-finite weak-pass loss");
  next.detector = sgd_step(params.detector, lg.gradient, detector_lr);
  if (!estep.positives.empty()) next.lobe = lobe_fit_step(lobe_examples_of(estep, volume), params.lobe, lobe_lr).params;
  return next;
}

std::vector<Proposal> detect(const AnchorSet& anchors, const ModelParams& params, const EmConfig& cfg) {
  return filter_proposals(to_proposals(anchors, score_anchors(anchors, params.detector)), cfg);
}

FrocResult evaluate(std::span<const LabeledScan> scans, std::span<const AnchorSet> anchors, const ModelParams& params,
                    const EmConfig& cfg) {
  if (scans.size() != anchors.size()) throw ConfigError("anchor cache does not match scans");
  std::vector<Detection> detections;
  std::vector<std::vector<NoduleBox>> truths;
  for (std::size_t s = 0; s < scans.size(); ++s) {
    for (const Proposal& p : detect(anchors[s], params, cfg))
      detections.push_back({static_cast<int>(s), p.box, p.probability()});
    truths.push_back(scans[s].truth);
  }
  return froc(detections, truths);
}

ModelParams initial_params(const EmConfig& cfg) {
  ModelParams p;
  p.detector = DetectorParams::zeros(cfg.anchor_scales);
  p.slice = {cfg.sigma_fallback, cfg.mu};
  return p;
}

namespace {

class Trainer {
 public:
  Trainer(std::span<const LabeledScan> full, std::span<const LabeledScan> weak, std::span<const LabeledScan> validation,
          const EmConfig& cfg, std::uint64_t seed)
      : full_(full),
        weak_(weak),
        validation_(validation),
        cfg_(cfg),
        full_rng_(splitmix64(seed ^ 0x46554C4CULL)),
        weak_rng_(splitmix64(seed ^ 0x5745414BULL)) {
    for (const LabeledScan& s : full_) full_anchors_.push_back(build_anchors(s.volume, cfg_.anchor_scales, cfg_.stride));
    for (const LabeledScan& s : validation_)
      validation_anchors_.push_back(build_anchors(s.volume, cfg_.anchor_scales, cfg_.stride));
    params_ = initial_params(cfg_);
    params_.slice = calibrate_slice_model();
    validate_ = std::any_of(validation_.begin(), validation_.end(), [](const LabeledScan& s) { return !s.truth.empty(); });
  }

  TrainingResult run() {
    TrainingResult result;
    int epoch = 0;
    for (int e = 0; e < cfg_.init_epochs; ++e) {
      EpochMetrics m;
      m.epoch = ++epoch;
      set_rate(epoch);
      m.supervised_loss = full_pass();
      finish_epoch(m, result);
    }
    for (int e = 0; e < cfg_.em_epochs; ++e) {
      EpochMetrics m;
      m.epoch = ++epoch;
      set_rate(epoch);
      if (!weak_.empty()) weak_pass(m);
      m.supervised_loss = full_pass();
      finish_epoch(m, result);
    }
    result.params = params_;
    result.epochs = epoch;
    return result;
  }

 private:
  HalfGaussianParams calibrate_slice_model() const {
    std::vector<SlicePair> pairs;
    for (const LabeledScan& s : full_)
      if (s.weak.size() == s.truth.size())
        for (std::size_t i = 0; i < s.truth.size(); ++i) pairs.push_back({s.weak[i].central_slice, s.truth[i]});
    if (pairs.empty()) return {cfg_.sigma_fallback, cfg_.mu};
    return fit_sigma(pairs, cfg_.mu);
  }

  std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) const {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
      std::swap(order[i - 1], order[j]);
    }
    return order;
  }

  void set_rate(int epoch) { rate_ = 1.0 / (1.0 + cfg_.lr_decay * (epoch - 1)); }

  double full_pass() {
    double total = 0.0;
    for (std::size_t idx : shuffled(full_.size(), full_rng_)) {
      const LabeledScan& scan = full_[idx];
      const AnchorSet& anchors = full_anchors_[idx];
      const Eigen::VectorXd logits = score_anchors(anchors, params_.detector);
      const Selection sel = select_supervised(anchors, logits, scan.truth);
      const LossGradient lg =
          supervised_loss(gather_examples(anchors, sel.positives), gather_examples(anchors, sel.negatives),
                          params_.detector);
      if (!std::isfinite(lg.loss)) throw NumericError("non-finite supervised loss");
      total += lg.loss;
      params_.detector = sgd_step(params_.detector, lg.gradient, rate_ * cfg_.detector_lr);

      std::vector<LobeExample> lobes;
      for (const NoduleBox& t : scan.truth)
        if (scan.volume.lung_region().contains(t.center))
          lobes.push_back(make_lobe_example(lobe_of(t.center, scan.volume), t, scan.volume));
      if (!lobes.empty()) params_.lobe = lobe_fit_step(lobes, params_.lobe, rate_ * cfg_.lobe_lr).params;
    }
    return total / static_cast<double>(full_.size());
  }

  void weak_pass(EpochMetrics& m) {
    const auto n = weak_.size();
    const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg_.weak_fraction * double(n))), 1, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(weak_rng_);
      std::swap(order[i], order[j]);
    }
    for (std::size_t i = 0; i < k; ++i) {
      const LabeledScan& scan = weak_[order[i]];
      const AnchorSet anchors = build_anchors(scan.volume, cfg_.anchor_scales, cfg_.stride);
      const Eigen::VectorXd logits = score_anchors(anchors, params_.detector);
      const EStep estep = run_e_step(anchors, logits, scan.weak, scan.volume, params_, cfg_, weak_rng_);
      m.weak_labels_used += estep.labels_used;
      m.weak_labels_skipped += estep.labels_skipped;
      if (!estep.positives.empty() || !estep.negatives.empty())
        params_ = weak_m_step(estep, anchors, scan.volume, params_, rate_ * cfg_.detector_lr, rate_ * cfg_.lobe_lr);
    }
  }

  void finish_epoch(EpochMetrics& m, TrainingResult& result) const {
    if (validate_) m.froc = evaluate(validation_, validation_anchors_, params_, cfg_).average;
    result.history.push_back(m);
  }

  std::span<const LabeledScan> full_, weak_, validation_;
  const EmConfig& cfg_;
  Rng full_rng_, weak_rng_;
  std::vector<AnchorSet> full_anchors_, validation_anchors_;
  ModelParams params_;
  bool validate_ = false;
  double rate_ = 1.0;
};

}  // namespace

TrainingResult train_em(std::span<const LabeledScan> d_full, std::span<const LabeledScan> d_weak,
                              std::span<const LabeledScan> validation, const EmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (d_full.empty()) throw ConfigError("fully supervised set must be nonempty");
  return Trainer(d_full, d_weak, validation, cfg, seed).run();
}

}  // namespace deepem
