#include "deepem/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "deepem/error.hpp"

namespace deepem {

DetectorParams DetectorParams::zeros(std::vector<double> scales) {
  DetectorParams p;
  p.weights = Eigen::VectorXd::Zero(kBlock * static_cast<Eigen::Index>(scales.size()));
  p.scales = std::move(scales);
  return p;
}

int DetectorParams::scale_index_for(double diameter) const {
  int best = 0;
  for (int s = 1; s < scale_count(); ++s)
    if (std::abs(scales[s] - diameter) < std::abs(scales[best] - diameter)) best = s;
  return best;
}

double DetectorParams::logit(const FeatureVector& f, int scale_index) const {
  const auto b = block(scale_index);
  return b.head<kNumFeatures>().dot(f) + b[kNumFeatures];
}

void DetectorParams::validate() const {
  if (scales.empty()) throw ConfigError("detector needs at least one anchor scale");
  if (weights.size() != kBlock * static_cast<Eigen::Index>(scales.size()))
    throw ConfigError("detector weight vector does not match scale count");
  if (!weights.allFinite()) throw ConfigError("detector weights must be finite");
  for (double s : scales)
    if (!(s > 0.0)) throw ConfigError("anchor scales must be positive");
}

namespace {

struct AxisRange {
  int lo, hi;  // inclusive
  bool empty() const { return hi < lo; }
  int count() const { return empty() ? 0 : hi - lo + 1; }
};

AxisRange axis_range(double center, double half, int n) {
  return {std::max(static_cast<int>(std::ceil(center - half)), 0),
          std::min(static_cast<int>(std::floor(center + half)), n - 1)};
}

struct BoxRanges {
  AxisRange r[3];
  bool empty() const { return r[0].empty() || r[1].empty() || r[2].empty(); }
  double count() const { return double(r[0].count()) * r[1].count() * r[2].count(); }
  bool contains(int x, int y, int z) const {
    return x >= r[0].lo && x <= r[0].hi && y >= r[1].lo && y <= r[1].hi && z >= r[2].lo && z <= r[2].hi;
  }
};

BoxRanges ranges_for(const Volume& vol, const Vec3& c, double half) {
  BoxRanges b;
  for (int k = 0; k < 3; ++k) b.r[k] = axis_range(c[k], half, vol.dims()[k]);
  return b;
}

FeatureVector assemble(double in_sum, double in_sumsq, double in_n, double in_max, double shell_sum, double shell_n,
                       const Vec3& center, double diameter, const Region& lung) {
  FeatureVector f;
  const double mean = in_sum / in_n;
  f[0] = mean;
  f[1] = in_max;
  f[2] = std::sqrt(std::max(in_sumsq / in_n - mean * mean, 0.0));
  f[3] = shell_n > 0.0 ? mean - shell_sum / shell_n : 0.0;
  f.segment<3>(4) = ((center.array() - lung.lo.cast<double>()) / lung.extent()).matrix();
  f[7] = std::log(diameter);
  return f;
}

// Summed-volume tables for intensity and squared intensity.
class IntegralVolume {
 public:
  explicit IntegralVolume(const Volume& vol) : n_(vol.dims() + 1) {
    sum_.assign(static_cast<std::size_t>(n_.prod()), 0.0);
    sq_.assign(sum_.size(), 0.0);
    for (int z = 1; z < n_.z(); ++z)
      for (int y = 1; y < n_.y(); ++y)
        for (int x = 1; x < n_.x(); ++x) {
          const double v = vol(x - 1, y - 1, z - 1);
          accumulate(sum_, x, y, z, v);
          accumulate(sq_, x, y, z, v * v);
        }
  }

  double sum(const BoxRanges& b) const { return query(sum_, b); }
  double sumsq(const BoxRanges& b) const { return query(sq_, b); }

 private:
  std::size_t at(int x, int y, int z) const { return x + static_cast<std::size_t>(n_.x()) * (y + static_cast<std::size_t>(n_.y()) * z); }

  void accumulate(std::vector<double>& t, int x, int y, int z, double v) const {
    t[at(x, y, z)] = v + t[at(x - 1, y, z)] + t[at(x, y - 1, z)] + t[at(x, y, z - 1)] - t[at(x - 1, y - 1, z)] -
                     t[at(x - 1, y, z - 1)] - t[at(x, y - 1, z - 1)] + t[at(x - 1, y - 1, z - 1)];
  }

  double query(const std::vector<double>& t, const BoxRanges& b) const {
    if (b.empty()) return 0.0;
    const int x0 = b.r[0].lo, x1 = b.r[0].hi + 1, y0 = b.r[1].lo, y1 = b.r[1].hi + 1, z0 = b.r[2].lo,
              z1 = b.r[2].hi + 1;
    return t[at(x1, y1, z1)] - t[at(x0, y1, z1)] - t[at(x1, y0, z1)] - t[at(x1, y1, z0)] + t[at(x0, y0, z1)] +
           t[at(x0, y1, z0)] + t[at(x1, y0, z0)] - t[at(x0, y0, z0)];
  }

  Index3 n_;
  std::vector<double> sum_, sq_;
};

double box_max(const Volume& vol, const BoxRanges& b) {
  float m = 0.0f;
  for (int z = b.r[2].lo; z <= b.r[2].hi; ++z)
    for (int y = b.r[1].lo; y <= b.r[1].hi; ++y)
      for (int x = b.r[0].lo; x <= b.r[0].hi; ++x) m = std::max(m, vol(x, y, z));
  return m;
}

}  // namespace

FeatureVector extract_features(const Volume& volume, const NoduleBox& box) {
  if (!(box.diameter > 0.0)) throw ConfigError("degenerate box: diameter must be positive");
  const BoxRanges inner = ranges_for(volume, box.center, box.radius());
  if (inner.empty()) throw DataError("box does not intersect the grid");
  const BoxRanges outer = ranges_for(volume, box.center, box.diameter);

  double in_sum = 0.0, in_sq = 0.0, in_max = 0.0, shell_sum = 0.0, shell_n = 0.0;
  for (int z = outer.r[2].lo; z <= outer.r[2].hi; ++z)
    for (int y = outer.r[1].lo; y <= outer.r[1].hi; ++y)
      for (int x = outer.r[0].lo; x <= outer.r[0].hi; ++x) {
        const double v = volume(x, y, z);
        if (inner.contains(x, y, z)) {
          in_sum += v;
          in_sq += v * v;
          in_max = std::max(in_max, v);
        } else {
          shell_sum += v;
          shell_n += 1.0;
        }
      }
  return assemble(in_sum, in_sq, inner.count(), in_max, shell_sum, shell_n, box.center, box.diameter,
                  volume.lung_region());
}

AnchorSet build_anchors(const Volume& volume, std::span<const double> scales, int stride) {
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (scales.empty()) throw ConfigError("at least one anchor scale required");
  const Region& lung = volume.lung_region();
  const IntegralVolume integral(volume);

  AnchorSet set;
  std::vector<Vec3> centers;
  for (int z = lung.lo.z() + stride / 2; z < lung.hi.z(); z += stride)
    for (int y = lung.lo.y() + stride / 2; y < lung.hi.y(); y += stride)
      for (int x = lung.lo.x() + stride / 2; x < lung.hi.x(); x += stride) centers.emplace_back(x, y, z);
  set.grid_points = static_cast<int>(centers.size());

  const auto n = static_cast<Eigen::Index>(centers.size() * scales.size());
  set.features.resize(n, kNumFeatures);
  set.boxes.reserve(static_cast<std::size_t>(n));
  set.scale_index.reserve(static_cast<std::size_t>(n));
  Eigen::Index row = 0;
  for (const Vec3& c : centers)
    for (std::size_t s = 0; s < scales.size(); ++s, ++row) {
      const NoduleBox box{c, scales[s]};
      const BoxRanges inner = ranges_for(volume, c, box.radius());
      const BoxRanges outer = ranges_for(volume, c, box.diameter);
      const double in_sum = integral.sum(inner);
      const double in_n = inner.count();
      const double shell_n = outer.count() - in_n;
      set.features.row(row) = assemble(in_sum, integral.sumsq(inner), in_n, box_max(volume, inner),
                                       integral.sum(outer) - in_sum, shell_n, c, box.diameter, lung)
                                  .transpose();
      set.boxes.push_back(box);
      set.scale_index.push_back(static_cast<int>(s));
    }
  return set;
}

Eigen::VectorXd score_anchors(const AnchorSet& anchors, const DetectorParams& params) {
  Eigen::VectorXd logits(anchors.size());
  for (int s = 0; s < params.scale_count(); ++s) {
    const auto b = params.block(s);
    const Eigen::Matrix<double, kNumFeatures, 1> w = b.head<kNumFeatures>();
    for (int i = 0; i < anchors.size(); ++i)
      if (anchors.scale_index[i] == s) logits[i] = anchors.features.row(i).dot(w) + b[kNumFeatures];
  }
  return logits;
}

std::vector<Proposal> to_proposals(const AnchorSet& anchors, const Eigen::VectorXd& logits) {
  std::vector<Proposal> out;
  out.reserve(static_cast<std::size_t>(anchors.size()));
  for (int i = 0; i < anchors.size(); ++i) out.push_back({anchors.boxes[i], logits[i], i});
  return out;
}

std::vector<Proposal> propose(const Volume& volume, const DetectorParams& params, int stride) {
  params.validate();
  const AnchorSet anchors = build_anchors(volume, params.scales, stride);
  return to_proposals(anchors, score_anchors(anchors, params));
}

LossGradient supervised_loss(std::span<const Example> positives, std::span<const Example> negatives,
                             const DetectorParams& params) {
  if (positives.empty() && negatives.empty()) throw ConfigError("supervised_loss needs at least one example");
  LossGradient out{0.0, Eigen::VectorXd::Zero(params.weights.size())};
  const auto add = [&](std::span<const Example> examples, bool positive) {
    if (examples.empty()) return;
    const double inv = 1.0 / static_cast<double>(examples.size());
    for (const Example& e : examples) {
      const double l = params.logit(e.features, e.scale_index);
      // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
      out.loss += inv * (positive ? softplus(-l) : softplus(l));
      const double dl = inv * (positive ? sigmoid(l) - 1.0 : sigmoid(l));
      auto g = out.gradient.segment<DetectorParams::kBlock>(DetectorParams::kBlock * e.scale_index);
      g.head<kNumFeatures>() += dl * e.features;
      g[kNumFeatures] += dl;
    }
  };
  add(positives, true);
  add(negatives, false);
  return out;
}

LossGradient supervised_loss(const Volume& volume, std::span<const NoduleBox> positives,
                             std::span<const NoduleBox> negatives, const DetectorParams& params) {
  const auto to_examples = [&](std::span<const NoduleBox> boxes) {
    std::vector<Example> ex;
    for (const NoduleBox& b : boxes) ex.push_back({extract_features(volume, b), params.scale_index_for(b.diameter)});
    return ex;
  };
  return supervised_loss(to_examples(positives), to_examples(negatives), params);
}

DetectorParams sgd_step(const DetectorParams& params, const Eigen::VectorXd& gradient, double learning_rate) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (gradient.size() != params.weights.size()) throw ConfigError("gradient size mismatch");
  if (!gradient.allFinite()) throw NumericError("non-finite detector gradient");
  DetectorParams next = params;
  next.weights -= learning_rate * gradient;
  return next;
}

Selection select_supervised(const AnchorSet& anchors, const Eigen::VectorXd& logits,
                            std::span<const NoduleBox> truth) {
  Selection sel;
  std::vector<int> rest;
  for (int i = 0; i < anchors.size(); ++i) {
    const Vec3& c = anchors.boxes[i].center;
    const bool hit = std::any_of(truth.begin(), truth.end(),
                                 [&](const NoduleBox& t) { return (c - t.center).norm() < t.radius(); });
    (hit ? sel.positives : rest).push_back(i);
  }
  const std::size_t k = std::min(rest.size(), std::max<std::size_t>(2, 2 * sel.positives.size()));
  std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(k), rest.end(), [&](int a, int b) {
    return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
  });
  sel.negatives.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(k));
  return sel;
}

std::vector<Example> gather_examples(const AnchorSet& anchors, std::span<const int> anchor_ids) {
  std::vector<Example> out;
  out.reserve(anchor_ids.size());
  for (int id : anchor_ids) out.push_back({anchors.features.row(id).transpose(), anchors.scale_index[id]});
  return out;
}

}  // namespace deepem
