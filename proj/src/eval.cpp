#include "deepem/eval.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <tuple>

#include "deepem/error.hpp"

namespace deepem {

namespace {

bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.scan_id != b.scan_id) return a.scan_id < b.scan_id;
  const auto ka = std::make_tuple(a.box.center.x(), a.box.center.y(), a.box.center.z(), a.box.diameter);
  const auto kb = std::make_tuple(b.box.center.x(), b.box.center.y(), b.box.center.z(), b.box.diameter);
  return ka < kb;
}

}  // namespace

std::optional<int> match(const Detection& detection, std::span<const NoduleBox> truths) {
  std::optional<int> best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const double dist = (detection.box.center - truths[i].center).norm();
    if (dist < truths[i].radius() && dist < best_dist) {
      best = static_cast<int>(i);
      best_dist = dist;
    }
  }
  return best;
}

FrocResult froc(std::span<const Detection> detections, std::span<const std::vector<NoduleBox>> truths) {
  if (truths.empty()) throw ConfigError("froc needs at least one scan");
  const std::size_t total =
      std::accumulate(truths.begin(), truths.end(), std::size_t{0}, [](std::size_t n, const auto& t) { return n + t.size(); });
  if (total == 0) throw DataError("froc needs at least one truth box");

  std::vector<Detection> order(detections.begin(), detections.end());
  for (const Detection& d : order)
    if (d.scan_id < 0 || static_cast<std::size_t>(d.scan_id) >= truths.size())
      throw DataError("detection refers to an unknown scan");
  std::sort(order.begin(), order.end(), detection_before);

  std::vector<std::vector<bool>> credited(truths.size());
  for (std::size_t s = 0; s < truths.size(); ++s) credited[s].assign(truths[s].size(), false);

  const double scans = static_cast<double>(truths.size());
  FrocResult result;
  result.curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Detection& d = order[i];
    const auto& scan_truth = truths[static_cast<std::size_t>(d.scan_id)];
    auto& scan_credit = credited[static_cast<std::size_t>(d.scan_id)];
    int chosen = -1;
    bool qualifies = false;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < scan_truth.size(); ++t) {
      const double dist = (d.box.center - scan_truth[t].center).norm();
      if (dist >= scan_truth[t].radius()) continue;
      qualifies = true;
      if (!scan_credit[t] && dist < best) {
        best = dist;
        chosen = static_cast<int>(t);
      }
    }
    if (chosen >= 0) {
      scan_credit[static_cast<std::size_t>(chosen)] = true;
      ++tp;
    } else if (!qualifies) {
      ++fp;
    }
    if (i + 1 == order.size() || order[i + 1].score != d.score)
      result.curve.push_back({d.score, static_cast<double>(fp) / scans, static_cast<double>(tp) / static_cast<double>(total)});
  }

  for (std::size_t k = 0; k < kFrocFpRates.size(); ++k) {
    double sens = 0.0;
    for (const CurvePoint& p : result.curve)
      if (p.fp_per_scan <= kFrocFpRates[k]) sens = std::max(sens, p.sensitivity);
    result.sensitivities[k] = sens;
  }
  result.average = std::accumulate(result.sensitivities.begin(), result.sensitivities.end(), 0.0) /
                   static_cast<double>(kFrocFpRates.size());
  return result;
}

void write_froc_csv(const FrocResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  out << "threshold,fp_per_scan,sensitivity\n";
  for (const CurvePoint& p : result.curve) out << p.threshold << ',' << p.fp_per_scan << ',' << p.sensitivity << '\n';
  out << "\nfp_rate,sensitivity\n";
  for (std::size_t k = 0; k < kFrocFpRates.size(); ++k) out << kFrocFpRates[k] << ',' << result.sensitivities[k] << '\n';
  out << "average," << result.average << '\n';
}

}  // namespace deepem
