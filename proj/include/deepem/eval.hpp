#ifndef DEEPEM_EVAL_HPP_
#define DEEPEM_EVAL_HPP_

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "deepem/synthvol.hpp"

namespace deepem {

inline constexpr std::array<double, 7> kFrocFpRates{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct Detection {
  int scan_id = 0;
  NoduleBox box;
  double score = 0.0;
};

struct CurvePoint {
  double threshold = 0.0;
  double fp_per_scan = 0.0;
  double sensitivity = 0.0;
};

struct FrocResult {
  std::array<double, 7> sensitivities{};
  double average = 0.0;  // in [0,1]
  std::vector<CurvePoint> curve;

  double percent() const { return 100.0 * average; }
};

/// Nearest truth whose radius strictly exceeds the center distance.
std::optional<int> match(const Detection& detection, std::span<const NoduleBox> truths);

/// Detections are swept in descending score (ties: scan_id, then box coordinates).
/// A detection credits the nearest still-uncredited qualifying truth, is ignored when
/// every qualifying truth is already credited, and is a false positive otherwise.
/// truths[s] holds the truth boxes of scan s. Throws DataError when there are no truths.
FrocResult froc(std::span<const Detection> detections, std::span<const std::vector<NoduleBox>> truths);

/// Curve rows followed by the seven operating points and the average.
void write_froc_csv(const FrocResult& result, const std::filesystem::path& path);

}  // namespace deepem

#endif  // DEEPEM_EVAL_HPP_
