#ifndef DEEPEM_SYNTHVOL_HPP_
#define DEEPEM_SYNTHVOL_HPP_

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace deepem {

using Vec3 = Eigen::Vector3d;
using Index3 = Eigen::Array3i;
using Rng = std::mt19937_64;

inline constexpr int kNumLobes = 6;

/// Axis-aligned box in voxel indices, half-open: [lo, hi).
/// As a continuous region it is the closed box [lo, hi].
struct Region {
  Index3 lo = Index3::Zero();
  Index3 hi = Index3::Zero();

  Eigen::Array3d extent() const { return (hi - lo).cast<double>(); }
  bool contains(const Vec3& p) const {
    return (p.array() >= lo.cast<double>()).all() &&
           (p.array() <= hi.cast<double>()).all();
  }
  std::int64_t voxel_count() const { return (hi - lo).cast<std::int64_t>().prod(); }
  bool operator==(const Region& o) const { return (lo == o.lo).all() && (hi == o.hi).all(); }
};

/// Scalar intensity grid, x-fastest storage, with a declared lung region.
class Volume {
 public:
  Volume() = default;
  Volume(Index3 dims, Region lung);

  const Index3& dims() const { return dims_; }
  const Region& lung_region() const { return lung_; }
  /// (x_I, y_I, z_I): size of the lung region in voxels.
  Eigen::Array3d lung_size() const { return lung_.extent(); }

  std::int64_t index(int x, int y, int z) const {
    return x + static_cast<std::int64_t>(dims_.x()) * (y + static_cast<std::int64_t>(dims_.y()) * z);
  }
  float operator()(int x, int y, int z) const { return voxels_[index(x, y, z)]; }
  float& operator()(int x, int y, int z) { return voxels_[index(x, y, z)]; }

  const Eigen::ArrayXf& voxels() const { return voxels_; }
  Eigen::ArrayXf& voxels() { return voxels_; }

  /// True when p lies in the continuous grid [0, n-1] on every axis.
  bool contains(const Vec3& p) const {
    return (p.array() >= 0.0).all() && (p.array() <= (dims_ - 1).cast<double>()).all();
  }

  /// Throws ConfigError when a structural invariant is broken.
  void validate() const;

  bool operator==(const Volume& o) const;

 private:
  Index3 dims_ = Index3::Zero();
  Region lung_;
  Eigen::ArrayXf voxels_;
};

struct NoduleBox {
  Vec3 center = Vec3::Zero();
  double diameter = 0.0;

  double radius() const { return 0.5 * diameter; }
  bool operator==(const NoduleBox& o) const { return center == o.center && diameter == o.diameter; }
};

/// EMR-style annotation: lobe id in 1..6 and central slice index.
struct WeakLabel {
  int lobe = 1;
  int central_slice = 0;

  bool operator==(const WeakLabel&) const = default;
};

/// Generated scans always carry one weak label per truth box (same order).
/// Training code for the weak split reads only `weak`.
struct LabeledScan {
  Volume volume;
  std::vector<NoduleBox> truth;
  std::vector<WeakLabel> weak;

  bool operator==(const LabeledScan&) const = default;
};

struct GeneratorConfig {
  Index3 dims{32, 32, 32};
  int lung_margin = 2;

  int nodule_count_min = 1;
  int nodule_count_max = 3;
  double diameter_min = 4.0;
  double diameter_max = 8.0;
  double contrast_min = 0.3;
  double contrast_max = 0.6;

  double background = 0.2;
  double noise_level = 0.05;
  int texture_blobs = 6;
  double texture_amplitude = 0.06;
  int vessel_count = 3;
  double vessel_amplitude = 0.3;
  double vessel_radius = 0.8;

  // Weak-label slice noise.
  double sigma_gen = 2.0;
  double mu = 1.63;

  int max_placement_retries = 500;

  void validate() const;
};

/// Deterministic in (seed, cfg). Throws ConfigError when nodules cannot be placed.
LabeledScan generate_scan(std::uint64_t seed, const GeneratorConfig& cfg);

/// Lobe id for a point in the lung region: x-halves (low x -> lobes 1..3) times
/// z-thirds (low z -> upper). Ties go to the lower-index region.
int lobe_of(const Vec3& point, const Volume& volume);
int lobe_of(const Vec3& point, const Region& lung);

/// Slice offset magnitude: half-Gaussian(sigma_gen) plus uniform jitter in [0, mu],
/// random sign, rounded and clamped to the slice range.
WeakLabel weaken(const NoduleBox& truth, const Volume& volume, double sigma_gen, double mu, Rng& rng);

// Dataset container ("WEAKEMV1"); see README for the byte layout.
void save_dataset(std::span<const LabeledScan> scans, const std::filesystem::path& path);
std::vector<LabeledScan> load_dataset(const std::filesystem::path& path);

}  // namespace deepem

#endif  // DEEPEM_SYNTHVOL_HPP_
