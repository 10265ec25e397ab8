#include "deepem/synthvol.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deepem/error.hpp"

namespace deepem {

Volume::Volume(Index3 dims, Region lung)
    : dims_(dims), lung_(lung), voxels_(Eigen::ArrayXf::Zero(dims.cast<std::int64_t>().prod())) {}

void Volume::validate() const {
  if ((dims_ < 8).any()) throw ConfigError("volume dims must be >= 8 on every axis");
  if ((lung_.lo < 0).any() || (lung_.hi > dims_).any() || (lung_.hi <= lung_.lo).any())
    throw ConfigError("lung region must be a nonempty box inside the grid");
  if (voxels_.size() != dims_.cast<std::int64_t>().prod())
    throw ConfigError("voxel payload does not match dims");
  if (voxels_.size() > 0 && (voxels_.minCoeff() < 0.0f || voxels_.maxCoeff() > 1.0f))
    throw ConfigError("intensity outside [0,1]");
}

bool Volume::operator==(const Volume& o) const {
  return (dims_ == o.dims_).all() && lung_ == o.lung_ && voxels_.size() == o.voxels_.size() &&
         (voxels_ == o.voxels_).all();
}

void GeneratorConfig::validate() const {
  if ((dims < 8).any()) throw ConfigError("generator dims must be >= 8");
  if (lung_margin < 0 || (dims - 2 * lung_margin < 2).any())
    throw ConfigError("lung margin leaves no lung region");
  if (nodule_count_min < 0 || nodule_count_max < nodule_count_min)
    throw ConfigError("invalid nodule count range");
  if (!(diameter_min > 0.0) || diameter_max < diameter_min)
    throw ConfigError("invalid diameter range");
  if (contrast_max < contrast_min) throw ConfigError("invalid contrast range");
  if (!(sigma_gen > 0.0) || mu < 0.0) throw ConfigError("invalid weak-label noise parameters");
  if (noise_level < 0.0 || max_placement_retries < 1) throw ConfigError("invalid generator settings");
}

namespace {

double segment_distance_sq(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).squaredNorm();
}

Vec3 uniform_point(const Eigen::Array3d& lo, const Eigen::Array3d& hi, Rng& rng) {
  Vec3 p;
  for (int k = 0; k < 3; ++k) p[k] = std::uniform_real_distribution<double>(lo[k], hi[k])(rng);
  return p;
}

}  // namespace

LabeledScan generate_scan(std::uint64_t seed, const GeneratorConfig& cfg) {
  cfg.validate();
  Rng rng(seed);

  const Region lung{Index3::Constant(cfg.lung_margin), cfg.dims - cfg.lung_margin};
  LabeledScan scan;
  scan.volume = Volume(cfg.dims, lung);

  // Nodule placement first so the truth does not depend on texture settings.
  const int count = std::uniform_int_distribution<int>(cfg.nodule_count_min, cfg.nodule_count_max)(rng);
  const Eigen::Array3d place_lo = lung.lo.cast<double>();
  const Eigen::Array3d place_hi = (lung.hi - 1).cast<double>();
  std::vector<double> contrasts;
  for (int n = 0; n < count; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_placement_retries && !placed; ++attempt) {
      NoduleBox box;
      box.diameter = std::uniform_real_distribution<double>(cfg.diameter_min, cfg.diameter_max)(rng);
      box.center = uniform_point(place_lo, place_hi, rng);
      placed = std::all_of(scan.truth.begin(), scan.truth.end(), [&](const NoduleBox& other) {
        return (other.center - box.center).norm() > other.radius() + box.radius();
      });
      if (placed) scan.truth.push_back(box);
    }
    if (!placed)
      throw ConfigError("could not place " + std::to_string(count) + " non-overlapping nodules");
    contrasts.push_back(std::uniform_real_distribution<double>(cfg.contrast_min, cfg.contrast_max)(rng));
  }

  struct Blob {
    Vec3 center;
    double inv_two_var;
    double amplitude;
  };
  std::vector<Blob> texture;
  const Eigen::Array3d grid_hi = (cfg.dims - 1).cast<double>();
  for (int k = 0; k < cfg.texture_blobs; ++k) {
    const Vec3 c = uniform_point(Eigen::Array3d::Zero(), grid_hi, rng);
    const double sd = std::uniform_real_distribution<double>(3.0, 6.0)(rng);
    const double amp = std::uniform_real_distribution<double>(-1.0, 1.0)(rng) * cfg.texture_amplitude;
    texture.push_back({c, 1.0 / (2.0 * sd * sd), amp});
  }
  struct Vessel {
    Vec3 a, b;
    double amplitude;
  };
  std::vector<Vessel> vessels;
  for (int k = 0; k < cfg.vessel_count; ++k) {
    const Vec3 a = uniform_point(Eigen::Array3d::Zero(), grid_hi, rng);
    const Vec3 b = uniform_point(Eigen::Array3d::Zero(), grid_hi, rng);
    const double amp = std::uniform_real_distribution<double>(0.5, 1.0)(rng) * cfg.vessel_amplitude;
    vessels.push_back({a, b, amp});
  }
  const double vessel_inv = 1.0 / (2.0 * cfg.vessel_radius * cfg.vessel_radius);

  std::normal_distribution<double> noise(0.0, 1.0);
  Volume& vol = scan.volume;
  for (int z = 0; z < cfg.dims.z(); ++z)
    for (int y = 0; y < cfg.dims.y(); ++y)
      for (int x = 0; x < cfg.dims.x(); ++x) {
        const Vec3 p(x, y, z);
        double v = cfg.background;
        for (const Blob& b : texture) v += b.amplitude * std::exp(-(p - b.center).squaredNorm() * b.inv_two_var);
        for (const Vessel& s : vessels) v += s.amplitude * std::exp(-segment_distance_sq(p, s.a, s.b) * vessel_inv);
        for (std::size_t n = 0; n < scan.truth.size(); ++n) {
          const double sd = scan.truth[n].diameter / 4.0;
          v += contrasts[n] * std::exp(-(p - scan.truth[n].center).squaredNorm() / (2.0 * sd * sd));
        }
        v += cfg.noise_level * noise(rng);
        vol(x, y, z) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }

  for (const NoduleBox& box : scan.truth) scan.weak.push_back(weaken(box, vol, cfg.sigma_gen, cfg.mu, rng));
  return scan;
}

int lobe_of(const Vec3& point, const Region& lung) {
  if (!lung.contains(point)) throw DataError("point outside lung region");
  const Eigen::Array3d lo = lung.lo.cast<double>();
  const Eigen::Array3d size = lung.extent();
  const int side = point.x() <= lo.x() + size.x() / 2.0 ? 0 : 1;
  const double rel_z = point.z() - lo.z();
  int third = 2;
  if (rel_z <= size.z() / 3.0)
    third = 0;
  else if (rel_z <= 2.0 * size.z() / 3.0)
    third = 1;
  return 1 + 3 * side + third;
}

int lobe_of(const Vec3& point, const Volume& volume) { return lobe_of(point, volume.lung_region()); }

WeakLabel weaken(const NoduleBox& truth, const Volume& volume, double sigma_gen, double mu, Rng& rng) {
  if (!(sigma_gen > 0.0)) throw ConfigError("sigma_gen must be positive");
  const double magnitude = std::abs(std::normal_distribution<double>(0.0, sigma_gen)(rng)) +
                           (mu > 0.0 ? std::uniform_real_distribution<double>(0.0, mu)(rng) : 0.0);
  const double sign = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  const long slice = std::lround(truth.center.z() + sign * magnitude);
  WeakLabel label;
  label.central_slice = static_cast<int>(std::clamp<long>(slice, 0, volume.dims().z() - 1));
  label.lobe = lobe_of(truth.center, volume);
  return label;
}

}  // namespace deepem
