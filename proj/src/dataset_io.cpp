#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string_view>

#include <json.hpp>

#include "deepem/error.hpp"
#include "deepem/synthvol.hpp"

namespace deepem {

namespace {

constexpr std::string_view kMagic = "WEAKEMV1";
constexpr std::size_t kFixedHeader = 8 + 4 * 4;
constexpr std::size_t kPerScanHeader = 7 * 4;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::string& out, T v) {
  v = to_little(v);
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t pos) {
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  return to_little(v);
}

nlohmann::json annotations_json(const LabeledScan& scan) {
  nlohmann::json line;
  line["truth"] = nlohmann::json::array();
  for (const NoduleBox& b : scan.truth)
    line["truth"].push_back({{"x", b.center.x()}, {"y", b.center.y()}, {"z", b.center.z()}, {"d", b.diameter}});
  line["weak"] = nlohmann::json::array();
  for (const WeakLabel& w : scan.weak) line["weak"].push_back({{"lobe", w.lobe}, {"z", w.central_slice}});
  return line;
}

}  // namespace

void save_dataset(std::span<const LabeledScan> scans, const std::filesystem::path& path) {
  const Index3 dims = scans.empty() ? Index3::Constant(8) : scans.front().volume.dims();
  for (const LabeledScan& s : scans) {
    if ((s.volume.dims() != dims).any()) throw DataError("all scans in a dataset must share dims");
    s.volume.validate();
  }
  const std::size_t voxels = static_cast<std::size_t>(dims.cast<std::int64_t>().prod());
  const std::size_t payload_start = kFixedHeader + kPerScanHeader * scans.size();
  if (payload_start + voxels * 4 * scans.size() > static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max()))
    throw DataError("dataset too large for 32-bit offsets");

  std::string out;
  out.reserve(payload_start + voxels * 4 * scans.size());
  out.append(kMagic);
  for (int k = 0; k < 3; ++k) put<std::int32_t>(out, dims[k]);
  put<std::int32_t>(out, static_cast<std::int32_t>(scans.size()));
  for (std::size_t i = 0; i < scans.size(); ++i) {
    put<std::int32_t>(out, static_cast<std::int32_t>(payload_start + i * voxels * 4));
    const Region& lung = scans[i].volume.lung_region();
    for (int k = 0; k < 3; ++k) put<std::int32_t>(out, lung.lo[k]);
    for (int k = 0; k < 3; ++k) put<std::int32_t>(out, lung.hi[k]);
  }
  for (const LabeledScan& s : scans)
    for (Eigen::Index v = 0; v < s.volume.voxels().size(); ++v) put<float>(out, s.volume.voxels()[v]);
  for (const LabeledScan& s : scans) {
    out.append(annotations_json(s).dump());
    out.push_back('\n');
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw DataError("cannot open for writing: " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw DataError("write failed: " + path.string());
}

std::vector<LabeledScan> load_dataset(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open dataset: " + path.string());
  const std::string in((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

  if (in.size() < kMagic.size()) throw HeaderError("dataset header missing");
  if (std::string_view(in.data(), kMagic.size()) != kMagic) throw VersionError("unrecognized magic/version");
  if (in.size() < kFixedHeader) throw HeaderError("dataset header truncated");

  Index3 dims;
  for (int k = 0; k < 3; ++k) dims[k] = get<std::int32_t>(in, 8 + 4 * k);
  const std::int32_t count = get<std::int32_t>(in, 20);
  if ((dims < 8).any() || count < 0) throw HeaderError("invalid dims or scan count");
  const std::size_t payload_start = kFixedHeader + kPerScanHeader * static_cast<std::size_t>(count);
  if (in.size() < payload_start) throw HeaderError("per-scan header table truncated");

  const std::size_t voxels = static_cast<std::size_t>(dims.cast<std::int64_t>().prod());
  std::vector<LabeledScan> scans(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < scans.size(); ++i) {
    const std::size_t rec = kFixedHeader + kPerScanHeader * i;
    const auto offset = static_cast<std::size_t>(get<std::int32_t>(in, rec));
    if (offset != payload_start + i * voxels * 4) throw HeaderError("inconsistent payload offset");
    Region lung;
    for (int k = 0; k < 3; ++k) lung.lo[k] = get<std::int32_t>(in, rec + 4 + 4 * k);
    for (int k = 0; k < 3; ++k) lung.hi[k] = get<std::int32_t>(in, rec + 16 + 4 * k);
    if (offset + voxels * 4 > in.size()) throw TruncatedError("voxel payload truncated");
    Volume vol(dims, lung);
    for (std::size_t v = 0; v < voxels; ++v) vol.voxels()[static_cast<Eigen::Index>(v)] = get<float>(in, offset + 4 * v);
    try {
      vol.validate();
    } catch (const ConfigError& e) {
      throw HeaderError(std::string("invalid scan record: ") + e.what());
    }
    scans[i].volume = std::move(vol);
  }

  std::istringstream lines(in.substr(payload_start + voxels * 4 * scans.size()));
  std::string line;
  for (LabeledScan& scan : scans) {
    if (!std::getline(lines, line)) throw TruncatedError("annotation section truncated");
    try {
      const auto j = nlohmann::json::parse(line);
      for (const auto& t : j.at("truth"))
        scan.truth.push_back({Vec3(t.at("x").get<double>(), t.at("y").get<double>(), t.at("z").get<double>()),
                              t.at("d").get<double>()});
      for (const auto& w : j.at("weak")) scan.weak.push_back({w.at("lobe").get<int>(), w.at("z").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed annotation line: ") + e.what());
    }
  }
  return scans;
}

}  // namespace deepem
