#include "deepem/checkpoint.hpp"

#include <fstream>

#include "deepem/error.hpp"

namespace deepem {

using nlohmann::json;

namespace {

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

json index3(const Index3& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace

json to_json(const ModelParams& p) {
  json theta = json::array();
  for (int r = 0; r < kNumLobes; ++r) {
    json row = json::array();
    for (int c = 0; c < 4; ++c) row.push_back(p.lobe.theta(r, c));
    theta.push_back(row);
  }
  return {{"detector",
           {{"scales", p.detector.scales},
            {"weights", std::vector<double>(p.detector.weights.data(), p.detector.weights.data() + p.detector.weights.size())}}},
          {"lobe", {{"theta", theta}}},
          {"slice", {{"sigma", p.slice.sigma}, {"mu", p.slice.mu}}}};
}

ModelParams model_params_from_json(const json& j) {
  try {
    ModelParams p;
    p.detector.scales = j.at("detector").at("scales").get<std::vector<double>>();
    const auto w = j.at("detector").at("weights").get<std::vector<double>>();
    p.detector.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    const auto& theta = j.at("lobe").at("theta");
    if (theta.size() != kNumLobes) throw DataError("lobe theta must have 6 rows");
    for (int r = 0; r < kNumLobes; ++r) {
      if (theta.at(r).size() != 4) throw DataError("lobe theta rows must have 4 entries");
      for (int c = 0; c < 4; ++c) p.lobe.theta(r, c) = theta.at(r).at(c).get<double>();
    }
    p.slice.sigma = j.at("slice").at("sigma").get<double>();
    p.slice.mu = j.at("slice").at("mu").get<double>();
    p.detector.validate();
    p.slice.validate();
    return p;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model parameters: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("invalid model parameters: ") + e.what());
  }
}

json to_json(const EmConfig& c) {
  json j = {{"logit_threshold", c.logit_threshold},
            {"nms_iou", c.nms_iou},
            {"samples_per_label", c.samples_per_label},
            {"weak_fraction", c.weak_fraction},
            {"inference_mode", to_string(c.inference_mode)},
            {"detector_lr", c.detector_lr},
            {"lobe_lr", c.lobe_lr},
            {"lr_decay", c.lr_decay},
            {"init_epochs", c.init_epochs},
            {"em_epochs", c.em_epochs},
            {"stride", c.stride},
            {"anchor_scales", c.anchor_scales},
            {"mu", c.mu},
            {"sigma_fallback", c.sigma_fallback}};
  j["neg_slice_margin"] = c.neg_slice_margin ? json(*c.neg_slice_margin) : json(nullptr);
  return j;
}

EmConfig em_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("em config must be a JSON object");
  EmConfig c;
  read_if(j, "logit_threshold", c.logit_threshold);
  read_if(j, "nms_iou", c.nms_iou);
  read_if(j, "samples_per_label", c.samples_per_label);
  read_if(j, "weak_fraction", c.weak_fraction);
  read_if(j, "detector_lr", c.detector_lr);
  read_if(j, "lobe_lr", c.lobe_lr);
  read_if(j, "lr_decay", c.lr_decay);
  read_if(j, "init_epochs", c.init_epochs);
  read_if(j, "em_epochs", c.em_epochs);
  read_if(j, "stride", c.stride);
  read_if(j, "anchor_scales", c.anchor_scales);
  read_if(j, "mu", c.mu);
  read_if(j, "sigma_fallback", c.sigma_fallback);
  if (j.contains("inference_mode")) {
    std::string mode;
    read_if(j, "inference_mode", mode);
    c.inference_mode = inference_mode_from_string(mode);
  }
  if (j.contains("neg_slice_margin") && !j.at("neg_slice_margin").is_null()) {
    double m = 0.0;
    read_if(j, "neg_slice_margin", m);
    c.neg_slice_margin = m;
  }
  c.validate();
  return c;
}

json to_json(const GeneratorConfig& c) {
  return {{"dims", index3(c.dims)},
          {"lung_margin", c.lung_margin},
          {"nodule_count_min", c.nodule_count_min},
          {"nodule_count_max", c.nodule_count_max},
          {"diameter_min", c.diameter_min},
          {"diameter_max", c.diameter_max},
          {"contrast_min", c.contrast_min},
          {"contrast_max", c.contrast_max},
          {"background", c.background},
          {"noise_level", c.noise_level},
          {"texture_blobs", c.texture_blobs},
          {"texture_amplitude", c.texture_amplitude},
          {"vessel_count", c.vessel_count},
          {"vessel_amplitude", c.vessel_amplitude},
          {"vessel_radius", c.vessel_radius},
          {"sigma_gen", c.sigma_gen},
          {"mu", c.mu},
          {"max_placement_retries", c.max_placement_retries}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("generator config must be a JSON object");
  GeneratorConfig c;
  if (j.contains("dims")) {
    std::vector<int> d;
    read_if(j, "dims", d);
    if (d.size() != 3) throw ConfigError("dims must have three entries");
    c.dims = Index3(d[0], d[1], d[2]);
  }
  read_if(j, "lung_margin", c.lung_margin);
  read_if(j, "nodule_count_min", c.nodule_count_min);
  read_if(j, "nodule_count_max", c.nodule_count_max);
  read_if(j, "diameter_min", c.diameter_min);
  read_if(j, "diameter_max", c.diameter_max);
  read_if(j, "contrast_min", c.contrast_min);
  read_if(j, "contrast_max", c.contrast_max);
  read_if(j, "background", c.background);
  read_if(j, "noise_level", c.noise_level);
  read_if(j, "texture_blobs", c.texture_blobs);
  read_if(j, "texture_amplitude", c.texture_amplitude);
  read_if(j, "vessel_count", c.vessel_count);
  read_if(j, "vessel_amplitude", c.vessel_amplitude);
  read_if(j, "vessel_radius", c.vessel_radius);
  read_if(j, "sigma_gen", c.sigma_gen);
  read_if(j, "mu", c.mu);
  read_if(j, "max_placement_retries", c.max_placement_retries);
  c.validate();
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const json j = {{"version", kCheckpointVersion},
                  {"epoch", ckpt.epoch},
                  {"params", to_json(ckpt.params)},
                  {"config", to_json(ckpt.config)}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out << j.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
  if (!j.is_object() || !j.contains("version") || j["version"] != kCheckpointVersion)
    throw VersionError("checkpoint version mismatch");
  Checkpoint c;
  c.params = model_params_from_json(j.at("params"));
  try {
    c.config = em_config_from_json(j.at("config"));
    c.epoch = j.at("epoch").get<int>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
  return c;
}

void write_metrics_csv(std::span<const EpochMetrics> history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write metrics: " + path.string());
  out.precision(17);
  out << "epoch,supervised_loss,weak_labels_used,weak_labels_skipped,froc\n";
  for (const EpochMetrics& m : history) {
    out << m.epoch << ',' << m.supervised_loss << ',' << m.weak_labels_used << ',' << m.weak_labels_skipped << ',';
    if (m.froc) out << *m.froc;
    out << '\n';
  }
}

}  // namespace deepem
