// deepem_cli: generate / train / eval / report.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "deepem/checkpoint.hpp"
#include "deepem/em_engine.hpp"
#include "deepem/error.hpp"
#include "deepem/synthvol.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace deepem;

namespace {

constexpr const char* kSplitNames[3] = {"full", "weak", "validation"};
constexpr const char* kSplitFiles[3] = {"train_full.wem", "train_weak.wem", "validation.wem"};
const std::vector<std::string> kModes{"baseline", "deepem-map", "deepem-sampling"};

struct Experiment {
  GeneratorConfig generator;
  std::array<int, 3> split_sizes{40, 200, 40};
  std::uint64_t data_seed = 1;
  EmConfig em;
  std::vector<std::uint64_t> seeds{1};
  std::string mode = "deepem-sampling";
  json raw;
};

Experiment load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  Experiment e;
  try {
    e.raw = json::parse(in);
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config is not valid JSON: ") + ex.what());
  }
  const json& j = e.raw;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    if (j.contains("generator")) e.generator = generator_config_from_json(j["generator"]);
    if (j.contains("em")) e.em = em_config_from_json(j["em"]);
    if (j.contains("splits")) {
      for (int k = 0; k < 3; ++k)
        if (j["splits"].contains(kSplitNames[k])) e.split_sizes[k] = j["splits"][kSplitNames[k]].get<int>();
    }
    if (j.contains("data_seed")) e.data_seed = j["data_seed"].get<std::uint64_t>();
    if (j.contains("seeds")) e.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("mode")) e.mode = j["mode"].get<std::string>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("bad config value: ") + ex.what());
  }
  if (e.seeds.empty()) throw ConfigError("seed list is empty");
  if (std::find(kModes.begin(), kModes.end(), e.mode) == kModes.end()) throw ConfigError("unknown mode: " + e.mode);
  return e;
}

// Seeds of different splits never collide as long as a split holds < 2^28 scans.
std::uint64_t scan_seed(std::uint64_t data_seed, int split, int index) {
  return (data_seed << 32) + (static_cast<std::uint64_t>(split) << 28) + static_cast<std::uint64_t>(index);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int cmd_generate(const fs::path& config, const fs::path& out, const std::vector<std::uint64_t>& seeds) {
  Experiment e = load_experiment(config);
  if (seeds.size() > 1) throw ConfigError("generate takes at most one --seed");
  if (!seeds.empty()) e.data_seed = seeds[0];
  for (int k = 0; k < 3; ++k)
    if (e.split_sizes[k] <= 0) throw ConfigError(std::string("empty split: ") + kSplitNames[k]);
  if (e.data_seed >= (std::uint64_t{1} << 32)) throw ConfigError("data_seed must be < 2^32");
  ensure_dir(out);
  for (int k = 0; k < 3; ++k) {
    std::vector<LabeledScan> scans;
    std::size_t nodules = 0;
    for (int i = 0; i < e.split_sizes[k]; ++i) {
      scans.push_back(generate_scan(scan_seed(e.data_seed, k, i), e.generator));
      nodules += scans.back().truth.size();
    }
    save_dataset(scans, out / kSplitFiles[k]);
    std::cout << kSplitNames[k] << ": " << scans.size() << " scans, " << nodules << " nodules\n";
  }
  json provenance = e.raw;
  provenance["data_seed"] = e.data_seed;
  provenance["generator"] = to_json(e.generator);
  write_json(provenance, out / "config.json");
  return 0;
}

int cmd_train(const fs::path& config, const fs::path& data, std::optional<std::string> mode_flag,
              std::vector<std::uint64_t> seeds, const fs::path& out) {
  const Experiment e = load_experiment(config);
  const std::string mode = mode_flag.value_or(e.mode);
  if (seeds.empty()) seeds = e.seeds;

  const auto full = load_dataset(data / kSplitFiles[0]);
  const auto validation = load_dataset(data / kSplitFiles[2]);
  std::vector<LabeledScan> weak;
  if (mode != "baseline") weak = load_dataset(data / kSplitFiles[1]);
  if (full.empty()) throw DataError("fully supervised split is empty");

  EmConfig cfg = e.em;
  cfg.inference_mode = mode == "deepem-sampling" ? InferenceMode::Sampling : InferenceMode::Map;

  ensure_dir(out);
  write_json(e.raw, out / "config.json");
  for (std::uint64_t seed : seeds) {
    const TrainingResult r = train_em(full, weak, validation, cfg, seed);
    const fs::path dir = out / mode / ("seed_" + std::to_string(seed));
    ensure_dir(dir);
    save_checkpoint({r.params, cfg, r.epochs}, dir / "checkpoint.json");
    write_metrics_csv(r.history, dir / "metrics.csv");
    std::cout << mode << " seed " << seed << ": " << r.epochs << " epochs";
    if (!r.history.empty() && r.history.back().froc)
      std::cout << ", validation FROC " << std::fixed << std::setprecision(2) << 100.0 * *r.history.back().froc
                << std::defaultfloat;
    std::cout << '\n';
  }
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data, const fs::path& out) {
  const Checkpoint c = load_checkpoint(checkpoint);
  const auto scans = load_dataset(data);
  if (scans.empty()) throw DataError("dataset is empty");
  std::vector<AnchorSet> anchors;
  for (const LabeledScan& s : scans) anchors.push_back(build_anchors(s.volume, c.params.detector.scales, c.config.stride));
  const FrocResult r = evaluate(scans, anchors, c.params, c.config);
  ensure_dir(out);
  write_froc_csv(r, out / "froc_curve.csv");
  std::cout << std::fixed << std::setprecision(4);
  for (std::size_t k = 0; k < kFrocFpRates.size(); ++k)
    std::cout << "fp/scan " << std::setw(6) << kFrocFpRates[k] << "  sensitivity " << r.sensitivities[k] << '\n';
  std::cout << "FROC " << std::setprecision(2) << r.percent() << '\n';
  return 0;
}

std::optional<double> final_froc(const fs::path& metrics) {
  std::ifstream in(metrics);
  std::string line, last;
  std::getline(in, line);
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  const auto comma = last.rfind(',');
  if (comma == std::string::npos || comma + 1 == last.size()) return std::nullopt;
  return std::stod(last.substr(comma + 1));
}

int cmd_report(const fs::path& out) {
  std::map<std::string, std::vector<std::pair<std::string, double>>> results;
  for (const std::string& mode : kModes) {
    if (!fs::is_directory(out / mode)) continue;
    for (const auto& entry : fs::directory_iterator(out / mode)) {
      const fs::path metrics = entry.path() / "metrics.csv";
      if (!fs::exists(metrics)) continue;
      if (const auto f = final_froc(metrics)) results[mode].push_back({entry.path().filename().string(), *f});
    }
    std::sort(results[mode].begin(), results[mode].end());
  }
  std::erase_if(results, [](const auto& kv) { return kv.second.empty(); });
  if (results.empty()) throw DataError("no metrics found under " + out.string());

  const auto mean = [](const std::vector<std::pair<std::string, double>>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0, [](double a, const auto& p) { return a + p.second; }) /
           static_cast<double>(v.size());
  };
  const std::optional<double> baseline =
      results.count("baseline") ? std::optional<double>(mean(results["baseline"])) : std::nullopt;

  std::ofstream csv(out / "report.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write report.csv");
  csv << std::setprecision(17) << "mode,seeds,mean_froc,delta_vs_baseline\n";
  std::cout << std::fixed << std::setprecision(2);
  for (const std::string& mode : kModes) {
    if (!results.count(mode)) continue;
    const double m = mean(results[mode]);
    csv << mode << ',' << results[mode].size() << ',' << m << ',';
    std::cout << std::left << std::setw(16) << mode << " seeds " << results[mode].size() << "  FROC " << 100.0 * m;
    if (baseline) {
      csv << m - *baseline;
      std::cout << "  delta " << std::showpos << 100.0 * (m - *baseline) << std::noshowpos;
    }
    csv << '\n';
    std::cout << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised nodule detection with EM over latent proposals"};
  app.require_subcommand(1);

  fs::path config, out, data, checkpoint;
  std::vector<std::uint64_t> seeds;
  std::string mode;

  auto* gen = app.add_subcommand("generate", "write synthetic train/weak/validation datasets");
  gen->add_option("--config", config, "experiment config JSON")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seeds, "data seed (overrides data_seed)");

  auto* train = app.add_subcommand("train", "train one mode for each seed");
  train->add_option("--config", config, "experiment config JSON")->required();
  train->add_option("--data", data, "directory written by generate")->required();
  train->add_option("--mode", mode, "baseline | deepem-map | deepem-sampling")
      ->check(CLI::IsMember(kModes));
  train->add_option("--seed", seeds, "training seed, repeatable (default: config seeds)");
  train->add_option("--out", out, "results directory")->required();

  auto* ev = app.add_subcommand("eval", "FROC of a checkpoint on a dataset");
  ev->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required();
  ev->add_option("--data", data, "dataset file")->required();
  ev->add_option("--out", out, "output directory")->required();

  auto* rep = app.add_subcommand("report", "aggregate final FROC per mode");
  rep->add_option("--out", out, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(config, out, seeds);
    if (*train) return cmd_train(config, data, mode.empty() ? std::nullopt : std::optional(mode), seeds, out);
    if (*ev) return cmd_eval(checkpoint, data, out);
    if (*rep) return cmd_report(out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
