#ifndef DEEPEM_CHECKPOINT_HPP_
#define DEEPEM_CHECKPOINT_HPP_

#include <filesystem>
#include <span>

#include <json.hpp>

#include "deepem/em_engine.hpp"

namespace deepem {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json to_json(const ModelParams& params);
ModelParams model_params_from_json(const nlohmann::json& j);

nlohmann::json to_json(const EmConfig& cfg);
/// Missing keys keep their defaults; unknown or ill-typed values throw ConfigError.
EmConfig em_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

struct Checkpoint {
  ModelParams params;
  EmConfig config;
  int epoch = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws VersionError on a version mismatch and DataError on a malformed file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// epoch,supervised_loss,weak_labels_used,weak_labels_skipped,froc
void write_metrics_csv(std::span<const EpochMetrics> history, const std::filesystem::path& path);

}  // namespace deepem

#endif  // DEEPEM_CHECKPOINT_HPP_
