#ifndef CARN_CHECKPOINT_HPP
#define CARN_CHECKPOINT_HPP

#include <filesystem>

#include "carn/harness.hpp"
#include "json.hpp"

namespace carn {

inline constexpr const char* kCheckpointSchema = "carn-checkpoint-1";

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& defaults = {});

nlohmann::json to_json(const ModalityConfig& m);
ModalityConfig modality_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep the values in `defaults`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults = {});

nlohmann::json to_json(const GenConfig& c);
GenConfig gen_config_from_json(const nlohmann::json& j, const GenConfig& defaults = {});

nlohmann::json to_json(const CastList& cast);

/// JSON document: schema, echoed configs, cast, vocabulary and every named
/// parameter tensor (row-major data).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace carn

#endif  // CARN_CHECKPOINT_HPP
