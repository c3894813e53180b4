#pragma once

#include <filesystem>

#include <json.hpp>

#include "p2ld/discriminator.hpp"
#include "p2ld/generator.hpp"
#include "p2ld/objectives.hpp"
#include "p2ld/trainer.hpp"

// JSON mapping for the configuration types. Every field is written explicitly;
// on read, absent fields keep their defaults and unknown fields are rejected.

namespace p2ld {

void to_json(nlohmann::json& j, const EncoderStageSpec& s);
void from_json(const nlohmann::json& j, EncoderStageSpec& s);
void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);
void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads a RunConfig document; throws ConfigError on malformed input.
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace p2ld
