#include "p2ld/config.hpp"

#include <fstream>
#include <set>

#include "p2ld/util.hpp"

namespace p2ld {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& item : j.items())
    if (!known.count(item.key())) throw ConfigError(std::string(what) + ": unknown field '" + item.key() + "'");
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

}  // namespace

void to_json(nlohmann::json& j, const EncoderStageSpec& s) {
  j = {{"out_channels", s.out_channels},
       {"stride", s.stride},
       {"blocks", s.blocks},
       {"cardinality", s.cardinality},
       {"bottleneck_width", s.bottleneck_width}};
}

void from_json(const nlohmann::json& j, EncoderStageSpec& s) {
  reject_unknown(j, {"out_channels", "stride", "blocks", "cardinality", "bottleneck_width"}, "encoder stage");
  read_if(j, "out_channels", s.out_channels);
  read_if(j, "stride", s.stride);
  read_if(j, "blocks", s.blocks);
  read_if(j, "cardinality", s.cardinality);
  read_if(j, "bottleneck_width", s.bottleneck_width);
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"input_size", c.input_size},
       {"encoder_stages", c.encoder_stages},
       {"decoder_channels", c.decoder_channels},
       {"fusion_mode", to_string(c.fusion_mode)},
       {"skips_enabled", c.skips_enabled},
       {"decoder_block", to_string(c.decoder_block)},
       {"output_channels", c.output_channels},
       {"pretrained_encoder", c.pretrained_encoder ? nlohmann::json(*c.pretrained_encoder) : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  reject_unknown(j,
                 {"input_size", "encoder_stages", "decoder_channels", "fusion_mode", "skips_enabled", "decoder_block",
                  "output_channels", "pretrained_encoder"},
                 "generator");
  read_if(j, "input_size", c.input_size);
  read_if(j, "encoder_stages", c.encoder_stages);
  read_if(j, "decoder_channels", c.decoder_channels);
  if (j.contains("fusion_mode")) c.fusion_mode = parse_fusion_mode(j.at("fusion_mode").get<std::string>());
  read_if(j, "skips_enabled", c.skips_enabled);
  if (j.contains("decoder_block")) c.decoder_block = parse_decoder_block(j.at("decoder_block").get<std::string>());
  read_if(j, "output_channels", c.output_channels);
  if (auto it = j.find("pretrained_encoder"); it != j.end())
    c.pretrained_encoder = it->is_null() ? std::nullopt : std::optional<std::string>(it->get<std::string>());
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"widths", c.widths},
       {"leaky_slope", c.leaky_slope},
       {"instance_norm", c.instance_norm}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  reject_unknown(j, {"in_channels", "widths", "leaky_slope", "instance_norm"}, "discriminator");
  read_if(j, "in_channels", c.in_channels);
  read_if(j, "widths", c.widths);
  read_if(j, "leaky_slope", c.leaky_slope);
  read_if(j, "instance_norm", c.instance_norm);
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  reject_unknown(j, {"lambda1", "lambda2", "lambda3"}, "weights");
  read_if(j, "lambda1", w.lambda1);
  read_if(j, "lambda2", w.lambda2);
  read_if(j, "lambda3", w.lambda3);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"image_size", c.image_size},
       {"weights", c.weights},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"device", c.device}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"lr", "beta1", "beta2", "epochs", "batch_size", "image_size", "weights", "seed", "checkpoint_every",
                  "device"},
                 "train");
  read_if(j, "lr", c.lr);
  read_if(j, "beta1", c.beta1);
  read_if(j, "beta2", c.beta2);
  read_if(j, "epochs", c.epochs);
  read_if(j, "batch_size", c.batch_size);
  read_if(j, "image_size", c.image_size);
  read_if(j, "weights", c.weights);
  read_if(j, "seed", c.seed);
  read_if(j, "checkpoint_every", c.checkpoint_every);
  read_if(j, "device", c.device);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"generator", c.generator}, {"discriminator", c.discriminator}, {"train", c.train}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j, {"generator", "discriminator", "train"}, "config");
  read_if(j, "generator", c.generator);
  read_if(j, "discriminator", c.discriminator);
  read_if(j, "train", c.train);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  write_text_atomic(path, nlohmann::json(cfg).dump(2) + "\n");
}

}  // namespace p2ld
