#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "dito/latent_generation.hpp"
#include "dito/networks.hpp"
#include "dito/training.hpp"

namespace dito {

/// Environment variable that relative output directories are resolved against.
inline constexpr const char* kOutputRootEnv = "DITO_OUTPUT_ROOT";

struct DataConfig {
    std::string source = "synth:shapes";  // "synth:<kind>" or a folder path
    int num_images = 512;                 // synthetic corpora only
    int resolution = 32;
    uint64_t seed = 0;
    int num_classes = 2;
};

struct RunConfig {
    std::filesystem::path output_dir = "runs/tokenizer";
    int64_t checkpoint_every = 500;
};

/// INI sections [model], [train], [data], [run].
struct TokenizerRunConfig {
    TokenizerConfig model = TokenizerConfig::tiny();
    TrainConfig train;
    DataConfig data;
    RunConfig run;
    std::filesystem::path init_encoder_from;  // optional checkpoint whose encoder seeds this run
};

/// INI sections [tokenizer], [generator], [train], [data], [run].
struct LatentRunConfig {
    std::filesystem::path tokenizer_checkpoint;
    GenConfig gen;
    DataConfig data;
    RunConfig run;
};

/// Closed schema: unknown sections or keys, malformed values and missing required
/// keys all throw ConfigError naming the key.
TokenizerRunConfig load_tokenizer_config(const std::filesystem::path& path);
TokenizerRunConfig parse_tokenizer_config(const std::string& text);
LatentRunConfig load_latent_config(const std::filesystem::path& path);
LatentRunConfig parse_latent_config(const std::string& text);

/// Relative paths are placed under $DITO_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output_dir(const std::filesystem::path& dir);

nlohmann::json to_json(const TokenizerConfig& config);
TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GenConfig& config);
GenConfig gen_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DataConfig& config);
DataConfig data_config_from_json(const nlohmann::json& j);

/// {"model", "train", "data"} snapshot stored in tokenizer checkpoints.
nlohmann::json snapshot(const TokenizerRunConfig& config);
/// {"generator", "data", "tokenizer_checkpoint"} snapshot stored in generator checkpoints.
nlohmann::json snapshot(const LatentRunConfig& config);

std::string_view to_string(TimeSampling sampling);
TimeSampling parse_time_sampling(std::string_view name);

}  // namespace dito
