#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dito/checkpoint.hpp"
#include "dito/config.hpp"
#include "dito/tokenizer.hpp"

namespace dito {

/// Tokenizer plus the run snapshot it was trained with.
struct LoadedTokenizer {
    TokenizerModel model;
    DataConfig data;
    std::string model_id;
};

LoadedTokenizer load_tokenizer(const std::filesystem::path& checkpoint);

/// Hex CRC-32 of the checkpoint file, used to tag reports.
std::string checkpoint_id(const std::filesystem::path& checkpoint);

struct TrainTokenizerOptions {
    std::filesystem::path config;
    bool dry_run = false;
    std::optional<std::filesystem::path> resume;
};

struct ReconstructOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path input_dir;
    std::filesystem::path output_dir;
    int steps = 50;
    uint64_t seed = 0;
};

struct EvalOptions {
    std::filesystem::path checkpoint;
    std::string dataset;  // "synth:<kind>" or a folder
    std::string metric;   // rfid, psnr, ssim, steps_sweep
    int steps = 50;
    std::vector<int> steps_list{1, 2, 5, 10, 20, 50};
    uint64_t seed = 0;
    int64_t n = 512;
    std::optional<int> num_images;  // synthetic corpus size; defaults to n
};

struct TrainLatentOptions {
    std::filesystem::path config;
    bool dry_run = false;
    std::optional<std::filesystem::path> resume;
};

struct SampleOptions {
    std::filesystem::path tokenizer;
    std::filesystem::path generator;
    std::filesystem::path output_dir = "samples";
    int64_t class_id = 0;
    int64_t n = 4;
    double guidance = 2.0;
    int steps = 50;         // latent sampling steps
    int decode_steps = 50;  // tokenizer decoding steps
    uint64_t seed = 0;
};

/// Each returns a process exit code; library errors propagate as exceptions.
int cmd_train_tokenizer(const TrainTokenizerOptions& options, std::ostream& out);
int cmd_reconstruct(const ReconstructOptions& options, std::ostream& out);
/// Writes the MetricsReport JSON to `out`.
int cmd_eval(const EvalOptions& options, std::ostream& out);
int cmd_train_latent(const TrainLatentOptions& options, std::ostream& out);
int cmd_sample(const SampleOptions& options, std::ostream& out);

/// "1,2,5" -> {1, 2, 5}
std::vector<int> parse_steps_list(const std::string& text);

}  // namespace dito
