#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "dito/optim.hpp"

namespace dito {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

/// Single-file archive:
///   "DITOCKPT" | u32 format_version | u64 header_len | JSON header | raw arrays | u32 crc32
/// The header holds {kind, step, config, arrays: [{name, dtype, shape, offset, nbytes}]}.
/// Arrays are little-endian and contiguous; the CRC-32 covers every byte before it.
struct Checkpoint {
    uint32_t format_version = kCheckpointFormatVersion;
    std::string kind;  // "tokenizer" or "latent_generator"
    int64_t step = 0;
    nlohmann::json config;
    NamedTensors arrays;

    /// Throws IoError when the array is absent.
    const torch::Tensor& array(const std::string& name) const;
    bool has_array(const std::string& name) const;
};

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

/// Throws IoError on bad magic, unknown version, truncation or checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// "<dir>/ckpt_00000025.ckpt"
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int64_t step);

}  // namespace dito
