#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace dito {

/// All images are float32 (3, H, W) with values in [kPixelMin, kPixelMax].
inline constexpr double kPixelMin = -1.0;
inline constexpr double kPixelMax = 1.0;

struct Dataset {
    std::vector<torch::Tensor> images;
    std::vector<int64_t> labels;  // empty for unlabelled folders
    int resolution = 0;           // target crop size

    size_t size() const { return images.size(); }
    bool empty() const { return images.empty(); }
    bool labelled() const { return !labels.empty(); }
};

enum class Split { train, eval };

/// PNG/JPEG files (case-insensitive extension) in `dir`, sorted by file name.
std::vector<std::filesystem::path> list_image_files(const std::filesystem::path& dir);

/// Lexicographically ordered PNG/JPEG files, shorter side resized to `resolution`.
/// Eval items are centre-cropped; train items keep their resized extent and are
/// cropped by augment().
Dataset load_folder(const std::filesystem::path& path, int resolution, Split split);

/// Random crop to `resolution` then horizontal flip with probability flip_prob.
torch::Tensor augment(const torch::Tensor& image, std::mt19937_64& rng, int resolution, double flip_prob = 0.5);

torch::Tensor horizontal_flip(const torch::Tensor& image);
torch::Tensor center_crop(const torch::Tensor& image, int size);

enum class SynthKind { glyphs, checkerboard, shapes, gradients };

SynthKind parse_synth_kind(std::string_view name);
std::string_view to_string(SynthKind kind);

/// Deterministic structured corpora. Labels:
///   shapes: class id (0 red square, 1 blue circle, 2 green triangle, 3 yellow cross)
///   checkerboard: cell-size index into {2, 4, 8}
///   glyphs: string length - 2
///   gradients: 0
Dataset synth_corpus(SynthKind kind, int n, int resolution, uint64_t seed, int num_classes = 2);

using Rgb = std::array<float, 3>;

torch::Tensor render_checkerboard(int resolution, int cell, const Rgb& a, const Rgb& b);

/// Draw text with the embedded 5x7 font (A-Z, 0-9), glyph advance 6 * scale pixels.
void draw_text(torch::Tensor& image, std::string_view text, int top, int left, int scale, const Rgb& color);

/// 7 rows of 5-bit masks (bit 4 is the leftmost column); all zero for unknown characters.
const std::array<uint8_t, 7>& glyph_bitmap(char c);

/// splitmix64-style mixing used to derive per-item and per-epoch seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

/// Deterministic permutation of [0, n) for one epoch.
std::vector<int64_t> epoch_permutation(int64_t n, uint64_t seed, int64_t epoch);

/// Stack images (all at the same size) into (N, 3, H, W).
torch::Tensor stack_images(const Dataset& data, const std::vector<int64_t>& indices);
torch::Tensor stack_all(const Dataset& data);

/// "synth:<kind>" is generated with (n, resolution, seed, num_classes); anything else is a folder.
Dataset load_source(const std::string& source, int n, int resolution, uint64_t seed, int num_classes, Split split);

}  // namespace dito
