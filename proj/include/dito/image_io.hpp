#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace dito {

/// [-1, 1] -> [0, 255] via v = (x + 1) * 127.5, rounded half to even and clamped.
/// Input (3, H, W) float, output (H, W, 3) uint8.
torch::Tensor to_uint8(const torch::Tensor& image);

/// Decode a PNG/JPEG into (3, H, W) float in [-1, 1]; throws IoError when undecodable.
torch::Tensor read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Images laid out left to right, wrapping after `columns`.
void write_png_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& images, int columns);

}  // namespace dito
