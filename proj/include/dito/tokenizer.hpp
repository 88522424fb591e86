#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "dito/diffusion_core.hpp"
#include "dito/networks.hpp"
#include "dito/optim.hpp"

namespace dito {

/// Encoder plus either a diffusion decoder (dito) or a pixel decoder and
/// discriminator (glpto). The objective records how the diffusion decoder was
/// trained, which decides how it is integrated at decode time.
struct TokenizerModel {
    TokenizerConfig config;
    Objective objective;
    Encoder encoder{nullptr};
    DiffusionDecoder decoder{nullptr};
    PixelDecoder pixel_decoder{nullptr};
    Discriminator discriminator{nullptr};

    static TokenizerModel create(const TokenizerConfig& config, const Objective& objective, uint64_t seed);

    bool is_diffusion() const { return config.kind == TokenizerKind::dito; }

    Latent encode(const torch::Tensor& images) const;

    /// Parameters prefixed "encoder.", "decoder.", "pixel_decoder.", "discriminator.".
    NamedTensors named_parameters() const;
    /// Copies every array in `arrays` whose name (after stripping `prefix`) is a parameter.
    /// Throws IoError if a parameter has no matching array.
    void load_parameters(const NamedTensors& arrays, const std::string& prefix);
    /// Copies only the encoder arrays, e.g. to reuse a trained latent space.
    void load_encoder(const NamedTensors& arrays, const std::string& prefix);

    int64_t parameter_count() const;
    void set_encoder_trainable(bool trainable);
};

}  // namespace dito
