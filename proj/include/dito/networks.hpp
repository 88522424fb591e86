#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace dito {

struct EncoderConfig {
    int downsample_factor = 4;  // power of two, >= 2
    int latent_channels = 4;
    int base_width = 32;
    int blocks_per_stage = 1;

    int num_stages() const;
    std::vector<int> stage_widths() const;
    void validate() const;
};

struct DecoderConfig {
    std::array<int, 3> channels{32, 64, 128};
    int t_emb_dim = 256;
    int blocks_per_stage = 3;

    /// Four stages: (c1, c2, c3, c3).
    std::vector<int> stage_widths() const { return {channels[0], channels[1], channels[2], channels[2]}; }
    void validate() const;
};

enum class TokenizerKind { dito, glpto };

struct TokenizerConfig {
    TokenizerKind kind = TokenizerKind::dito;
    EncoderConfig encoder;
    DecoderConfig decoder;

    static TokenizerConfig tiny();
    /// Desk-scale ladder standing in for the B -> L -> XL scaling series.
    static TokenizerConfig ladder(const std::string& name);
};

/// Encoder output, shape (N, c, H/f, W/f).
struct Latent {
    torch::Tensor values;
    bool normalized = false;
};

struct UNetOptions {
    int in_channels = 3;
    int out_channels = 3;
    std::vector<int> widths;  // one entry per resolution stage
    int blocks_per_stage = 3;
    int t_emb_dim = 256;
    int num_classes = 0;  // > 0 adds a class embedding; index num_classes is the null token
    double out_init_scale = 0.1;
};

/// Group count for GroupNorm: the largest divisor of channels not above min(32, channels / 4).
int norm_groups(int channels);

/// Sinusoidal features of t * 1000, shape (N, dim).
torch::Tensor timestep_features(const torch::Tensor& t, int dim);

class ResBlockImpl : public torch::nn::Module {
public:
    enum class Resample { none, down, up };

    ResBlockImpl(int in_channels, int out_channels, int t_emb_dim, Resample resample = Resample::none);

    torch::Tensor forward(const torch::Tensor& x, const std::optional<torch::Tensor>& t_emb = std::nullopt);

    static int64_t parameter_count(int in_channels, int out_channels, int t_emb_dim);

private:
    Resample resample_;
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    torch::nn::Linear modulation_{nullptr};
};
TORCH_MODULE(ResBlock);

class UNetImpl : public torch::nn::Module {
public:
    explicit UNetImpl(UNetOptions options);

    /// t has shape (N); class_ids (N, int64) is required iff num_classes > 0.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t,
                          const std::optional<torch::Tensor>& class_ids = std::nullopt);

    const UNetOptions& options() const { return options_; }
    torch::nn::Conv2d output_projection() const { return conv_out_; }

    /// Closed-form parameter count; matches the constructed module.
    static int64_t parameter_count(const UNetOptions& options);

private:
    UNetOptions options_;
    torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
    torch::nn::Embedding class_embedding_{nullptr};
    torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    std::vector<ResBlock> down_;
    std::vector<ResBlock> mid_;
    std::vector<ResBlock> up_;
    std::vector<bool> up_consumes_skip_;
};
TORCH_MODULE(UNet);

class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(EncoderConfig config);

    /// image: (N, 3, H, W) with H, W divisible by f. The final op is a parameter-free
    /// LayerNorm over all (c, h, w) elements of each sample.
    Latent encode(const torch::Tensor& image);
    torch::Tensor forward(const torch::Tensor& image) { return encode(image).values; }

    const EncoderConfig& config() const { return config_; }

private:
    EncoderConfig config_;
    torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    std::vector<ResBlock> blocks_;
    std::vector<torch::nn::Conv2d> downsamplers_;
};
TORCH_MODULE(Encoder);

/// Time- and latent-conditioned UNet: nearest-upsampled z is concatenated to x_t.
class DiffusionDecoderImpl : public torch::nn::Module {
public:
    DiffusionDecoderImpl(const DecoderConfig& config, int latent_channels, int downsample_factor);

    torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const Latent& z);
    torch::Tensor forward(const torch::Tensor& x_t, double t, const Latent& z);

    UNet unet() const { return unet_; }
    int downsample_factor() const { return downsample_factor_; }

private:
    int downsample_factor_;
    int latent_channels_;
    UNet unet_{nullptr};
};
TORCH_MODULE(DiffusionDecoder);

/// Deterministic conv decoder for the GAN/perceptual baseline; mirrors the encoder.
class PixelDecoderImpl : public torch::nn::Module {
public:
    explicit PixelDecoderImpl(const EncoderConfig& config);

    torch::Tensor forward(const torch::Tensor& z);
    torch::nn::Conv2d last_layer() const { return conv_out_; }

private:
    torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
    std::vector<ResBlock> blocks_;
    std::vector<torch::nn::Conv2d> upsamplers_;
    std::vector<int> blocks_per_upsampler_;
};
TORCH_MODULE(PixelDecoder);

/// Patch discriminator producing a logit map.
class DiscriminatorImpl : public torch::nn::Module {
public:
    explicit DiscriminatorImpl(int width = 32);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Discriminator);

inline constexpr int64_t kNullClass = -1;

struct LatentGeneratorOptions {
    int latent_channels = 4;
    std::vector<int> widths{64, 128, 128};
    int blocks_per_stage = 2;
    int t_emb_dim = 256;
    int num_classes = 2;
};

/// Class-conditional v-prediction network on latents. kNullClass selects the
/// unconditional branch used by classifier-free guidance.
class LatentGeneratorImpl : public torch::nn::Module {
public:
    explicit LatentGeneratorImpl(LatentGeneratorOptions options);

    torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& class_ids);
    torch::Tensor forward(const torch::Tensor& z_t, double t, int64_t class_id);

    const LatentGeneratorOptions& options() const { return options_; }

private:
    LatentGeneratorOptions options_;
    UNet unet_{nullptr};
};
TORCH_MODULE(LatentGenerator);

/// Re-draw all conv/linear/embedding/norm parameters from a private generator so
/// initialisation depends only on the seed. Conv and linear layers use the fan-in
/// bound 1/sqrt(fan_in); norms start at (1, 0); embeddings at N(0, 1). UNet output
/// projections are then multiplied by UNetOptions::out_init_scale.
void initialize_parameters(torch::nn::Module& module, uint64_t seed);

int64_t count_parameters(const torch::nn::Module& module);

/// Closed-form parameter count of the diffusion decoder for a config.
int64_t decoder_parameter_count(const DecoderConfig& config, int latent_channels);

}  // namespace dito
