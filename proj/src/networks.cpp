#include "dito/networks.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dito/errors.hpp"

namespace dito {
namespace nn = torch::nn;

namespace {

nn::Conv2d conv3x3(int in, int out, int stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::Conv2d conv1x1(int in, int out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 1)); }

nn::GroupNorm group_norm(int channels) {
    return nn::GroupNorm(nn::GroupNormOptions(norm_groups(channels), channels).eps(1e-6));
}

int64_t conv_params(int in, int out, int k) { return static_cast<int64_t>(in) * out * k * k + out; }
int64_t linear_params(int in, int out) { return static_cast<int64_t>(in) * out + out; }

void require_positive(int value, const char* name) {
    if (value <= 0) {
        throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(value));
    }
}

}  // namespace

int norm_groups(int channels) {
    int target = std::min(32, std::max(1, channels / 4));
    while (channels % target != 0) {
        --target;
    }
    return target;
}

torch::Tensor timestep_features(const torch::Tensor& t, int dim) {
    const int half = dim / 2;
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
    auto args = (t.to(torch::kFloat32) * 1000.0).unsqueeze(1) * freqs.unsqueeze(0);
    auto features = torch::cat({torch::cos(args), torch::sin(args)}, 1);
    if (dim % 2 == 1) {
        features = torch::cat({features, torch::zeros({t.size(0), 1})}, 1);
    }
    return features;
}

// --- configs -----------------------------------------------------------------

int EncoderConfig::num_stages() const { return std::countr_zero(static_cast<unsigned>(downsample_factor)) + 1; }

std::vector<int> EncoderConfig::stage_widths() const {
    std::vector<int> widths;
    for (int s = 0; s < num_stages(); ++s) {
        widths.push_back(base_width * std::min(1 << s, 4));
    }
    return widths;
}

void EncoderConfig::validate() const {
    if (downsample_factor < 2 || !std::has_single_bit(static_cast<unsigned>(downsample_factor))) {
        throw ConfigError("downsample_factor must be a power of two >= 2, got " + std::to_string(downsample_factor));
    }
    require_positive(latent_channels, "latent_channels");
    require_positive(base_width, "encoder base_width");
    require_positive(blocks_per_stage, "encoder blocks_per_stage");
}

void DecoderConfig::validate() const {
    for (int c : channels) {
        require_positive(c, "decoder channel width");
    }
    require_positive(t_emb_dim, "t_emb_dim");
    require_positive(blocks_per_stage, "decoder blocks_per_stage");
}

TokenizerConfig TokenizerConfig::tiny() { return ladder("tiny"); }

TokenizerConfig TokenizerConfig::ladder(const std::string& name) {
    TokenizerConfig config;
    config.decoder.t_emb_dim = 256;
    if (name == "tiny") {
        config.decoder.channels = {32, 64, 128};
    } else if (name == "small") {
        config.decoder.channels = {48, 96, 192};
    } else if (name == "base") {
        config.decoder.channels = {64, 128, 256};
    } else {
        throw ConfigError("unknown model preset '" + name + "' (expected tiny, small or base)");
    }
    return config;
}

// --- ResBlock ------------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int t_emb_dim, Resample resample)
    : resample_(resample) {
    norm1_ = register_module("norm1", group_norm(in_channels));
    conv1_ = register_module("conv1", conv3x3(in_channels, out_channels));
    if (t_emb_dim > 0) {
        modulation_ = register_module("modulation", nn::Linear(t_emb_dim, 2 * out_channels));
    }
    norm2_ = register_module("norm2", group_norm(out_channels));
    conv2_ = register_module("conv2", conv3x3(out_channels, out_channels));
    if (in_channels != out_channels) {
        skip_ = register_module("skip", conv1x1(in_channels, out_channels));
    }
}

int64_t ResBlockImpl::parameter_count(int in_channels, int out_channels, int t_emb_dim) {
    int64_t n = 2 * in_channels + conv_params(in_channels, out_channels, 3) + 2 * out_channels +
                conv_params(out_channels, out_channels, 3);
    if (t_emb_dim > 0) n += linear_params(t_emb_dim, 2 * out_channels);
    if (in_channels != out_channels) n += conv_params(in_channels, out_channels, 1);
    return n;
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const std::optional<torch::Tensor>& t_emb) {
    auto h = torch::silu(norm1_->forward(x));
    auto residual = x;
    if (resample_ == Resample::down) {
        h = torch::avg_pool2d(h, 2);
        residual = torch::avg_pool2d(residual, 2);
    } else if (resample_ == Resample::up) {
        h = torch::upsample_nearest2d(h, std::nullopt, std::vector<double>{2.0, 2.0});
        residual = torch::upsample_nearest2d(residual, std::nullopt, std::vector<double>{2.0, 2.0});
    }
    h = norm2_->forward(conv1_->forward(h));
    if (modulation_) {
        if (!t_emb) {
            throw ConfigError("time-conditioned residual block called without an embedding");
        }
        auto params = modulation_->forward(torch::silu(*t_emb)).unsqueeze(-1).unsqueeze(-1);
        auto chunks = params.chunk(2, 1);
        h = h * (1.0 + chunks[0]) + chunks[1];
    }
    h = conv2_->forward(torch::silu(h));
    if (skip_) {
        residual = skip_->forward(residual);
    }
    return residual + h;
}

// --- UNet ------------------------------------------------------------------------

UNetImpl::UNetImpl(UNetOptions options) : options_(std::move(options)) {
    if (options_.widths.empty()) {
        throw ConfigError("UNet needs at least one stage");
    }
    for (int w : options_.widths) require_positive(w, "UNet width");
    require_positive(options_.blocks_per_stage, "UNet blocks_per_stage");
    require_positive(options_.t_emb_dim, "t_emb_dim");

    const auto& widths = options_.widths;
    const int temb = options_.t_emb_dim;
    const int stages = static_cast<int>(widths.size());

    time_fc1_ = register_module("time_fc1", nn::Linear(widths[0], temb));
    time_fc2_ = register_module("time_fc2", nn::Linear(temb, temb));
    if (options_.num_classes > 0) {
        class_embedding_ = register_module("class_embedding", nn::Embedding(options_.num_classes + 1, temb));
    }
    conv_in_ = register_module("conv_in", conv3x3(options_.in_channels, widths[0]));

    std::vector<int> skip_channels{widths[0]};
    int ch = widths[0];
    for (int s = 0; s < stages; ++s) {
        for (int b = 0; b < options_.blocks_per_stage; ++b) {
            down_.push_back(register_module("down_" + std::to_string(down_.size()), ResBlock(ch, widths[s], temb)));
            ch = widths[s];
            skip_channels.push_back(ch);
        }
        if (s + 1 < stages) {
            down_.push_back(register_module("down_" + std::to_string(down_.size()),
                                            ResBlock(ch, ch, temb, ResBlockImpl::Resample::down)));
            skip_channels.push_back(ch);
        }
    }
    for (int i = 0; i < 2; ++i) {
        mid_.push_back(register_module("mid_" + std::to_string(i), ResBlock(ch, ch, temb)));
    }
    for (int s = stages - 1; s >= 0; --s) {
        for (int b = 0; b <= options_.blocks_per_stage; ++b) {
            const int skip = skip_channels.back();
            skip_channels.pop_back();
            up_.push_back(register_module("up_" + std::to_string(up_.size()), ResBlock(ch + skip, widths[s], temb)));
            up_consumes_skip_.push_back(true);
            ch = widths[s];
        }
        if (s > 0) {
            up_.push_back(register_module("up_" + std::to_string(up_.size()),
                                          ResBlock(ch, ch, temb, ResBlockImpl::Resample::up)));
            up_consumes_skip_.push_back(false);
        }
    }
    norm_out_ = register_module("norm_out", group_norm(ch));
    conv_out_ = register_module("conv_out", conv3x3(ch, options_.out_channels));
}

int64_t UNetImpl::parameter_count(const UNetOptions& o) {
    const auto& widths = o.widths;
    const int temb = o.t_emb_dim;
    const int stages = static_cast<int>(widths.size());
    int64_t n = linear_params(widths[0], temb) + linear_params(temb, temb);
    if (o.num_classes > 0) n += static_cast<int64_t>(o.num_classes + 1) * temb;
    n += conv_params(o.in_channels, widths[0], 3);

    std::vector<int> skips{widths[0]};
    int ch = widths[0];
    for (int s = 0; s < stages; ++s) {
        for (int b = 0; b < o.blocks_per_stage; ++b) {
            n += ResBlockImpl::parameter_count(ch, widths[s], temb);
            ch = widths[s];
            skips.push_back(ch);
        }
        if (s + 1 < stages) {
            n += ResBlockImpl::parameter_count(ch, ch, temb);
            skips.push_back(ch);
        }
    }
    n += 2 * ResBlockImpl::parameter_count(ch, ch, temb);
    for (int s = stages - 1; s >= 0; --s) {
        for (int b = 0; b <= o.blocks_per_stage; ++b) {
            n += ResBlockImpl::parameter_count(ch + skips.back(), widths[s], temb);
            skips.pop_back();
            ch = widths[s];
        }
        if (s > 0) n += ResBlockImpl::parameter_count(ch, ch, temb);
    }
    n += 2 * ch + conv_params(ch, o.out_channels, 3);
    return n;
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                const std::optional<torch::Tensor>& class_ids) {
    if (t.dim() != 1 || t.size(0) != x.size(0)) {
        std::ostringstream msg;
        msg << "UNet expects one time per sample: t " << t.sizes() << " vs x " << x.sizes();
        throw ShapeError(msg.str());
    }
    const int64_t divisor = int64_t{1} << (options_.widths.size() - 1);
    if (x.size(2) % divisor != 0 || x.size(3) % divisor != 0) {
        std::ostringstream msg;
        msg << "UNet input " << x.sizes() << " must have spatial dims divisible by " << divisor;
        throw ShapeError(msg.str());
    }
    auto emb = time_fc2_->forward(torch::silu(time_fc1_->forward(timestep_features(t, options_.widths[0]))));
    if (class_embedding_) {
        if (!class_ids) {
            throw ConfigError("class-conditional UNet called without class ids");
        }
        emb = emb + class_embedding_->forward(*class_ids);
    }

    auto h = conv_in_->forward(x);
    std::vector<torch::Tensor> skips{h};
    for (auto& block : down_) {
        h = block->forward(h, emb);
        skips.push_back(h);
    }
    for (auto& block : mid_) {
        h = block->forward(h, emb);
    }
    for (size_t i = 0; i < up_.size(); ++i) {
        if (up_consumes_skip_[i]) {
            h = torch::cat({h, skips.back()}, 1);
            skips.pop_back();
        }
        h = up_[i]->forward(h, emb);
    }
    return conv_out_->forward(torch::silu(norm_out_->forward(h)));
}

// --- Encoder -----------------------------------------------------------------------

EncoderImpl::EncoderImpl(EncoderConfig config) : config_(config) {
    config_.validate();
    const auto widths = config_.stage_widths();
    conv_in_ = register_module("conv_in", conv3x3(3, widths[0]));
    int ch = widths[0];
    for (size_t s = 0; s < widths.size(); ++s) {
        for (int b = 0; b < config_.blocks_per_stage; ++b) {
            blocks_.push_back(register_module("block_" + std::to_string(blocks_.size()), ResBlock(ch, widths[s], 0)));
            ch = widths[s];
        }
        if (s + 1 < widths.size()) {
            downsamplers_.push_back(
                register_module("downsample_" + std::to_string(downsamplers_.size()), conv3x3(ch, ch, 2)));
        }
    }
    blocks_.push_back(register_module("block_" + std::to_string(blocks_.size()), ResBlock(ch, ch, 0)));
    norm_out_ = register_module("norm_out", group_norm(ch));
    conv_out_ = register_module("conv_out", conv1x1(ch, config_.latent_channels));
}

Latent EncoderImpl::encode(const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 3) {
        std::ostringstream msg;
        msg << "encoder expects (N, 3, H, W), got " << image.sizes();
        throw ShapeError(msg.str());
    }
    const int f = config_.downsample_factor;
    if (image.size(2) % f != 0 || image.size(3) % f != 0) {
        std::ostringstream msg;
        msg << "image " << image.size(2) << "x" << image.size(3) << " is not divisible by downsample factor " << f;
        throw ShapeError(msg.str());
    }
    auto h = conv_in_->forward(image);
    size_t block = 0;
    for (size_t s = 0; s < static_cast<size_t>(config_.num_stages()); ++s) {
        for (int b = 0; b < config_.blocks_per_stage; ++b) {
            h = blocks_[block++]->forward(h);
        }
        if (s < downsamplers_.size()) {
            h = downsamplers_[s]->forward(h);
        }
    }
    h = blocks_[block]->forward(h);
    h = conv_out_->forward(torch::silu(norm_out_->forward(h)));
    const std::vector<int64_t> normalized_shape(h.sizes().begin() + 1, h.sizes().end());
    return {torch::layer_norm(h, normalized_shape, {}, {}, 1e-6), true};
}

// --- DiffusionDecoder ------------------------------------------------------------

DiffusionDecoderImpl::DiffusionDecoderImpl(const DecoderConfig& config, int latent_channels, int downsample_factor)
    : downsample_factor_(downsample_factor), latent_channels_(latent_channels) {
    config.validate();
    UNetOptions options;
    options.in_channels = 3 + latent_channels;
    options.out_channels = 3;
    options.widths = config.stage_widths();
    options.blocks_per_stage = config.blocks_per_stage;
    options.t_emb_dim = config.t_emb_dim;
    unet_ = register_module("unet", UNet(options));
}

torch::Tensor DiffusionDecoderImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const Latent& z) {
    const auto& zv = z.values;
    if (x_t.dim() != 4 || zv.dim() != 4 || zv.size(0) != x_t.size(0) || zv.size(1) != latent_channels_ ||
        zv.size(2) * downsample_factor_ != x_t.size(2) || zv.size(3) * downsample_factor_ != x_t.size(3)) {
        std::ostringstream msg;
        msg << "latent " << zv.sizes() << " does not match image " << x_t.sizes() << " at downsample factor "
            << downsample_factor_;
        throw ShapeError(msg.str());
    }
    const auto f = static_cast<double>(downsample_factor_);
    auto z_up = torch::upsample_nearest2d(zv, std::nullopt, std::vector<double>{f, f});
    return unet_->forward(torch::cat({x_t, z_up}, 1), t);
}

torch::Tensor DiffusionDecoderImpl::forward(const torch::Tensor& x_t, double t, const Latent& z) {
    return forward(x_t, torch::full({x_t.size(0)}, t, torch::kFloat32), z);
}

int64_t decoder_parameter_count(const DecoderConfig& config, int latent_channels) {
    UNetOptions options;
    options.in_channels = 3 + latent_channels;
    options.out_channels = 3;
    options.widths = config.stage_widths();
    options.blocks_per_stage = config.blocks_per_stage;
    options.t_emb_dim = config.t_emb_dim;
    return UNetImpl::parameter_count(options);
}

// --- PixelDecoder -------------------------------------------------------------------

PixelDecoderImpl::PixelDecoderImpl(const EncoderConfig& config) {
    config.validate();
    auto widths = config.stage_widths();
    int ch = widths.back();
    conv_in_ = register_module("conv_in", conv3x3(config.latent_channels, ch));
    blocks_.push_back(register_module("block_0", ResBlock(ch, ch, 0)));
    blocks_per_upsampler_.push_back(1);
    for (int s = static_cast<int>(widths.size()) - 1; s >= 0; --s) {
        int count = 0;
        for (int b = 0; b < config.blocks_per_stage; ++b) {
            blocks_.push_back(register_module("block_" + std::to_string(blocks_.size()), ResBlock(ch, widths[s], 0)));
            ch = widths[s];
            ++count;
        }
        blocks_per_upsampler_.push_back(count);
        if (s > 0) {
            upsamplers_.push_back(register_module("upsample_" + std::to_string(upsamplers_.size()), conv3x3(ch, ch)));
        }
    }
    norm_out_ = register_module("norm_out", group_norm(ch));
    conv_out_ = register_module("conv_out", conv3x3(ch, 3));
}

torch::Tensor PixelDecoderImpl::forward(const torch::Tensor& z) {
    auto h = conv_in_->forward(z);
    size_t block = 0;
    for (size_t group = 0; group < blocks_per_upsampler_.size(); ++group) {
        for (int b = 0; b < blocks_per_upsampler_[group]; ++b) {
            h = blocks_[block++]->forward(h);
        }
        // group 0 is the mid block; groups 1..S are stages, all but the last followed by an upsample
        if (group >= 1 && group - 1 < upsamplers_.size()) {
            h = torch::upsample_nearest2d(h, std::nullopt, std::vector<double>{2.0, 2.0});
            h = upsamplers_[group - 1]->forward(h);
        }
    }
    return conv_out_->forward(torch::silu(norm_out_->forward(h)));
}

// --- Discriminator --------------------------------------------------------------------

DiscriminatorImpl::DiscriminatorImpl(int width) {
    body_ = register_module(
        "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, width, 4).stride(2).padding(1)),
                               nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                               nn::Conv2d(nn::Conv2dOptions(width, 2 * width, 4).stride(2).padding(1)),
                               nn::GroupNorm(nn::GroupNormOptions(norm_groups(2 * width), 2 * width)),
                               nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                               nn::Conv2d(nn::Conv2dOptions(2 * width, 1, 3).padding(1))));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) { return body_->forward(x); }

// --- LatentGenerator --------------------------------------------------------------------

LatentGeneratorImpl::LatentGeneratorImpl(LatentGeneratorOptions options) : options_(std::move(options)) {
    require_positive(options_.num_classes, "num_classes");
    UNetOptions unet;
    unet.in_channels = options_.latent_channels;
    unet.out_channels = options_.latent_channels;
    unet.widths = options_.widths;
    unet.blocks_per_stage = options_.blocks_per_stage;
    unet.t_emb_dim = options_.t_emb_dim;
    unet.num_classes = options_.num_classes;
    unet_ = register_module("unet", UNet(unet));
}

torch::Tensor LatentGeneratorImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t,
                                           const torch::Tensor& class_ids) {
    if (class_ids.dim() != 1 || class_ids.size(0) != z_t.size(0)) {
        throw ShapeError("latent generator expects one class id per sample");
    }
    const auto lo = class_ids.min().item<int64_t>();
    const auto hi = class_ids.max().item<int64_t>();
    if (lo < kNullClass || hi >= options_.num_classes) {
        std::ostringstream msg;
        msg << "class ids span [" << lo << ", " << hi << "], valid range is [0, " << options_.num_classes
            << ") or the null class";
        throw DomainError(msg.str());
    }
    auto embedding_index = torch::where(class_ids == kNullClass, torch::full_like(class_ids, options_.num_classes),
                                        class_ids);
    return unet_->forward(z_t, t, embedding_index);
}

torch::Tensor LatentGeneratorImpl::forward(const torch::Tensor& z_t, double t, int64_t class_id) {
    const auto n = z_t.size(0);
    return forward(z_t, torch::full({n}, t, torch::kFloat32), torch::full({n}, class_id, torch::kInt64));
}

// --- init --------------------------------------------------------------------------

void initialize_parameters(nn::Module& module, uint64_t seed) {
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto uniform_fill = [&](torch::Tensor& p, double bound) {
        p.copy_(torch::rand(p.sizes(), gen) * (2.0 * bound) - bound);
    };
    for (auto& child : module.modules(/*include_self=*/true)) {
        if (auto* conv = child->as<nn::Conv2d>()) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(conv->weight[0].numel()));
            uniform_fill(conv->weight, bound);
            if (conv->bias.defined()) uniform_fill(conv->bias, bound);
        } else if (auto* linear = child->as<nn::Linear>()) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(linear->weight.size(1)));
            uniform_fill(linear->weight, bound);
            if (linear->bias.defined()) uniform_fill(linear->bias, bound);
        } else if (auto* emb = child->as<nn::Embedding>()) {
            emb->weight.copy_(torch::randn(emb->weight.sizes(), gen));
        } else if (auto* norm = child->as<nn::GroupNorm>()) {
            if (norm->weight.defined()) norm->weight.fill_(1.0);
            if (norm->bias.defined()) norm->bias.fill_(0.0);
        }
    }
    // small rather than zero: a zero output layer gives a t-independent output and
    // no gradient to anything upstream on the first step
    for (auto& child : module.modules(/*include_self=*/true)) {
        if (auto* unet = child->as<UNetImpl>()) {
            auto out = unet->output_projection();
            out->weight.mul_(unet->options().out_init_scale);
            out->bias.mul_(unet->options().out_init_scale);
        }
    }
}

int64_t count_parameters(const nn::Module& module) {
    int64_t n = 0;
    for (const auto& p : module.parameters()) {
        n += p.numel();
    }
    return n;
}

}  // namespace dito
