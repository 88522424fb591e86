#include "dito/tokenizer.hpp"

#include <map>
#include <sstream>

#include "dito/data.hpp"
#include "dito/errors.hpp"

namespace dito {

namespace {

void copy_matching(const NamedTensors& params, const NamedTensors& arrays, const std::string& prefix,
                   const std::string& only_prefix) {
    std::map<std::string, torch::Tensor> lookup;
    for (const auto& [name, value] : arrays) {
        if (name.rfind(prefix, 0) == 0) lookup.emplace(name.substr(prefix.size()), value);
    }
    torch::NoGradGuard no_grad;
    for (const auto& [name, p] : params) {
        if (name.rfind(only_prefix, 0) != 0) continue;
        auto it = lookup.find(name);
        if (it == lookup.end()) {
            throw IoError("checkpoint has no array for parameter " + name);
        }
        if (it->second.sizes() != p.sizes()) {
            std::ostringstream msg;
            msg << "array " << name << " has shape " << it->second.sizes() << ", model expects " << p.sizes();
            throw ShapeError(msg.str());
        }
        p.copy_(it->second);
    }
}

}  // namespace

TokenizerModel TokenizerModel::create(const TokenizerConfig& config, const Objective& objective, uint64_t seed) {
    config.encoder.validate();
    TokenizerModel model;
    model.config = config;
    model.objective = objective;
    model.encoder = Encoder(config.encoder);
    initialize_parameters(*model.encoder, mix_seed(seed, 1));
    if (config.kind == TokenizerKind::dito) {
        model.decoder = DiffusionDecoder(config.decoder, config.encoder.latent_channels, config.encoder.downsample_factor);
        initialize_parameters(*model.decoder, mix_seed(seed, 2));
    } else {
        model.pixel_decoder = PixelDecoder(config.encoder);
        model.discriminator = Discriminator();
        initialize_parameters(*model.pixel_decoder, mix_seed(seed, 3));
        initialize_parameters(*model.discriminator, mix_seed(seed, 4));
    }
    return model;
}

Latent TokenizerModel::encode(const torch::Tensor& images) const { return encoder.ptr()->encode(images); }

NamedTensors TokenizerModel::named_parameters() const {
    NamedTensors out = dito::named_parameters(*encoder, "encoder.");
    auto append = [&](const torch::nn::Module& m, const std::string& prefix) {
        auto more = dito::named_parameters(m, prefix);
        out.insert(out.end(), more.begin(), more.end());
    };
    if (decoder) append(*decoder, "decoder.");
    if (pixel_decoder) append(*pixel_decoder, "pixel_decoder.");
    if (discriminator) append(*discriminator, "discriminator.");
    return out;
}

void TokenizerModel::load_parameters(const NamedTensors& arrays, const std::string& prefix) {
    copy_matching(named_parameters(), arrays, prefix, "");
}

void TokenizerModel::load_encoder(const NamedTensors& arrays, const std::string& prefix) {
    copy_matching(named_parameters(), arrays, prefix, "encoder.");
}

int64_t TokenizerModel::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : named_parameters()) n += p.numel();
    return n;
}

void TokenizerModel::set_encoder_trainable(bool trainable) {
    for (auto& p : encoder->parameters()) p.set_requires_grad(trainable);
}

}  // namespace dito
