#include "dito/commands.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <zlib.h>

#include "dito/errors.hpp"
#include "dito/evaluation.hpp"
#include "dito/image_io.hpp"
#include "dito/latent_generation.hpp"
#include "dito/sampler.hpp"

namespace dito {
namespace fs = std::filesystem;

std::string checkpoint_id(const fs::path& checkpoint) {
    std::ifstream in(checkpoint, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + checkpoint.string());
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(blob.data()), static_cast<uInt>(blob.size()));
    std::ostringstream hex;
    hex << std::hex << std::setw(8) << std::setfill('0') << static_cast<uint32_t>(crc);
    return hex.str();
}

LoadedTokenizer load_tokenizer(const fs::path& checkpoint) {
    const auto ckpt = load_checkpoint(checkpoint);
    if (ckpt.kind != "tokenizer") {
        throw ConfigError(checkpoint.string() + " holds a " + ckpt.kind + " checkpoint, not a tokenizer");
    }
    LoadedTokenizer out;
    const auto model_config = tokenizer_config_from_json(ckpt.config.at("model"));
    const auto train = train_config_from_json(ckpt.config.at("train"));
    out.model = TokenizerModel::create(model_config, train.objective, train.seed);
    out.model.load_parameters(ckpt.arrays, "model.");
    out.model.encoder->eval();
    out.data = data_config_from_json(ckpt.config.at("data"));
    out.model_id = checkpoint_id(checkpoint);
    return out;
}

std::vector<int> parse_steps_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            const int v = std::stoi(item, &used);
            if (used != item.size() || v < 1) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("invalid entry '" + item + "' in steps list '" + text + "'");
        }
    }
    if (out.empty()) throw ConfigError("steps list is empty");
    return out;
}

// --- train-tokenizer ----------------------------------------------------------------------

int cmd_train_tokenizer(const TrainTokenizerOptions& options, std::ostream& out) {
    const auto cfg = load_tokenizer_config(options.config);
    std::optional<Checkpoint> encoder_source;
    if (!cfg.init_encoder_from.empty()) encoder_source = load_checkpoint(cfg.init_encoder_from);
    auto state = init_train_state(cfg.model, cfg.train, encoder_source ? &encoder_source->arrays : nullptr);

    if (options.dry_run) {
        out << "config ok\n";
        out << "parameters: " << state.model.parameter_count() << "\n";
        out << "  encoder: " << count_parameters(*state.model.encoder) << "\n";
        if (state.model.decoder) out << "  decoder: " << count_parameters(*state.model.decoder) << "\n";
        if (state.model.pixel_decoder) out << "  pixel_decoder: " << count_parameters(*state.model.pixel_decoder) << "\n";
        if (state.model.discriminator) out << "  discriminator: " << count_parameters(*state.model.discriminator) << "\n";
        return 0;
    }

    const auto output_dir = resolve_output_dir(cfg.run.output_dir);
    if (options.resume) {
        const auto ckpt = load_checkpoint(*options.resume);
        if (ckpt.kind != "tokenizer") throw ConfigError("cannot resume a tokenizer run from a " + ckpt.kind + " checkpoint");
        if (ckpt.config.at("model") != to_json(cfg.model)) {
            throw ConfigError("checkpoint model configuration differs from " + options.config.string());
        }
        state.load_arrays(ckpt.arrays);
        truncate_log(output_dir / "train_log.jsonl", state.step);
        out << "resumed at step " << state.step << "\n";
    }

    const auto data = load_source(cfg.data.source, cfg.data.num_images, cfg.data.resolution, cfg.data.seed,
                                  cfg.data.num_classes, Split::train);
    FitOptions fit_options;
    fit_options.output_dir = output_dir;
    fit_options.checkpoint_every = cfg.run.checkpoint_every;
    fit_options.config_snapshot = snapshot(cfg);
    const int64_t report_every = std::max<int64_t>(1, cfg.train.total_steps / 20);
    fit_options.on_step = [&](const StepRecord& r) {
        if (r.step % report_every == 0 || r.step == cfg.train.total_steps) {
            out << "step " << r.step;
            for (const auto& [name, v] : r.components) out << "  " << name << " " << v;
            out << "\n";
        }
    };
    fit(state, cfg.train, data, fit_options);
    out << "wrote " << checkpoint_path(output_dir, state.step).string() << "\n";
    return 0;
}

// --- reconstruct ------------------------------------------------------------------------------

int cmd_reconstruct(const ReconstructOptions& options, std::ostream& out) {
    const auto files = list_image_files(options.input_dir);
    if (files.empty()) throw IoError("no PNG/JPEG images in " + options.input_dir.string());
    auto loaded = load_tokenizer(options.checkpoint);
    const int f = loaded.model.config.encoder.downsample_factor;

    std::vector<torch::Tensor> inputs;
    for (const auto& file : files) {
        auto image = read_image(file);
        if (image.size(1) % f != 0 || image.size(2) % f != 0) {
            std::ostringstream msg;
            msg << file.filename().string() << " is " << image.size(2) << "x" << image.size(1)
                << ", not a multiple of the downsample factor " << f << "; crop or resize it to a multiple of " << f;
            throw ShapeError(msg.str());
        }
        inputs.push_back(image);
    }

    fs::create_directories(options.output_dir);
    nlohmann::ordered_json report;
    report["checkpoint"] = loaded.model_id;
    report["steps"] = options.steps;
    report["seed"] = options.seed;
    report["images"] = nlohmann::ordered_json::array();
    double psnr_total = 0.0, ssim_total = 0.0;
    const SolverConfig solver{options.steps, options.seed};
    for (size_t i = 0; i < files.size(); ++i) {
        auto recon = reconstruct(loaded.model, inputs[i].unsqueeze(0), solver, {static_cast<int64_t>(i)})[0];
        const auto name = files[i].stem().string() + "_pair.png";
        write_png_grid(options.output_dir / name, {inputs[i], recon.clamp(kPixelMin, kPixelMax)}, 2);
        const double p = psnr(inputs[i], recon);
        const auto side = std::min(inputs[i].size(1), inputs[i].size(2));
        const int window = static_cast<int>(side >= 7 ? 7 : (side % 2 == 1 ? side : side - 1));
        const double s = ssim(inputs[i], recon, window);
        psnr_total += p;
        ssim_total += s;
        nlohmann::ordered_json entry{{"input", files[i].filename().string()}, {"output", name}, {"ssim", s}};
        entry["psnr"] = std::isinf(p) ? nlohmann::ordered_json("+inf") : nlohmann::ordered_json(p);
        report["images"].push_back(entry);
    }
    const double n = static_cast<double>(files.size());
    report["mean_psnr"] = std::isinf(psnr_total) ? nlohmann::ordered_json("+inf") : nlohmann::ordered_json(psnr_total / n);
    report["mean_ssim"] = ssim_total / n;
    std::ofstream(options.output_dir / "metrics.json") << report.dump(2) << "\n";
    out << "reconstructed " << files.size() << " images into " << options.output_dir.string() << "\n";
    return 0;
}

// --- eval ------------------------------------------------------------------------------------------

int cmd_eval(const EvalOptions& options, std::ostream& out) {
    static const std::vector<std::string> kMetrics{"rfid", "psnr", "ssim", "steps_sweep"};
    if (std::find(kMetrics.begin(), kMetrics.end(), options.metric) == kMetrics.end()) {
        throw ConfigError("unknown metric '" + options.metric + "' (expected rfid, psnr, ssim or steps_sweep)");
    }
    auto loaded = load_tokenizer(options.checkpoint);
    const auto data = load_source(options.dataset, static_cast<int>(options.num_images.value_or(options.n)),
                                  loaded.data.resolution, loaded.data.seed + 1, loaded.data.num_classes, Split::eval);
    const auto ids = eval_subset(static_cast<int64_t>(data.size()), options.n, options.seed);
    const auto images = stack_images(data, ids);

    MetricsReport report;
    report.metric = options.metric;
    report.n = options.n;
    report.seed = options.seed;
    report.model_id = loaded.model_id;
    report.solver_steps = options.steps;
    const SolverConfig solver{options.steps, options.seed};

    if (options.metric == "steps_sweep") {
        const auto rows = steps_sweep(loaded.model, images, options.steps_list, options.seed, ids);
        nlohmann::ordered_json table = nlohmann::ordered_json::array();
        for (const auto& r : rows) {
            nlohmann::ordered_json row;
            row["steps"] = r.steps;
            row["rfid"] = r.rfid;
            row["psnr"] = r.psnr;
            row["ssim"] = r.ssim;
            table.push_back(row);
        }
        report.table = table;
        report.value = rows.back().rfid;
        report.solver_steps = rows.back().steps;
    } else if (options.metric == "rfid") {
        auto net = make_fid_net();
        report.value = rfid(
            [&](const torch::Tensor& x, const std::vector<int64_t>& item_ids) {
                return reconstruct(loaded.model, x, solver, item_ids);
            },
            images, ids, *net);
    } else {
        auto recon = reconstruct(loaded.model, images, solver, ids);
        report.value = options.metric == "psnr" ? mean_psnr(images, recon) : ssim(images, recon);
    }
    out << report.to_json();
    return 0;
}

// --- train-latent -------------------------------------------------------------------------------

int cmd_train_latent(const TrainLatentOptions& options, std::ostream& out) {
    const auto cfg = load_latent_config(options.config);
    auto tokenizer = load_tokenizer(cfg.tokenizer_checkpoint);
    auto state = init_gen_state(cfg.gen, tokenizer.model.config.encoder.latent_channels);
    if (options.dry_run) {
        out << "config ok\n";
        out << "parameters: " << count_parameters(*state.net) << "\n";
        return 0;
    }
    const auto output_dir = resolve_output_dir(cfg.run.output_dir);
    if (options.resume) {
        const auto ckpt = load_checkpoint(*options.resume);
        if (ckpt.kind != "latent_generator") {
            throw ConfigError("cannot resume a latent generator run from a " + ckpt.kind + " checkpoint");
        }
        state.load_arrays(ckpt.arrays);
        truncate_log(output_dir / "train_log.jsonl", state.step);
        out << "resumed at step " << state.step << "\n";
    }
    if (cfg.data.resolution % tokenizer.model.config.encoder.downsample_factor != 0) {
        throw ConfigError("data.resolution is not divisible by the tokenizer downsample factor");
    }
    const auto data = load_source(cfg.data.source, cfg.data.num_images, cfg.data.resolution, cfg.data.seed,
                                  cfg.data.num_classes, Split::eval);
    if (!data.labelled()) throw ConfigError("latent generator training needs a labelled dataset");
    const auto latents = encode_dataset(tokenizer.model, data);
    const auto labels = torch::tensor(data.labels, torch::kInt64);

    LatentFitOptions fit_options;
    fit_options.output_dir = output_dir;
    fit_options.checkpoint_every = cfg.run.checkpoint_every;
    auto snap = snapshot(cfg);
    snap["latent_shape"] = std::vector<int64_t>(latents.sizes().begin() + 1, latents.sizes().end());
    snap["resolution"] = cfg.data.resolution;
    fit_options.config_snapshot = snap;
    const int64_t report_every = std::max<int64_t>(1, cfg.gen.total_steps / 20);
    fit_options.on_step = [&](const GenStepRecord& r) {
        if (r.step % report_every == 0 || r.step == cfg.gen.total_steps) {
            out << "step " << r.step << "  flow_matching " << r.loss << "\n";
        }
    };
    fit_latent(state, cfg.gen, latents, labels, fit_options);
    out << "wrote " << checkpoint_path(output_dir, state.step).string() << "\n";
    return 0;
}

// --- sample -------------------------------------------------------------------------------------

int cmd_sample(const SampleOptions& options, std::ostream& out) {
    auto tokenizer = load_tokenizer(options.tokenizer);
    const auto ckpt = load_checkpoint(options.generator);
    if (ckpt.kind != "latent_generator") throw ConfigError(options.generator.string() + " is not a generator checkpoint");
    auto gen_cfg = gen_config_from_json(ckpt.config.at("generator"));
    const auto shape = ckpt.config.at("latent_shape").get<std::vector<int64_t>>();
    const int resolution = ckpt.config.at("resolution").get<int>();
    const int c = tokenizer.model.config.encoder.latent_channels;
    const int f = tokenizer.model.config.encoder.downsample_factor;
    if (shape.size() != 3 || shape[0] != c || shape[1] * f != resolution || shape[2] * f != resolution) {
        throw ConfigError("generator latents do not match the tokenizer's latent shape");
    }
    if (options.n < 0) throw ConfigError("n must be nonnegative");
    if (options.class_id < 0 || options.class_id >= gen_cfg.num_classes) {
        throw ConfigError("class " + std::to_string(options.class_id) + " is outside [0, " +
                          std::to_string(gen_cfg.num_classes) + ")");
    }
    auto state = init_gen_state(gen_cfg, c);
    state.load_arrays(ckpt.arrays);
    state.net->eval();

    gen_cfg.guidance_scale = options.guidance;
    gen_cfg.steps = options.steps;
    gen_cfg.validate();
    const auto images = generate(*state.net, tokenizer.model, options.class_id, options.n, resolution, gen_cfg,
                                 SolverConfig{options.decode_steps, options.seed}, options.seed);

    fs::create_directories(options.output_dir);
    nlohmann::ordered_json manifest;
    manifest["tokenizer"] = tokenizer.model_id;
    manifest["generator"] = checkpoint_id(options.generator);
    manifest["class_id"] = options.class_id;
    manifest["guidance"] = options.guidance;
    manifest["sampling_steps"] = options.steps;
    manifest["decode_steps"] = options.decode_steps;
    manifest["samples"] = nlohmann::ordered_json::array();
    std::vector<torch::Tensor> tiles;
    for (int64_t i = 0; i < options.n; ++i) {
        manifest["samples"].push_back({{"index", i}, {"seed", options.seed}, {"noise_id", i}, {"class_id", options.class_id}});
        tiles.push_back(images[i].clamp(kPixelMin, kPixelMax));
    }
    if (!tiles.empty()) write_png_grid(options.output_dir / "samples.png", tiles, 8);
    std::ofstream(options.output_dir / "manifest.json") << manifest.dump(2) << "\n";
    out << "wrote " << options.n << " samples to " << options.output_dir.string() << "\n";
    return 0;
}

}  // namespace dito
