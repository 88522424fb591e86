// Command-line front end: train-tokenizer, reconstruct, eval, train-latent, sample.

#include <iostream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "dito/commands.hpp"
#include "dito/errors.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Diffusion tokenizer toolkit"};
    app.require_subcommand(1);

    dito::TrainTokenizerOptions train_opts;
    std::string resume;
    auto* train = app.add_subcommand("train-tokenizer", "Train a tokenizer from an INI config");
    train->add_option("config", train_opts.config, "Config file")->required()->check(CLI::ExistingFile);
    train->add_flag("--dry-run", train_opts.dry_run, "Validate the config, build the model and print its size");
    train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

    dito::ReconstructOptions recon_opts;
    auto* recon = app.add_subcommand("reconstruct", "Reconstruct a folder of images");
    recon->add_option("checkpoint", recon_opts.checkpoint)->required()->check(CLI::ExistingFile);
    recon->add_option("input_dir", recon_opts.input_dir)->required()->check(CLI::ExistingDirectory);
    recon->add_option("output_dir", recon_opts.output_dir)->required();
    recon->add_option("--steps", recon_opts.steps, "Decoding steps")->capture_default_str();
    recon->add_option("--seed", recon_opts.seed, "Decoding noise seed")->capture_default_str();

    dito::EvalOptions eval_opts;
    std::string steps_list = "1,2,5,10,20,50";
    int num_images = 0;
    auto* eval = app.add_subcommand("eval", "Evaluate a tokenizer and print a JSON report");
    eval->add_option("checkpoint", eval_opts.checkpoint)->required()->check(CLI::ExistingFile);
    eval->add_option("dataset", eval_opts.dataset, "synth:<kind> or a folder")->required();
    eval->add_option("--metric", eval_opts.metric)
        ->required()
        ->check(CLI::IsMember({"rfid", "psnr", "ssim", "steps_sweep"}));
    eval->add_option("--steps", eval_opts.steps, "Decoding steps")->capture_default_str();
    eval->add_option("--steps-list", steps_list, "Comma-separated steps for steps_sweep")->capture_default_str();
    eval->add_option("--seed", eval_opts.seed)->capture_default_str();
    eval->add_option("--n", eval_opts.n, "Evaluation subset size")->capture_default_str();
    eval->add_option("--num-images", num_images, "Synthetic corpus size (default: n)");

    dito::TrainLatentOptions latent_opts;
    std::string latent_resume;
    auto* latent = app.add_subcommand("train-latent", "Train a class-conditional latent generator");
    latent->add_option("config", latent_opts.config)->required()->check(CLI::ExistingFile);
    latent->add_flag("--dry-run", latent_opts.dry_run);
    latent->add_option("--resume", latent_resume)->check(CLI::ExistingFile);

    dito::SampleOptions sample_opts;
    auto* sample = app.add_subcommand("sample", "Generate images with a latent generator");
    sample->add_option("tokenizer", sample_opts.tokenizer)->required()->check(CLI::ExistingFile);
    sample->add_option("generator", sample_opts.generator)->required()->check(CLI::ExistingFile);
    sample->add_option("--class", sample_opts.class_id)->capture_default_str();
    sample->add_option("--n", sample_opts.n)->capture_default_str();
    sample->add_option("--guidance", sample_opts.guidance)->capture_default_str();
    sample->add_option("--steps", sample_opts.steps, "Latent sampling steps")->capture_default_str();
    sample->add_option("--decode-steps", sample_opts.decode_steps)->capture_default_str();
    sample->add_option("--seed", sample_opts.seed)->capture_default_str();
    sample->add_option("--out", sample_opts.output_dir)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            if (!resume.empty()) train_opts.resume = resume;
            return dito::cmd_train_tokenizer(train_opts, std::cout);
        }
        if (*recon) return dito::cmd_reconstruct(recon_opts, std::cout);
        if (*eval) {
            eval_opts.steps_list = dito::parse_steps_list(steps_list);
            if (num_images > 0) eval_opts.num_images = num_images;
            return dito::cmd_eval(eval_opts, std::cout);
        }
        if (*latent) {
            if (!latent_resume.empty()) latent_opts.resume = latent_resume;
            return dito::cmd_train_latent(latent_opts, std::cout);
        }
        if (*sample) return dito::cmd_sample(sample_opts, std::cout);
    } catch (const dito::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
