#include "dito/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dito/errors.hpp"

namespace dito {
namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
    const auto text = trim(raw);
    T value{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end || text.empty()) {
        throw ConfigError("config key '" + key + "': cannot parse '" + raw + "' as a number");
    }
    return value;
}

bool parse_bool(const std::string& key, const std::string& raw) {
    const auto text = trim(raw);
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + raw + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& raw) {
    std::vector<int> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, item));
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
}

using Setter = std::function<void(const std::string& key, const std::string& value)>;
using Schema = std::map<std::string, std::map<std::string, Setter>>;

std::set<std::string> apply_schema(const std::string& text, const Schema& schema) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    std::set<std::string> seen;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw ConfigError("config key '" + section + "' must be inside a section");
        }
        auto sec = schema.find(section);
        if (sec == schema.end()) throw ConfigError("unknown config section [" + section + "]");
        for (const auto& [key, value] : body) {
            const auto full = section + "." + key;
            auto setter = sec->second.find(key);
            if (setter == sec->second.end()) throw ConfigError("unknown config key '" + full + "'");
            setter->second(full, value.data());
            seen.insert(full);
        }
    }
    return seen;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void add_data_schema(Schema& schema, DataConfig& data) {
    schema["data"] = {
        {"source", [&](auto&, auto& v) { data.source = trim(v); }},
        {"num_images", [&](auto& k, auto& v) { data.num_images = parse_number<int>(k, v); }},
        {"resolution", [&](auto& k, auto& v) { data.resolution = parse_number<int>(k, v); }},
        {"seed", [&](auto& k, auto& v) { data.seed = parse_number<uint64_t>(k, v); }},
        {"num_classes", [&](auto& k, auto& v) { data.num_classes = parse_number<int>(k, v); }},
    };
}

void add_run_schema(Schema& schema, RunConfig& run) {
    schema["run"] = {
        {"output_dir", [&](auto&, auto& v) { run.output_dir = trim(v); }},
        {"checkpoint_every", [&](auto& k, auto& v) { run.checkpoint_every = parse_number<int64_t>(k, v); }},
    };
}

void validate_data(const DataConfig& data) {
    if (data.resolution < 16) throw ConfigError("data.resolution must be at least 16");
    if (data.num_images <= 0) throw ConfigError("data.num_images must be positive");
    if (data.num_classes <= 0) throw ConfigError("data.num_classes must be positive");
}

}  // namespace

std::string_view to_string(TimeSampling sampling) {
    return sampling == TimeSampling::uniform ? "uniform" : "stratified";
}

TimeSampling parse_time_sampling(std::string_view name) {
    if (name == "uniform") return TimeSampling::uniform;
    if (name == "stratified") return TimeSampling::stratified;
    throw ConfigError("unknown time_sampling '" + std::string(name) + "' (expected uniform or stratified)");
}

TokenizerRunConfig parse_tokenizer_config(const std::string& text) {
    TokenizerRunConfig cfg;
    // the preset is applied first so that explicit keys override it regardless of order
    std::optional<std::string> preset;
    std::map<std::string, std::string> model_keys;
    Schema schema;
    auto record_model = [&](const char* name) {
        return Setter([&, name](const std::string&, const std::string& v) { model_keys[name] = v; });
    };
    schema["model"] = {
        {"tokenizer", record_model("tokenizer")},
        {"preset", [&](auto&, auto& v) { preset = trim(v); }},
        {"downsample_factor", record_model("downsample_factor")},
        {"latent_channels", record_model("latent_channels")},
        {"encoder_width", record_model("encoder_width")},
        {"encoder_blocks", record_model("encoder_blocks")},
        {"decoder_channels", record_model("decoder_channels")},
        {"t_emb_dim", record_model("t_emb_dim")},
        {"blocks_per_stage", record_model("blocks_per_stage")},
        {"sigma_min", record_model("sigma_min")},
    };
    auto& tr = cfg.train;
    schema["train"] = {
        {"objective", [&](auto&, auto& v) { tr.objective.kind = parse_objective(trim(v)); }},
        {"noise_sync_prob", [&](auto& k, auto& v) { tr.noise_sync_prob = parse_number<double>(k, v); }},
        {"perceptual_weight", [&](auto& k, auto& v) { tr.perceptual_weight = parse_number<double>(k, v); }},
        {"batch_size", [&](auto& k, auto& v) { tr.batch_size = parse_number<int>(k, v); }},
        {"total_steps", [&](auto& k, auto& v) { tr.total_steps = parse_number<int64_t>(k, v); }},
        {"learning_rate", [&](auto& k, auto& v) { tr.learning_rate = parse_number<double>(k, v); }},
        {"weight_decay", [&](auto& k, auto& v) { tr.weight_decay = parse_number<double>(k, v); }},
        {"adam_beta1", [&](auto& k, auto& v) { tr.adam_beta1 = parse_number<double>(k, v); }},
        {"adam_beta2", [&](auto& k, auto& v) { tr.adam_beta2 = parse_number<double>(k, v); }},
        {"grad_clip", [&](auto& k, auto& v) { tr.grad_clip = parse_number<double>(k, v); }},
        {"freeze_encoder", [&](auto& k, auto& v) { tr.freeze_encoder = parse_bool(k, v); }},
        {"init_encoder_from", [&](auto&, auto& v) { cfg.init_encoder_from = trim(v); }},
        {"time_sampling", [&](auto&, auto& v) { tr.time_sampling = parse_time_sampling(trim(v)); }},
        {"augment", [&](auto& k, auto& v) { tr.augment = parse_bool(k, v); }},
        {"repeat", [&](auto& k, auto& v) { tr.repeat = parse_bool(k, v); }},
        {"seed", [&](auto& k, auto& v) { tr.seed = parse_number<uint64_t>(k, v); }},
        {"l1_weight", [&](auto& k, auto& v) { tr.l1_weight = parse_number<double>(k, v); }},
        {"lpips_weight", [&](auto& k, auto& v) { tr.lpips_weight = parse_number<double>(k, v); }},
        {"gan_weight", [&](auto& k, auto& v) { tr.gan_weight = parse_number<double>(k, v); }},
        {"gan_warmup_steps", [&](auto& k, auto& v) { tr.gan_warmup_steps = parse_number<int64_t>(k, v); }},
    };
    add_data_schema(schema, cfg.data);
    add_run_schema(schema, cfg.run);
    const auto seen = apply_schema(text, schema);

    if (preset) cfg.model = TokenizerConfig::ladder(*preset);
    for (const auto& [name, v] : model_keys) {
        const auto key = "model." + name;
        if (name == "tokenizer") {
            const auto kind = trim(v);
            if (kind == "dito") {
                cfg.model.kind = TokenizerKind::dito;
            } else if (kind == "glpto") {
                cfg.model.kind = TokenizerKind::glpto;
            } else {
                throw ConfigError("config key 'model.tokenizer': expected dito or glpto, got '" + kind + "'");
            }
        } else if (name == "downsample_factor") {
            cfg.model.encoder.downsample_factor = parse_number<int>(key, v);
        } else if (name == "latent_channels") {
            cfg.model.encoder.latent_channels = parse_number<int>(key, v);
        } else if (name == "encoder_width") {
            cfg.model.encoder.base_width = parse_number<int>(key, v);
        } else if (name == "encoder_blocks") {
            cfg.model.encoder.blocks_per_stage = parse_number<int>(key, v);
        } else if (name == "decoder_channels") {
            const auto list = parse_int_list(key, v);
            if (list.size() != 3) throw ConfigError("config key 'model.decoder_channels': expected three widths");
            cfg.model.decoder.channels = {list[0], list[1], list[2]};
        } else if (name == "t_emb_dim") {
            cfg.model.decoder.t_emb_dim = parse_number<int>(key, v);
        } else if (name == "blocks_per_stage") {
            cfg.model.decoder.blocks_per_stage = parse_number<int>(key, v);
        } else if (name == "sigma_min") {
            cfg.train.objective.sigma_min = parse_number<double>(key, v);
        }
    }

    if (cfg.model.kind == TokenizerKind::dito && !seen.count("train.objective")) {
        throw ConfigError("missing required config key 'train.objective'");
    }
    cfg.model.encoder.validate();
    cfg.model.decoder.validate();
    cfg.train.validate();
    validate_data(cfg.data);
    if (cfg.run.checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be nonnegative");
    if (cfg.data.resolution % cfg.model.encoder.downsample_factor != 0) {
        throw ConfigError("data.resolution must be divisible by model.downsample_factor");
    }
    return cfg;
}

TokenizerRunConfig load_tokenizer_config(const fs::path& path) { return parse_tokenizer_config(read_file(path)); }

LatentRunConfig parse_latent_config(const std::string& text) {
    LatentRunConfig cfg;
    auto& g = cfg.gen;
    Schema schema;
    schema["tokenizer"] = {
        {"checkpoint", [&](auto&, auto& v) { cfg.tokenizer_checkpoint = trim(v); }},
    };
    schema["generator"] = {
        {"widths", [&](auto& k, auto& v) { g.widths = parse_int_list(k, v); }},
        {"blocks_per_stage", [&](auto& k, auto& v) { g.blocks_per_stage = parse_number<int>(k, v); }},
        {"t_emb_dim", [&](auto& k, auto& v) { g.t_emb_dim = parse_number<int>(k, v); }},
    };
    schema["train"] = {
        {"cfg_dropout_prob", [&](auto& k, auto& v) { g.cfg_dropout_prob = parse_number<double>(k, v); }},
        {"guidance_scale", [&](auto& k, auto& v) { g.guidance_scale = parse_number<double>(k, v); }},
        {"sampling_steps", [&](auto& k, auto& v) { g.steps = parse_number<int>(k, v); }},
        {"batch_size", [&](auto& k, auto& v) { g.batch_size = parse_number<int>(k, v); }},
        {"total_steps", [&](auto& k, auto& v) { g.total_steps = parse_number<int64_t>(k, v); }},
        {"learning_rate", [&](auto& k, auto& v) { g.learning_rate = parse_number<double>(k, v); }},
        {"weight_decay", [&](auto& k, auto& v) { g.weight_decay = parse_number<double>(k, v); }},
        {"adam_beta1", [&](auto& k, auto& v) { g.adam_beta1 = parse_number<double>(k, v); }},
        {"adam_beta2", [&](auto& k, auto& v) { g.adam_beta2 = parse_number<double>(k, v); }},
        {"grad_clip", [&](auto& k, auto& v) { g.grad_clip = parse_number<double>(k, v); }},
        {"time_sampling", [&](auto&, auto& v) { g.time_sampling = parse_time_sampling(trim(v)); }},
        {"sigma_min", [&](auto& k, auto& v) { g.sigma_min = parse_number<double>(k, v); }},
        {"seed", [&](auto& k, auto& v) { g.seed = parse_number<uint64_t>(k, v); }},
    };
    add_data_schema(schema, cfg.data);
    add_run_schema(schema, cfg.run);
    cfg.run.output_dir = "runs/latent";
    const auto seen = apply_schema(text, schema);
    if (!seen.count("tokenizer.checkpoint")) throw ConfigError("missing required config key 'tokenizer.checkpoint'");
    g.num_classes = cfg.data.num_classes;
    g.validate();
    validate_data(cfg.data);
    return cfg;
}

LatentRunConfig load_latent_config(const fs::path& path) { return parse_latent_config(read_file(path)); }

fs::path resolve_output_dir(const fs::path& dir) {
    if (dir.is_absolute()) return dir;
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / dir;
    return dir;
}

// --- JSON snapshots ---------------------------------------------------------------------

nlohmann::json to_json(const TokenizerConfig& c) {
    return {
        {"tokenizer", c.kind == TokenizerKind::dito ? "dito" : "glpto"},
        {"downsample_factor", c.encoder.downsample_factor},
        {"latent_channels", c.encoder.latent_channels},
        {"encoder_width", c.encoder.base_width},
        {"encoder_blocks", c.encoder.blocks_per_stage},
        {"decoder_channels", std::vector<int>(c.decoder.channels.begin(), c.decoder.channels.end())},
        {"t_emb_dim", c.decoder.t_emb_dim},
        {"blocks_per_stage", c.decoder.blocks_per_stage},
    };
}

TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j) {
    TokenizerConfig c;
    c.kind = j.at("tokenizer").get<std::string>() == "glpto" ? TokenizerKind::glpto : TokenizerKind::dito;
    c.encoder.downsample_factor = j.at("downsample_factor").get<int>();
    c.encoder.latent_channels = j.at("latent_channels").get<int>();
    c.encoder.base_width = j.at("encoder_width").get<int>();
    c.encoder.blocks_per_stage = j.at("encoder_blocks").get<int>();
    const auto ch = j.at("decoder_channels").get<std::vector<int>>();
    if (ch.size() != 3) throw IoError("decoder_channels in checkpoint must hold three widths");
    c.decoder.channels = {ch[0], ch[1], ch[2]};
    c.decoder.t_emb_dim = j.at("t_emb_dim").get<int>();
    c.decoder.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    return c;
}

nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"objective", std::string(to_string(c.objective.kind))},
        {"sigma_min", c.objective.sigma_min},
        {"noise_sync_prob", c.noise_sync_prob},
        {"perceptual_weight", c.perceptual_weight},
        {"batch_size", c.batch_size},
        {"total_steps", c.total_steps},
        {"learning_rate", c.learning_rate},
        {"weight_decay", c.weight_decay},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"grad_clip", c.grad_clip},
        {"freeze_encoder", c.freeze_encoder},
        {"time_sampling", std::string(to_string(c.time_sampling))},
        {"augment", c.augment},
        {"repeat", c.repeat},
        {"seed", c.seed},
        {"l1_weight", c.l1_weight},
        {"lpips_weight", c.lpips_weight},
        {"gan_weight", c.gan_weight},
        {"gan_warmup_steps", c.gan_warmup_steps},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.objective.kind = parse_objective(j.at("objective").get<std::string>());
    c.objective.sigma_min = j.at("sigma_min").get<double>();
    c.noise_sync_prob = j.at("noise_sync_prob").get<double>();
    c.perceptual_weight = j.at("perceptual_weight").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.total_steps = j.at("total_steps").get<int64_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.freeze_encoder = j.at("freeze_encoder").get<bool>();
    c.time_sampling = parse_time_sampling(j.at("time_sampling").get<std::string>());
    c.augment = j.at("augment").get<bool>();
    c.repeat = j.at("repeat").get<bool>();
    c.seed = j.at("seed").get<uint64_t>();
    c.l1_weight = j.at("l1_weight").get<double>();
    c.lpips_weight = j.at("lpips_weight").get<double>();
    c.gan_weight = j.at("gan_weight").get<double>();
    c.gan_warmup_steps = j.at("gan_warmup_steps").get<int64_t>();
    return c;
}

nlohmann::json to_json(const GenConfig& c) {
    return {
        {"num_classes", c.num_classes},
        {"cfg_dropout_prob", c.cfg_dropout_prob},
        {"guidance_scale", c.guidance_scale},
        {"sampling_steps", c.steps},
        {"batch_size", c.batch_size},
        {"total_steps", c.total_steps},
        {"learning_rate", c.learning_rate},
        {"weight_decay", c.weight_decay},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"grad_clip", c.grad_clip},
        {"time_sampling", std::string(to_string(c.time_sampling))},
        {"sigma_min", c.sigma_min},
        {"seed", c.seed},
        {"widths", c.widths},
        {"blocks_per_stage", c.blocks_per_stage},
        {"t_emb_dim", c.t_emb_dim},
    };
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
    GenConfig c;
    c.num_classes = j.at("num_classes").get<int>();
    c.cfg_dropout_prob = j.at("cfg_dropout_prob").get<double>();
    c.guidance_scale = j.at("guidance_scale").get<double>();
    c.steps = j.at("sampling_steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.total_steps = j.at("total_steps").get<int64_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.time_sampling = parse_time_sampling(j.at("time_sampling").get<std::string>());
    c.sigma_min = j.at("sigma_min").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.widths = j.at("widths").get<std::vector<int>>();
    c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    c.t_emb_dim = j.at("t_emb_dim").get<int>();
    return c;
}

nlohmann::json to_json(const DataConfig& c) {
    return {{"source", c.source},
            {"num_images", c.num_images},
            {"resolution", c.resolution},
            {"seed", c.seed},
            {"num_classes", c.num_classes}};
}

DataConfig data_config_from_json(const nlohmann::json& j) {
    DataConfig c;
    c.source = j.at("source").get<std::string>();
    c.num_images = j.at("num_images").get<int>();
    c.resolution = j.at("resolution").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.num_classes = j.at("num_classes").get<int>();
    return c;
}

nlohmann::json snapshot(const TokenizerRunConfig& config) {
    return {{"model", to_json(config.model)}, {"train", to_json(config.train)}, {"data", to_json(config.data)}};
}

nlohmann::json snapshot(const LatentRunConfig& config) {
    return {{"generator", to_json(config.gen)},
            {"data", to_json(config.data)},
            {"tokenizer_checkpoint", config.tokenizer_checkpoint.string()}};
}

}  // namespace dito
