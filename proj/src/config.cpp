#include "tta/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tta/error.hpp"

namespace tta {

using ordered_json = nlohmann::ordered_json;

RunConfig default_run_config() {
    RunConfig config;
    config.harness.domains = domain_presets();
    return config;
}

namespace {

[[noreturn]] void bad_key(const std::string& where, const std::string& key) {
    fail(ErrorCode::config, "unknown config key: " + where + "." + key);
}

double get_number(const ordered_json& v, const std::string& where) {
    if (!v.is_number()) fail(ErrorCode::config, "config: " + where + " must be a number");
    return v.get<double>();
}

int get_int(const ordered_json& v, const std::string& where) {
    if (!v.is_number_integer())
        fail(ErrorCode::config, "config: " + where + " must be an integer");
    return v.get<int>();
}

uint64_t get_u64(const ordered_json& v, const std::string& where) {
    if (!v.is_number_unsigned() && !v.is_number_integer())
        fail(ErrorCode::config, "config: " + where + " must be a non-negative integer");
    const int64_t raw = v.get<int64_t>();
    if (raw < 0) fail(ErrorCode::config, "config: " + where + " must be non-negative");
    return static_cast<uint64_t>(raw);
}

bool get_bool(const ordered_json& v, const std::string& where) {
    if (!v.is_boolean()) fail(ErrorCode::config, "config: " + where + " must be a boolean");
    return v.get<bool>();
}

std::string get_string(const ordered_json& v, const std::string& where) {
    if (!v.is_string()) fail(ErrorCode::config, "config: " + where + " must be a string");
    return v.get<std::string>();
}

void get_range(const ordered_json& v, const std::string& where, double& lo, double& hi) {
    if (!v.is_array() || v.size() != 2)
        fail(ErrorCode::config, "config: " + where + " must be a [lo, hi] pair");
    lo = get_number(v[0], where);
    hi = get_number(v[1], where);
    if (lo > hi) fail(ErrorCode::config, "config: " + where + " has lo > hi");
}

void parse_model(const ordered_json& j, SegNetConfig& cfg) {
    for (const auto& [key, value] : j.items()) {
        if (key == "in_channels") cfg.in_channels = get_int(value, "model.in_channels");
        else if (key == "base_width") cfg.base_width = get_int(value, "model.base_width");
        else if (key == "depth") cfg.depth = get_int(value, "model.depth");
        else if (key == "out_channels") cfg.out_channels = get_int(value, "model.out_channels");
        else if (key == "seed") cfg.seed = get_u64(value, "model.seed");
        else if (key == "aux_heads") {
            if (!value.is_array()) fail(ErrorCode::config, "config: model.aux_heads must be a list");
            cfg.aux_heads.clear();
            for (const auto& h : value) {
                const std::string name = get_string(h, "model.aux_heads[]");
                if (name == "reconstruction") cfg.aux_heads.insert(AuxHead::reconstruction);
                else if (name == "rotation4") cfg.aux_heads.insert(AuxHead::rotation4);
                else if (name == "superres") cfg.aux_heads.insert(AuxHead::superres);
                else fail(ErrorCode::config, "config: unknown aux head: " + name);
            }
        } else bad_key("model", key);
    }
    cfg.validate();
}

void parse_augmentation(const ordered_json& j, AugmentationSpec& aug) {
    for (const auto& [key, value] : j.items()) {
        if (key == "brightness_shift_range")
            get_range(value, "augmentation.brightness_shift_range", aug.brightness_shift_min,
                      aug.brightness_shift_max);
        else if (key == "contrast_scale_range")
            get_range(value, "augmentation.contrast_scale_range", aug.contrast_scale_min,
                      aug.contrast_scale_max);
        else if (key == "gamma_range")
            get_range(value, "augmentation.gamma_range", aug.gamma_min, aug.gamma_max);
        else if (key == "noise_sigma") {
            aug.noise_sigma = get_number(value, "augmentation.noise_sigma");
            if (aug.noise_sigma < 0)
                fail(ErrorCode::config, "config: augmentation.noise_sigma must be >= 0");
        } else if (key == "blur_kernel") {
            aug.blur_kernel = get_int(value, "augmentation.blur_kernel");
            if (aug.blur_kernel >= 3 && aug.blur_kernel % 2 == 0)
                fail(ErrorCode::config, "config: augmentation.blur_kernel must be odd");
        } else if (key == "blur_sigma_range")
            get_range(value, "augmentation.blur_sigma_range", aug.blur_sigma_min,
                      aug.blur_sigma_max);
        else bad_key("augmentation", key);
    }
}

void parse_adaptation(const ordered_json& j, AdaptConfig& adapt, double& denoise_sigma) {
    for (const auto& [key, value] : j.items()) {
        if (key == "beta") {
            adapt.beta = get_number(value, "adaptation.beta");
            if (adapt.beta < 0) fail(ErrorCode::config, "config: adaptation.beta must be >= 0");
        } else if (key == "activation")
            adapt.activation = parse_lr_activation(get_string(value, "adaptation.activation"));
        else if (key == "alpha_inner") {
            adapt.alpha_inner = get_number(value, "adaptation.alpha_inner");
            if (adapt.alpha_inner < 0)
                fail(ErrorCode::config, "config: adaptation.alpha_inner must be >= 0");
        } else if (key == "pseudo")
            adapt.pseudo = parse_objective(get_string(value, "adaptation.pseudo"));
        else if (key == "aux")
            adapt.aux = parse_objective(get_string(value, "adaptation.aux"));
        else if (key == "subset") {
            const std::string s = get_string(value, "adaptation.subset");
            if (s == "affine") adapt.subset = ParamSubset::affine;
            else if (s == "all") adapt.subset = ParamSubset::all;
            else fail(ErrorCode::config, "config: adaptation.subset must be affine or all");
        } else if (key == "optimizer") {
            const std::string s = get_string(value, "adaptation.optimizer");
            if (s == "adam") adapt.optimizer = OptimizerKind::adam;
            else if (s == "sgd") adapt.optimizer = OptimizerKind::sgd;
            else fail(ErrorCode::config, "config: adaptation.optimizer must be adam or sgd");
        } else if (key == "continual")
            adapt.continual = get_bool(value, "adaptation.continual");
        else if (key == "dynamic_lr")
            adapt.dynamic_lr_enabled = get_bool(value, "adaptation.dynamic_lr");
        else if (key == "denoise_sigma") {
            denoise_sigma = get_number(value, "adaptation.denoise_sigma");
            if (denoise_sigma < 0)
                fail(ErrorCode::config, "config: adaptation.denoise_sigma must be >= 0");
        } else if (key == "seed")
            adapt.seed = get_u64(value, "adaptation.seed");
        else bad_key("adaptation", key);
    }
    adapt.validate();
}

void parse_domain_fields(const ordered_json& j, const std::string& where, DomainSpec& spec) {
    for (const auto& [key, value] : j.items()) {
        if (key == "name") spec.name = get_string(value, where + ".name");
        else if (key == "intensity_shift")
            spec.intensity_shift = get_number(value, where + ".intensity_shift");
        else if (key == "contrast_scale")
            spec.contrast_scale = get_number(value, where + ".contrast_scale");
        else if (key == "noise_sigma") spec.noise_sigma = get_number(value, where + ".noise_sigma");
        else if (key == "blur_sigma") spec.blur_sigma = get_number(value, where + ".blur_sigma");
        else if (key == "disc_r_min") spec.disc_r_min = get_number(value, where + ".disc_r_min");
        else if (key == "disc_r_max") spec.disc_r_max = get_number(value, where + ".disc_r_max");
        else if (key == "cup_ratio_min")
            spec.cup_ratio_min = get_number(value, where + ".cup_ratio_min");
        else if (key == "cup_ratio_max")
            spec.cup_ratio_max = get_number(value, where + ".cup_ratio_max");
        else if (key == "center_jitter")
            spec.center_jitter = get_number(value, where + ".center_jitter");
        else if (key == "bg_smoothness")
            spec.bg_smoothness = get_number(value, where + ".bg_smoothness");
        else bad_key(where, key);
    }
    if (spec.disc_r_min > spec.disc_r_max || spec.cup_ratio_min > spec.cup_ratio_max)
        fail(ErrorCode::config, "config: " + where + " has an inverted range");
    if (spec.cup_ratio_max >= 1.0)
        fail(ErrorCode::config, "config: " + where + ".cup_ratio_max must be < 1");
}

void parse_domains(const ordered_json& j, HarnessConfig& cfg) {
    for (const auto& [key, value] : j.items()) {
        if (key == "n_train") {
            cfg.n_train = get_int(value, "domains.n_train");
            if (cfg.n_train < 1) fail(ErrorCode::config, "config: domains.n_train must be >= 1");
        } else if (key == "n_test") {
            cfg.n_test = get_int(value, "domains.n_test");
            if (cfg.n_test < 1) fail(ErrorCode::config, "config: domains.n_test must be >= 1");
        } else if (key == "image_size") {
            cfg.image_size = get_int(value, "domains.image_size");
            if (cfg.image_size < 16)
                fail(ErrorCode::config, "config: domains.image_size must be >= 16");
        } else if (key == "data_seed")
            cfg.data_seed = get_u64(value, "domains.data_seed");
        else if (key == "presets") {
            if (!value.is_object())
                fail(ErrorCode::config, "config: domains.presets must be an object");
            for (const auto& [name, fields] : value.items()) {
                bool known = false;
                for (auto& d : cfg.domains)
                    if (d.name == name) {
                        parse_domain_fields(fields, "domains.presets." + name, d);
                        d.name = name;
                        known = true;
                        break;
                    }
                if (!known)
                    fail(ErrorCode::config, "config: unknown domain preset: " + name);
            }
        } else bad_key("domains", key);
    }
}

void parse_suite(const ordered_json& j, RunConfig& config) {
    for (const auto& [key, value] : j.items()) {
        if (key == "seeds") {
            if (!value.is_array() || value.empty())
                fail(ErrorCode::config, "config: suite.seeds must be a non-empty list");
            config.suite_seeds.clear();
            for (const auto& s : value) config.suite_seeds.push_back(get_u64(s, "suite.seeds[]"));
        } else if (key == "jobs")
            config.harness.jobs = get_int(value, "suite.jobs");
        else if (key == "pretrain_epochs") {
            config.harness.pretrain_epochs = get_int(value, "suite.pretrain_epochs");
            if (config.harness.pretrain_epochs < 1)
                fail(ErrorCode::config, "config: suite.pretrain_epochs must be >= 1");
        } else if (key == "pretrain_lr") {
            config.harness.pretrain_lr = get_number(value, "suite.pretrain_lr");
            if (config.harness.pretrain_lr <= 0)
                fail(ErrorCode::config, "config: suite.pretrain_lr must be > 0");
        } else if (key == "pretrain_batch") {
            config.harness.pretrain_batch = get_int(value, "suite.pretrain_batch");
            if (config.harness.pretrain_batch < 1)
                fail(ErrorCode::config, "config: suite.pretrain_batch must be >= 1");
        } else bad_key("suite", key);
    }
}

RunConfig parse_json(const ordered_json& j) {
    RunConfig config = default_run_config();
    if (!j.is_object()) fail(ErrorCode::config, "config: top level must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "model") parse_model(value, config.harness.model);
        else if (key == "augmentation") parse_augmentation(value, config.harness.aug);
        else if (key == "adaptation")
            parse_adaptation(value, config.harness.adapt, config.harness.denoise_sigma);
        else if (key == "domains") parse_domains(value, config.harness);
        else if (key == "suite") parse_suite(value, config);
        else bad_key("(top)", key);
    }
    return config;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    std::string trimmed;
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) trimmed.push_back(c);
    if (trimmed.empty()) return default_run_config();
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        fail(ErrorCode::config, std::string("config: JSON parse error: ") + e.what());
    }
    return parse_json(j);
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::config, "config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string print_config(const RunConfig& config) {
    const HarnessConfig& h = config.harness;
    ordered_json j;

    ordered_json model;
    model["in_channels"] = h.model.in_channels;
    model["base_width"] = h.model.base_width;
    model["depth"] = h.model.depth;
    model["out_channels"] = h.model.out_channels;
    ordered_json heads = ordered_json::array();
    for (auto head : {AuxHead::reconstruction, AuxHead::rotation4, AuxHead::superres})
        if (h.model.aux_heads.count(head)) heads.push_back(aux_head_name(head));
    model["aux_heads"] = heads;
    model["seed"] = h.model.seed;
    j["model"] = model;

    ordered_json aug;
    aug["brightness_shift_range"] = {h.aug.brightness_shift_min, h.aug.brightness_shift_max};
    aug["contrast_scale_range"] = {h.aug.contrast_scale_min, h.aug.contrast_scale_max};
    aug["gamma_range"] = {h.aug.gamma_min, h.aug.gamma_max};
    aug["noise_sigma"] = h.aug.noise_sigma;
    aug["blur_kernel"] = h.aug.blur_kernel;
    aug["blur_sigma_range"] = {h.aug.blur_sigma_min, h.aug.blur_sigma_max};
    j["augmentation"] = aug;

    ordered_json adapt;
    adapt["beta"] = h.adapt.beta;
    adapt["activation"] = lr_activation_name(h.adapt.activation);
    adapt["alpha_inner"] = h.adapt.alpha_inner;
    adapt["pseudo"] = objective_name(h.adapt.pseudo);
    adapt["aux"] = objective_name(h.adapt.aux);
    adapt["subset"] = param_subset_name(h.adapt.subset);
    adapt["optimizer"] = h.adapt.optimizer == OptimizerKind::adam ? "adam" : "sgd";
    adapt["continual"] = h.adapt.continual;
    adapt["dynamic_lr"] = h.adapt.dynamic_lr_enabled;
    adapt["denoise_sigma"] = h.denoise_sigma;
    adapt["seed"] = h.adapt.seed;
    j["adaptation"] = adapt;

    ordered_json domains;
    domains["n_train"] = h.n_train;
    domains["n_test"] = h.n_test;
    domains["image_size"] = h.image_size;
    domains["data_seed"] = h.data_seed;
    ordered_json presets;
    for (const auto& d : h.domains) {
        ordered_json p;
        p["intensity_shift"] = d.intensity_shift;
        p["contrast_scale"] = d.contrast_scale;
        p["noise_sigma"] = d.noise_sigma;
        p["blur_sigma"] = d.blur_sigma;
        p["disc_r_min"] = d.disc_r_min;
        p["disc_r_max"] = d.disc_r_max;
        p["cup_ratio_min"] = d.cup_ratio_min;
        p["cup_ratio_max"] = d.cup_ratio_max;
        p["center_jitter"] = d.center_jitter;
        p["bg_smoothness"] = d.bg_smoothness;
        presets[d.name] = p;
    }
    domains["presets"] = presets;
    j["domains"] = domains;

    ordered_json suite;
    ordered_json seeds = ordered_json::array();
    for (uint64_t s : config.suite_seeds) seeds.push_back(s);
    suite["seeds"] = seeds;
    suite["jobs"] = h.jobs;
    suite["pretrain_epochs"] = h.pretrain_epochs;
    suite["pretrain_lr"] = h.pretrain_lr;
    suite["pretrain_batch"] = h.pretrain_batch;
    j["suite"] = suite;

    return j.dump(2) + "\n";
}

DomainSpec parse_domain_spec_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::config, "domain spec: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    ordered_json j;
    try {
        j = ordered_json::parse(buf.str());
    } catch (const std::exception& e) {
        fail(ErrorCode::config, std::string("domain spec: JSON parse error: ") + e.what());
    }
    DomainSpec spec;
    spec.name = "custom";
    parse_domain_fields(j, "domain_spec", spec);
    return spec;
}

}  // namespace tta
