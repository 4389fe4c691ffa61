#include "tta/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tta/bench.hpp"
#include "tta/config.hpp"
#include "tta/error.hpp"
#include "tta/synth.hpp"

namespace tta::cli {

namespace fs = std::filesystem;

namespace {

std::string default_out_dir() {
    if (const char* env = std::getenv("TTA_OUT_DIR")) return env;
    return "out";
}

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return default_run_config();
    return parse_config(path);
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
    std::vector<uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            seeds.push_back(std::stoull(item));
        } catch (...) {
            fail(ErrorCode::config, "bad seed list entry: " + item);
        }
    }
    if (seeds.empty()) fail(ErrorCode::config, "empty seed list");
    return seeds;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + path);
    out << text;
}

int run_gen_data(const std::string& spec_arg, int n, uint64_t seed, const std::string& out) {
    DomainSpec spec;
    if (fs::exists(spec_arg) && fs::is_regular_file(spec_arg))
        spec = parse_domain_spec_file(spec_arg);
    else
        spec = domain_preset(spec_arg);
    Dataset dataset = generate_domain(spec, n, seed);
    save_dataset(dataset, out);
    std::fprintf(stderr, "wrote %d samples for domain %s to %s\n", n, spec.name.c_str(),
                 out.c_str());
    return 0;
}

int run_pretrain(const std::string& data_dir, const std::string& config_path,
                 const std::string& out_path) {
    RunConfig config = load_config_or_default(config_path);
    Dataset source = load_dataset(data_dir);
    auto result = pretrain(config.harness.model, source, config.harness.pretrain_epochs,
                           config.harness.pretrain_lr, config.harness.pretrain_batch,
                           derive_seed(config.harness.data_seed, 0x707265ULL));
    result.model->save_weights(out_path);

    nlohmann::ordered_json meta;
    meta["domain"] = source.spec.name;
    meta["train_dice"] = result.train_dice;
    meta["epochs"] = config.harness.pretrain_epochs;
    meta["first_epoch_loss"] = result.epoch_losses.front();
    meta["last_epoch_loss"] = result.epoch_losses.back();
    write_text(out_path + ".meta.json", meta.dump(2) + "\n");
    std::fprintf(stderr, "pretrained on %s: source dice %.4f -> %s\n", source.spec.name.c_str(),
                 result.train_dice, out_path.c_str());
    return 0;
}

int run_adapt(const std::string& weights, const std::string& target_dir,
              const std::string& config_path, const std::string& out_dir,
              const std::string& variant, uint64_t seed, bool seed_given) {
    RunConfig config = load_config_or_default(config_path);
    HarnessConfig& h = config.harness;

    SegNet<float> model(h.model);
    model.load_weights(weights);
    Dataset target = load_dataset(target_dir);

    std::string source_label = "src";
    {
        std::ifstream meta(weights + ".meta.json");
        if (meta) {
            try {
                auto j = nlohmann::json::parse(meta);
                if (j.contains("domain")) source_label = j["domain"].get<std::string>();
            } catch (...) {
            }
        }
    }

    StreamSpec spec;
    if (variant == "no_adapt") {
        spec.kind = StreamKind::no_adapt;
        spec.adapt = h.adapt;
        spec.inference_bn = BnMode::eval;
    } else if (variant == "tent") {
        spec.kind = StreamKind::plain;
        spec.plain_objective = ObjectiveKind::ent;
        spec.plain_lr = h.adapt.beta;
        spec.plain_optimizer = h.adapt.optimizer;
        spec.adapt = h.adapt;
    } else if (variant == "grata") {
        spec.kind = StreamKind::grata;
        spec.adapt = h.adapt;
    } else {
        fail(ErrorCode::config, "unknown variant: " + variant);
    }

    const uint64_t run_seed = seed_given ? seed : h.adapt.seed;
    const std::string scenario = source_label + "->" + target.spec.name;
    RunReport report = run_stream(model, target, spec, h, run_seed, scenario);
    write_stream_report(report, variant, run_seed, source_label, out_dir);
    write_text((fs::path(out_dir) / "config_snapshot.json").string(), print_config(config));
    std::fprintf(stderr, "%s %s: dice %.4f (disc %.4f cup %.4f), skipped %d -> %s\n",
                 scenario.c_str(), variant.c_str(), report.dice_mean, report.dice_disc,
                 report.dice_cup, report.skipped, out_dir.c_str());
    return 0;
}

int run_ablate(const std::string& suite, const std::string& seeds_text,
               const std::string& config_path, const std::string& out_dir,
               const std::string& weights_dir_arg, bool prepare, int jobs) {
    RunConfig config = load_config_or_default(config_path);
    if (jobs > 0) config.harness.jobs = jobs;
    const SuiteKind kind = parse_suite(suite);
    const std::vector<uint64_t> seeds =
        seeds_text.empty() ? config.suite_seeds : parse_seed_list(seeds_text);

    const std::string weights_dir =
        weights_dir_arg.empty() ? (fs::path(out_dir) / "weights").string() : weights_dir_arg;
    SuiteEnv env = prepare_suite_env(config.harness, weights_dir, !prepare, true);
    SuiteResult result = run_suite(kind, seeds, env, true);
    emit_report(result, out_dir);
    write_text((fs::path(out_dir) / "config_snapshot.json").string(), print_config(config));
    std::fprintf(stderr, "suite %s written to %s\n", suite_name(kind), out_dir.c_str());
    return 0;
}

int run_report(const std::string& in_dir) {
    // aggregate per-variant means across every fixed-schema CSV in the directory
    struct Acc {
        double dice = 0, disc = 0, cup = 0;
        int n = 0;
    };
    std::map<std::string, Acc> by_variant;
    bool any = false;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(in_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".csv")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        std::ifstream in(path);
        std::string header;
        if (!std::getline(in, header)) continue;
        if (header.rfind("scenario,variant,seed,dice_disc", 0) != 0) continue;
        std::string line;
        while (std::getline(in, line)) {
            std::stringstream ss(line);
            std::string scenario, variant, seed, disc, cup, mean;
            std::getline(ss, scenario, ',');
            std::getline(ss, variant, ',');
            std::getline(ss, seed, ',');
            std::getline(ss, disc, ',');
            std::getline(ss, cup, ',');
            std::getline(ss, mean, ',');
            if (scenario == "mean") continue;  // skip pre-aggregated rows
            auto& acc = by_variant[variant];
            acc.dice += std::stod(mean);
            acc.disc += std::stod(disc);
            acc.cup += std::stod(cup);
            acc.n += 1;
            any = true;
        }
    }
    if (!any) fail(ErrorCode::io, "no fixed-schema CSV rows found in " + in_dir);
    std::printf("%-24s %10s %10s %10s %6s\n", "variant", "dice_mean", "dice_disc", "dice_cup",
                "rows");
    for (const auto& [variant, acc] : by_variant)
        std::printf("%-24s %10.4f %10.4f %10.4f %6d\n", variant.c_str(), acc.dice / acc.n,
                    acc.disc / acc.n, acc.cup / acc.n, acc.n);
    return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
    CLI::App app{"Gradient-aligned test-time adaptation benchmark"};
    app.require_subcommand(0, 1);

    std::string app_config;
    bool print_config_flag = false;
    app.add_option("--config", app_config, "configuration file (JSON)");
    app.add_flag("--print-config", print_config_flag,
                 "print the canonical configuration and exit");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic domain dataset");
    std::string gen_spec = "A", gen_out = default_out_dir() + "/data";
    int gen_n = 50;
    uint64_t gen_seed = 0;
    gen->add_option("--spec", gen_spec, "domain preset (A-E) or JSON spec file");
    gen->add_option("--n", gen_n, "number of samples")->required();
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output dataset directory");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train a source model on a dataset");
    std::string pre_data, pre_config, pre_out = default_out_dir() + "/model.gtwt";
    pre->add_option("--data", pre_data, "source dataset directory")->required();
    pre->add_option("--config", pre_config, "configuration file");
    pre->add_option("--out", pre_out, "output weights file");

    // adapt
    auto* adapt = app.add_subcommand("adapt", "run one online adaptation stream");
    std::string adapt_weights, adapt_target, adapt_config, adapt_variant = "grata";
    std::string adapt_out = default_out_dir() + "/adapt";
    uint64_t adapt_seed = 0;
    adapt->add_option("--weights", adapt_weights, "source weights file")->required();
    adapt->add_option("--target", adapt_target, "target dataset directory")->required();
    adapt->add_option("--config", adapt_config, "configuration file");
    adapt->add_option("--out", adapt_out, "output directory");
    adapt->add_option("--variant", adapt_variant, "no_adapt | tent | grata")
        ->check(CLI::IsMember({"no_adapt", "tent", "grata"}));
    auto* adapt_seed_opt = adapt->add_option("--seed", adapt_seed, "stream seed");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run an experiment suite");
    std::string ab_suite, ab_seeds, ab_config, ab_weights_dir;
    std::string ab_out = default_out_dir() + "/suite";
    bool ab_prepare = false;
    int ab_jobs = 0;
    ablate->add_option("--suite", ab_suite,
                       "main | ablation | exchange | activation | combination | cosine-diag")
        ->required();
    ablate->add_option("--seeds", ab_seeds, "comma-separated seed list");
    ablate->add_option("--config", ab_config, "configuration file");
    ablate->add_option("--out", ab_out, "output directory");
    ablate->add_option("--weights-dir", ab_weights_dir,
                       "pretrained weights directory (default <out>/weights)");
    ablate->add_flag("--prepare", ab_prepare,
                     "generate data and pretrain missing source models");
    ablate->add_option("--jobs", ab_jobs, "worker thread cap");

    // report
    auto* report = app.add_subcommand("report", "summarize report CSVs in a directory");
    std::string report_in;
    report->add_option("--in", report_in, "directory of CSV reports")->required();

    try {
        app.parse(argc, const_cast<char**>(argv));
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: usage: %s\n", e.what());
        std::fprintf(stderr, "%s\n", app.help().c_str());
        return 2;
    }

    try {
        if (print_config_flag) {
            RunConfig config = load_config_or_default(app_config);
            std::fputs(print_config(config).c_str(), stdout);
            return 0;
        }
        if (gen->parsed()) return run_gen_data(gen_spec, gen_n, gen_seed, gen_out);
        if (pre->parsed()) return run_pretrain(pre_data, pre_config, pre_out);
        if (adapt->parsed())
            return run_adapt(adapt_weights, adapt_target, adapt_config, adapt_out, adapt_variant,
                             adapt_seed, adapt_seed_opt->count() > 0);
        if (ablate->parsed())
            return run_ablate(ab_suite, ab_seeds, ab_config, ab_out, ab_weights_dir, ab_prepare,
                              ab_jobs);
        if (report->parsed()) return run_report(report_in);
        std::fprintf(stderr, "error: usage: a subcommand is required\n");
        std::fprintf(stderr, "%s\n", app.help().c_str());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", error_code_name(e.code()), e.what());
        return e.code() == ErrorCode::config ? 2 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", e.what());
        return 1;
    }
}

}  // namespace tta::cli
