#include "tta/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "tta/error.hpp"
#include "tta/rng.hpp"

namespace tta {

namespace fs = std::filesystem;

double dice(const std::vector<float>& pred, const std::vector<float>& gt, double threshold) {
    if (pred.size() != gt.size()) fail(ErrorCode::shape_mismatch, "dice: size mismatch");
    int64_t a = 0, b = 0, inter = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool pa = pred[i] >= static_cast<float>(threshold);
        const bool pb = gt[i] > 0.5f;
        a += pa;
        b += pb;
        inter += (pa && pb);
    }
    if (a + b == 0) return 1.0;  // both empty
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

DiceScores dice_scores(const Tensor<float>& probs, const Tensor<float>& mask, double threshold) {
    if (probs.shape() != mask.shape() || probs.shape().size() != 4 || probs.dim(1) != 2)
        fail(ErrorCode::shape_mismatch, "dice_scores: expected matching 1x2xHxW tensors");
    const int64_t hw = static_cast<int64_t>(probs.dim(2)) * probs.dim(3);
    std::vector<float> p0(probs.values().begin(), probs.values().begin() + hw);
    std::vector<float> p1(probs.values().begin() + hw, probs.values().begin() + 2 * hw);
    std::vector<float> m0(mask.values().begin(), mask.values().begin() + hw);
    std::vector<float> m1(mask.values().begin() + hw, mask.values().begin() + 2 * hw);
    DiceScores s;
    s.disc = dice(p0, m0, threshold);
    s.cup = dice(p1, m1, threshold);
    s.mean = 0.5 * (s.disc + s.cup);
    return s;
}

// ---------------------------------------------------------------------------
// Pretraining

PretrainResult pretrain(const SegNetConfig& cfg, const Dataset& source, int epochs, double lr,
                        int batch, uint64_t seed) {
    if (source.samples.empty()) fail(ErrorCode::invalid_argument, "pretrain: empty dataset");
    PretrainResult result;
    result.model = std::make_shared<SegNet<float>>(cfg);
    SegNet<float>& model = *result.model;
    model.update_running = true;
    model.set_trainable(ParamSubset::all);

    const int size = source.image_size;
    const int n = static_cast<int>(source.samples.size());
    OptState<float> opt;
    AdaptConfig adam_hp;  // adam beta/eps defaults
    FiniteCheckGuard fast(false);

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, static_cast<uint64_t>(epoch)));
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.uniform_int(static_cast<uint64_t>(i + 1)));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }

        double epoch_loss = 0.0;
        int batches = 0;
        for (int at = 0; at < n; at += batch) {
            const int bsz = std::min(batch, n - at);
            Tensor<float> images = Tensor<float>::zeros({bsz, 1, size, size});
            Tensor<float> masks = Tensor<float>::zeros({bsz, 2, size, size});
            for (int k = 0; k < bsz; ++k) {
                const auto& s = source.samples[static_cast<size_t>(order[static_cast<size_t>(at + k)])];
                std::copy(s.image.values().begin(), s.image.values().end(),
                          images.values().begin() + static_cast<int64_t>(k) * size * size);
                std::copy(s.mask.values().begin(), s.mask.values().end(),
                          masks.values().begin() + static_cast<int64_t>(k) * 2 * size * size);
            }

            model.zero_grads();
            Tape<float> tape;
            double loss_value;
            {
                TapeScope<float> scope(&tape);
                auto probs = model.forward_seg(images, BnMode::train);
                auto loss = detail::bce_mean(probs, masks, 1e-6f);
                tape.backward(loss);
                loss_value = static_cast<double>(loss.item());
            }
            if (!std::isfinite(loss_value))
                fail(ErrorCode::non_finite, "pretrain: loss diverged");
            auto theta = model.collect_params(ParamSubset::all);
            auto grads = model.collect_grads(ParamSubset::all);
            detail::adam_update(theta.values, grads.values, lr, opt, adam_hp);
            if (!detail::vec_finite(theta.values))
                fail(ErrorCode::non_finite, "pretrain: parameters diverged");
            model.apply_params(theta);
            epoch_loss += loss_value;
            ++batches;
        }
        result.epoch_losses.push_back(epoch_loss / std::max(1, batches));
    }

    // source-set Dice in eval mode with the collected running statistics
    model.update_running = false;
    double acc = 0.0;
    {
        TapeScope<float> no_grad(nullptr);
        for (const auto& s : source.samples)
            acc += dice_scores(model.forward_seg(s.image, BnMode::eval), s.mask).mean;
    }
    result.train_dice = acc / static_cast<double>(n);
    return result;
}

// ---------------------------------------------------------------------------
// Streams

RunReport run_stream(const SegNet<float>& source, const Dataset& target,
                     const StreamSpec& spec, const HarnessConfig& cfg, uint64_t run_seed,
                     const std::string& scenario) {
    RunReport report;
    report.scenario = scenario;

    SegNet<float> model = source.clone();
    model.update_running = false;
    OptState<float> opt;
    ParamVector<float> source_params;
    const bool continual = spec.kind == StreamKind::no_adapt || spec.adapt.continual;
    if (!continual) source_params = model.collect_params(ParamSubset::all);

    FiniteCheckGuard fast(false);
    double sum_disc = 0.0, sum_cup = 0.0, sum_mean = 0.0, sum_cos = 0.0, sum_eta = 0.0;
    double sum_diag_shifted = 0.0, sum_diag_theta = 0.0;
    int adapted = 0;

    for (size_t idx = 0; idx < target.samples.size(); ++idx) {
        const auto& sample = target.samples[idx];
        if (!continual) {
            model.apply_params(source_params);
            opt = OptState<float>{};
        }

        ObjectiveContext<float> ctx;
        ctx.seed = derive_seed(run_seed, static_cast<uint64_t>(idx));
        ctx.aug = cfg.aug;
        ctx.denoise_sigma = cfg.denoise_sigma;

        StepRecord record;
        StepDiag diag;
        switch (spec.kind) {
            case StreamKind::no_adapt:
                break;
            case StreamKind::plain:
                record = plain_step(model, sample.image, spec.plain_objective, spec.plain_lr,
                                    spec.plain_optimizer, opt, ctx, spec.adapt.subset,
                                    spec.adapt);
                break;
            case StreamKind::grata:
                if (spec.diag) ctx.gt_mask = &sample.mask;
                record = grata_step(model, sample.image, spec.adapt, opt, ctx,
                                    spec.diag ? &diag : nullptr);
                ctx.gt_mask = nullptr;
                break;
        }
        record.image_index = static_cast<int>(idx);

        Tensor<float> probs;
        {
            TapeScope<float> no_grad(nullptr);
            probs = model.forward_seg(sample.image, spec.inference_bn);
        }
        const DiceScores scores = dice_scores(probs, sample.mask);
        record.dice_after = scores.mean;

        sum_disc += scores.disc;
        sum_cup += scores.cup;
        sum_mean += scores.mean;
        if (spec.kind != StreamKind::no_adapt && !record.skipped) {
            sum_cos += record.cosine;
            sum_eta += record.eta;
            sum_diag_shifted += diag.cos_pse_shifted_sup;
            sum_diag_theta += diag.cos_pse_theta_sup;
            ++adapted;
        }
        report.skipped += record.skipped ? 1 : 0;
        report.records.push_back(record);
    }

    const double n = static_cast<double>(target.samples.size());
    report.dice_disc = sum_disc / n;
    report.dice_cup = sum_cup / n;
    report.dice_mean = sum_mean / n;
    if (adapted > 0) {
        report.cos_mean = sum_cos / adapted;
        report.eta_mean = sum_eta / adapted;
        report.cos_pse_shifted_sup = sum_diag_shifted / adapted;
        report.cos_pse_theta_sup = sum_diag_theta / adapted;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Suites

const char* suite_name(SuiteKind kind) {
    switch (kind) {
        case SuiteKind::main_suite: return "main";
        case SuiteKind::ablation: return "ablation";
        case SuiteKind::exchange: return "exchange";
        case SuiteKind::activation: return "activation";
        case SuiteKind::combination: return "combination";
        case SuiteKind::cosine_diag: return "cosine_diag";
    }
    return "?";
}

SuiteKind parse_suite(const std::string& name) {
    if (name == "main") return SuiteKind::main_suite;
    if (name == "ablation") return SuiteKind::ablation;
    if (name == "exchange") return SuiteKind::exchange;
    if (name == "activation") return SuiteKind::activation;
    if (name == "combination") return SuiteKind::combination;
    if (name == "cosine-diag" || name == "cosine_diag") return SuiteKind::cosine_diag;
    fail(ErrorCode::config, "unknown suite: " + name);
}

namespace {

StreamSpec no_adapt_spec(const HarnessConfig& cfg) {
    StreamSpec s;
    s.kind = StreamKind::no_adapt;
    s.adapt = cfg.adapt;
    s.inference_bn = BnMode::eval;  // source statistics, no adaptation at all
    return s;
}

StreamSpec plain_spec(const HarnessConfig& cfg, ObjectiveKind objective) {
    StreamSpec s;
    s.kind = StreamKind::plain;
    s.plain_objective = objective;
    s.plain_lr = cfg.adapt.beta;
    s.plain_optimizer = cfg.adapt.optimizer;
    s.adapt = cfg.adapt;
    return s;
}

StreamSpec grata_spec(const HarnessConfig& cfg) {
    StreamSpec s;
    s.kind = StreamKind::grata;
    s.adapt = cfg.adapt;
    return s;
}

}  // namespace

std::vector<VariantDef> suite_variants(SuiteKind kind, const HarnessConfig& cfg) {
    std::vector<VariantDef> defs;
    switch (kind) {
        case SuiteKind::main_suite: {
            defs.push_back({"no_adapt", no_adapt_spec(cfg)});
            defs.push_back({"tent", plain_spec(cfg, ObjectiveKind::ent)});
            defs.push_back({"grata", grata_spec(cfg)});
            break;
        }
        case SuiteKind::ablation: {
            // pseudo objective at theta with fixed lr; aligned objective with
            // fixed lr; full dynamic-lr configuration
            defs.push_back({"pseudo_fixed_lr", plain_spec(cfg, cfg.adapt.pseudo)});
            auto aligned = grata_spec(cfg);
            aligned.adapt.dynamic_lr_enabled = false;
            defs.push_back({"aligned_fixed_lr", aligned});
            defs.push_back({"grata", grata_spec(cfg)});
            break;
        }
        case SuiteKind::exchange: {
            defs.push_back({"tent", plain_spec(cfg, ObjectiveKind::ent)});
            auto swapped = grata_spec(cfg);
            std::swap(swapped.adapt.pseudo, swapped.adapt.aux);
            defs.push_back({"grata_exchanged", swapped});
            defs.push_back({"grata", grata_spec(cfg)});
            break;
        }
        case SuiteKind::activation: {
            for (auto act : {LrActivation::linear, LrActivation::sigmoid, LrActivation::relu,
                             LrActivation::softplus, LrActivation::cus}) {
                auto v = grata_spec(cfg);
                v.adapt.activation = act;
                defs.push_back({std::string("act_") + lr_activation_name(act), v});
            }
            break;
        }
        case SuiteKind::combination: {
            const ObjectiveKind kinds[6] = {ObjectiveKind::con, ObjectiveKind::ent,
                                            ObjectiveKind::rec, ObjectiveKind::rot,
                                            ObjectiveKind::sup_res, ObjectiveKind::den};
            for (ObjectiveKind aux : kinds)
                for (ObjectiveKind pse : kinds) {
                    if (aux == pse) continue;
                    auto v = grata_spec(cfg);
                    v.adapt.aux = aux;
                    v.adapt.pseudo = pse;
                    defs.push_back({std::string("aux_") + objective_name(aux) + "__pse_" +
                                        objective_name(pse),
                                    v});
                }
            break;
        }
        case SuiteKind::cosine_diag: {
            auto v = grata_spec(cfg);
            v.diag = true;
            defs.push_back({"grata_diag", v});
            break;
        }
    }
    return defs;
}

SuiteEnv prepare_suite_env(const HarnessConfig& cfg, const std::string& weights_dir,
                           bool require_weights, bool verbose) {
    SuiteEnv env;
    env.cfg = cfg;
    env.domains = cfg.domains.empty() ? domain_presets() : cfg.domains;

    if (!weights_dir.empty()) {
        std::error_code ec;
        fs::create_directories(weights_dir, ec);
    }

    for (size_t d = 0; d < env.domains.size(); ++d) {
        const auto& spec = env.domains[d];
        const uint64_t test_seed = derive_seed(cfg.data_seed, 2 * d + 1);
        env.test_sets[spec.name] = generate_domain(spec, cfg.n_test, test_seed, cfg.image_size);

        const std::string path =
            weights_dir.empty() ? "" : (fs::path(weights_dir) / (spec.name + ".gtwt")).string();
        bool loaded = false;
        if (!path.empty() && fs::exists(path)) {
            auto model = std::make_shared<SegNet<float>>(cfg.model);
            model->load_weights(path);
            env.source_models[spec.name] = model;
            loaded = true;
        } else {
            if (require_weights)
                fail(ErrorCode::io, "missing pretrained weights for domain " + spec.name +
                                        (path.empty() ? "" : (" at " + path)));
            const uint64_t train_seed = derive_seed(cfg.data_seed, 2 * d);
            Dataset train = generate_domain(spec, cfg.n_train, train_seed, cfg.image_size);
            SegNetConfig model_cfg = cfg.model;
            model_cfg.seed = derive_seed(cfg.data_seed, 1000 + d);
            auto pre = pretrain(model_cfg, train, cfg.pretrain_epochs, cfg.pretrain_lr,
                                cfg.pretrain_batch, derive_seed(cfg.data_seed, 2000 + d));
            env.source_models[spec.name] = pre.model;
            if (!path.empty()) pre.model->save_weights(path);
        }

        // held-out validation: the source's own test split, eval-mode BN
        {
            SegNet<float>& model = *env.source_models[spec.name];
            TapeScope<float> no_grad(nullptr);
            FiniteCheckGuard fast(false);
            double acc = 0.0;
            const auto& val = env.test_sets[spec.name];
            for (const auto& s : val.samples)
                acc += dice_scores(model.forward_seg(s.image, BnMode::eval), s.mask).mean;
            env.source_dice[spec.name] = acc / static_cast<double>(val.samples.size());
        }
        if (verbose)
            std::fprintf(stderr, "[prep] %s: %s, source val dice %.4f\n", spec.name.c_str(),
                         loaded ? "loaded cached weights" : "pretrained",
                         env.source_dice[spec.name]);
    }
    return env;
}

namespace {

uint64_t hash_label(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

uint64_t stream_seed(uint64_t suite_seed, const std::string& source, const std::string& target,
                     const std::string& variant) {
    return derive_seed(suite_seed, hash_label(source + "->" + target + "#" + variant));
}

namespace {

struct SuiteJob {
    std::string source;
    std::string variant;
    StreamSpec spec;
    uint64_t seed = 0;
};

}  // namespace

SuiteResult run_suite(SuiteKind kind, const std::vector<uint64_t>& seeds, const SuiteEnv& env,
                      bool verbose) {
    SuiteResult result;
    result.kind = kind;
    const auto variants = suite_variants(kind, env.cfg);

    std::vector<SuiteJob> jobs;
    for (const auto& domain : env.domains)
        for (const auto& variant : variants)
            for (uint64_t seed : seeds)
                jobs.push_back({domain.name, variant.label, variant.spec, seed});

    std::vector<SuiteRow> rows(jobs.size());
    std::atomic<size_t> next{0};
    std::atomic<size_t> done{0};

    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const SuiteJob& job = jobs[i];
            const SegNet<float>& source = *env.source_models.at(job.source);

            SuiteRow row;
            row.scenario = job.source;
            row.variant = job.variant;
            row.seed = static_cast<int64_t>(job.seed);
            int streams = 0;
            for (const auto& domain : env.domains) {
                if (domain.name == job.source) continue;
                const std::string label = job.source + "->" + domain.name;
                const uint64_t run_seed = stream_seed(job.seed, job.source, domain.name,
                                                      job.variant);
                RunReport report = run_stream(source, env.test_sets.at(domain.name), job.spec,
                                              env.cfg, run_seed, label);
                row.dice_disc += report.dice_disc;
                row.dice_cup += report.dice_cup;
                row.dice_mean += report.dice_mean;
                row.cos_mean += report.cos_mean;
                row.eta_mean += report.eta_mean;
                row.cos_pse_shifted_sup += report.cos_pse_shifted_sup;
                row.cos_pse_theta_sup += report.cos_pse_theta_sup;
                row.skipped += report.skipped;
                ++streams;
            }
            row.dice_disc /= streams;
            row.dice_cup /= streams;
            row.dice_mean /= streams;
            row.cos_mean /= streams;
            row.eta_mean /= streams;
            row.cos_pse_shifted_sup /= streams;
            row.cos_pse_theta_sup /= streams;
            rows[i] = row;
            const size_t d = done.fetch_add(1) + 1;
            if (verbose)
                std::fprintf(stderr, "[%s] %zu/%zu done (%s %s seed %" PRIu64 ")\n",
                             suite_name(kind), d, jobs.size(), job.source.c_str(),
                             job.variant.c_str(), job.seed);
        }
    };

    int workers = env.cfg.jobs > 0 ? env.cfg.jobs
                                   : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    result.rows = std::move(rows);

    for (const auto& variant : variants) {
        SuiteRow agg;
        agg.scenario = "mean";
        agg.variant = variant.label;
        agg.seed = -1;
        int count = 0;
        for (const auto& row : result.rows) {
            if (row.variant != variant.label) continue;
            agg.dice_disc += row.dice_disc;
            agg.dice_cup += row.dice_cup;
            agg.dice_mean += row.dice_mean;
            agg.cos_mean += row.cos_mean;
            agg.eta_mean += row.eta_mean;
            agg.cos_pse_shifted_sup += row.cos_pse_shifted_sup;
            agg.cos_pse_theta_sup += row.cos_pse_theta_sup;
            agg.skipped += row.skipped;
            ++count;
        }
        agg.dice_disc /= count;
        agg.dice_cup /= count;
        agg.dice_mean /= count;
        agg.cos_mean /= count;
        agg.eta_mean /= count;
        agg.cos_pse_shifted_sup /= count;
        agg.cos_pse_theta_sup /= count;
        result.aggregates.push_back(agg);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string fmt6(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void write_dice_csv(std::ofstream& out, const std::vector<SuiteRow>& rows,
                    const std::vector<SuiteRow>& aggregates) {
    out << "scenario,variant,seed,dice_disc,dice_cup,dice_mean,cos_mean,eta_mean\n";
    auto emit = [&](const SuiteRow& r) {
        out << r.scenario << ',' << r.variant << ',' << r.seed << ',' << fmt6(r.dice_disc)
            << ',' << fmt6(r.dice_cup) << ',' << fmt6(r.dice_mean) << ',' << fmt6(r.cos_mean)
            << ',' << fmt6(r.eta_mean) << '\n';
    };
    for (const auto& r : rows) emit(r);
    for (const auto& r : aggregates) emit(r);
}

void write_diag_csv(std::ofstream& out, const std::vector<SuiteRow>& rows,
                    const std::vector<SuiteRow>& aggregates) {
    out << "scenario,variant,seed,cos_pse_shifted_sup,cos_pse_theta_sup,dice_mean\n";
    auto emit = [&](const SuiteRow& r) {
        out << r.scenario << ',' << r.variant << ',' << r.seed << ','
            << fmt6(r.cos_pse_shifted_sup) << ',' << fmt6(r.cos_pse_theta_sup) << ','
            << fmt6(r.dice_mean) << '\n';
    };
    for (const auto& r : rows) emit(r);
    for (const auto& r : aggregates) emit(r);
}

}  // namespace

void emit_report(const SuiteResult& result, const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) fail(ErrorCode::io, "emit_report: cannot create " + out_dir);

    const std::string base = suite_name(result.kind);
    {
        std::ofstream csv(fs::path(out_dir) / (base + ".csv"), std::ios::trunc);
        if (!csv) fail(ErrorCode::io, "emit_report: cannot write csv");
        if (result.kind == SuiteKind::cosine_diag)
            write_diag_csv(csv, result.rows, result.aggregates);
        else
            write_dice_csv(csv, result.rows, result.aggregates);
    }
    {
        std::ofstream summary(fs::path(out_dir) / (base + "_summary.txt"), std::ios::trunc);
        if (!summary) fail(ErrorCode::io, "emit_report: cannot write summary");
        summary << "suite: " << base << "\n";
        summary << "rows: " << result.rows.size() << "\n";
        for (const auto& agg : result.aggregates) {
            summary << agg.variant << ": dice_mean=" << fmt6(agg.dice_mean)
                    << " dice_disc=" << fmt6(agg.dice_disc) << " dice_cup=" << fmt6(agg.dice_cup);
            if (result.kind == SuiteKind::cosine_diag)
                summary << " cos_pse_shifted_sup=" << fmt6(agg.cos_pse_shifted_sup)
                        << " cos_pse_theta_sup=" << fmt6(agg.cos_pse_theta_sup);
            else
                summary << " cos_mean=" << fmt6(agg.cos_mean)
                        << " eta_mean=" << fmt6(agg.eta_mean);
            summary << " skipped=" << agg.skipped << "\n";
        }
    }
}

void write_stream_report(const RunReport& report, const std::string& variant, uint64_t seed,
                         const std::string& source_label, const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) fail(ErrorCode::io, "write_stream_report: cannot create " + out_dir);
    (void)source_label;
    {
        std::ofstream csv(fs::path(out_dir) / "report.csv", std::ios::trunc);
        csv << "scenario,variant,seed,dice_disc,dice_cup,dice_mean,cos_mean,eta_mean\n";
        csv << report.scenario << ',' << variant << ',' << seed << ',' << fmt6(report.dice_disc)
            << ',' << fmt6(report.dice_cup) << ',' << fmt6(report.dice_mean) << ','
            << fmt6(report.cos_mean) << ',' << fmt6(report.eta_mean) << '\n';
    }
    {
        std::ofstream csv(fs::path(out_dir) / "steps.csv", std::ios::trunc);
        csv << "image_index,loss_aux,loss_pseudo,cosine,eta,grad_norm_aux,grad_norm_pseudo,"
               "dice_after,skipped\n";
        for (const auto& r : report.records)
            csv << r.image_index << ',' << fmt6(r.loss_aux) << ',' << fmt6(r.loss_pseudo) << ','
                << fmt6(r.cosine) << ',' << fmt6(r.eta) << ',' << fmt6(r.grad_norm_aux) << ','
                << fmt6(r.grad_norm_pseudo) << ',' << fmt6(r.dice_after) << ','
                << (r.skipped ? 1 : 0) << '\n';
    }
}

}  // namespace tta
