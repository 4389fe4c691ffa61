#pragma once

// Benchmark harness: source pretraining, online single-image adaptation
// streams, Dice evaluation, the experiment suites and their CSV reports.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tta/adapt.hpp"
#include "tta/nn.hpp"
#include "tta/objectives.hpp"
#include "tta/synth.hpp"

namespace tta {

// 2|A n B| / (|A| + |B|) on the thresholded prediction; 1 when both masks
// are empty.
double dice(const std::vector<float>& pred, const std::vector<float>& gt,
            double threshold = 0.5);

struct DiceScores {
    double disc = 0.0, cup = 0.0, mean = 0.0;
};

// probs and mask are 1 x 2 x H x W (channel 0 disc, channel 1 cup).
DiceScores dice_scores(const Tensor<float>& probs, const Tensor<float>& mask,
                       double threshold = 0.5);

struct HarnessConfig {
    SegNetConfig model;
    AugmentationSpec aug;
    AdaptConfig adapt;
    std::vector<DomainSpec> domains;  // empty = the five presets
    double denoise_sigma = 0.05;
    int n_train = 200;
    int n_test = 50;
    int image_size = 64;
    uint64_t data_seed = 77;
    int pretrain_epochs = 30;
    double pretrain_lr = 1e-3;
    int pretrain_batch = 8;
    int jobs = 0;  // 0 = hardware concurrency
};

struct PretrainResult {
    std::shared_ptr<SegNet<float>> model;
    std::vector<double> epoch_losses;
    double train_dice = 0.0;
};

// Supervised BCE over both channels with adam; shuffling is reseeded per
// epoch from `seed`. Throws on divergence (non-finite loss).
PretrainResult pretrain(const SegNetConfig& cfg, const Dataset& source, int epochs, double lr,
                        int batch, uint64_t seed);

enum class StreamKind { no_adapt, plain, grata };

struct StreamSpec {
    StreamKind kind = StreamKind::grata;
    ObjectiveKind plain_objective = ObjectiveKind::ent;
    double plain_lr = 1e-4;
    OptimizerKind plain_optimizer = OptimizerKind::adam;
    AdaptConfig adapt;
    BnMode inference_bn = BnMode::train;
    bool diag = false;  // also record supervised-gradient cosines
};

struct RunReport {
    std::string scenario;  // "source->target"
    std::vector<StepRecord> records;
    double dice_disc = 0.0, dice_cup = 0.0, dice_mean = 0.0;
    double cos_mean = 0.0, eta_mean = 0.0;
    double cos_pse_shifted_sup = 0.0, cos_pse_theta_sup = 0.0;
    int skipped = 0;
};

// Online pass over the target dataset in order, one step per image, batch
// size 1; inference on the plain image after each step.
RunReport run_stream(const SegNet<float>& source, const Dataset& target,
                     const StreamSpec& spec, const HarnessConfig& cfg, uint64_t run_seed,
                     const std::string& scenario);

enum class SuiteKind { main_suite, ablation, exchange, activation, combination, cosine_diag };

const char* suite_name(SuiteKind kind);
SuiteKind parse_suite(const std::string& name);

struct VariantDef {
    std::string label;
    StreamSpec spec;
};

// The variant grid of each experiment.
std::vector<VariantDef> suite_variants(SuiteKind kind, const HarnessConfig& cfg);

struct SuiteEnv {
    HarnessConfig cfg;
    std::vector<DomainSpec> domains;
    std::map<std::string, Dataset> test_sets;
    std::map<std::string, std::shared_ptr<SegNet<float>>> source_models;
    std::map<std::string, double> source_dice;
};

// Generates the per-domain datasets and pretrains one source model per
// domain. When weights_dir is non-empty, weights are cached there and
// reloaded on rerun; when require_weights is set, missing cached weights are
// an error instead of a pretraining trigger.
SuiteEnv prepare_suite_env(const HarnessConfig& cfg, const std::string& weights_dir,
                           bool require_weights, bool verbose);

// Stream seeding used by run_suite: a suite seed plus the stream identity
// ("source->target" and variant label) fully determine a stream's randomness.
uint64_t stream_seed(uint64_t suite_seed, const std::string& source, const std::string& target,
                     const std::string& variant);

struct SuiteRow {
    std::string scenario;  // source domain name, or "mean" for aggregates
    std::string variant;
    int64_t seed = 0;  // -1 for aggregate rows
    double dice_disc = 0.0, dice_cup = 0.0, dice_mean = 0.0;
    double cos_mean = 0.0, eta_mean = 0.0;
    double cos_pse_shifted_sup = 0.0, cos_pse_theta_sup = 0.0;
    int skipped = 0;
};

struct SuiteResult {
    SuiteKind kind = SuiteKind::main_suite;
    std::vector<SuiteRow> rows;        // one per (source, variant, seed)
    std::vector<SuiteRow> aggregates;  // one per variant, means over rows
};

// Each domain takes its turn as source; a row averages the four target
// streams. Cells run on a small thread pool; outputs are order-deterministic.
SuiteResult run_suite(SuiteKind kind, const std::vector<uint64_t>& seeds, const SuiteEnv& env,
                      bool verbose);

// Writes <suite>.csv (fixed schema scenario,variant,seed,dice_disc,dice_cup,
// dice_mean,cos_mean,eta_mean), cosine_diag.csv for the diagnostic suite, and
// summary.txt. Reruns with identical inputs are byte-identical.
void emit_report(const SuiteResult& result, const std::string& out_dir);

// Single-stream report for the adapt subcommand: report.csv in the fixed
// schema plus steps.csv with the per-image records.
void write_stream_report(const RunReport& report, const std::string& variant, uint64_t seed,
                         const std::string& source_label, const std::string& out_dir);

}  // namespace tta
