#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "tta/bench.hpp"
#include "tta/config.hpp"
#include "tta/synth.hpp"

using namespace tta;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// small-but-real harness settings used across these tests
HarnessConfig tiny_harness() {
    HarnessConfig cfg;
    cfg.domains = domain_presets();
    cfg.n_train = 24;
    cfg.n_test = 4;
    cfg.pretrain_epochs = 2;
    cfg.jobs = 1;
    return cfg;
}

}  // namespace

TEST_CASE("dice closed forms") {
    std::vector<float> a = {1, 1, 0, 0, 1, 0, 1, 1};
    CHECK(dice(a, a) == doctest::Approx(1.0));

    std::vector<float> left = {1, 1, 0, 0};
    std::vector<float> right = {0, 0, 1, 1};
    CHECK(dice(left, right) == doctest::Approx(0.0));

    // |A| = 8, |B| = 8, |A n B| = 4 -> 0.5
    std::vector<float> pa(16, 0.0f), pb(16, 0.0f);
    for (int i = 0; i < 8; ++i) pa[static_cast<size_t>(i)] = 1.0f;
    for (int i = 4; i < 12; ++i) pb[static_cast<size_t>(i)] = 1.0f;
    CHECK(dice(pa, pb) == doctest::Approx(0.5));

    std::vector<float> empty(16, 0.0f);
    CHECK(dice(empty, empty) == doctest::Approx(1.0));

    std::vector<float> shorter(4, 0.0f);
    CHECK_THROWS_AS(dice(shorter, empty), Error);
}

TEST_CASE("generate_domain invariants") {
    auto spec = domain_preset("C");
    auto a = generate_domain(spec, 16, 7);
    auto b = generate_domain(spec, 16, 7);
    REQUIRE(a.samples.size() == 16);
    for (size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].image.values() == b.samples[i].image.values());
        CHECK(a.samples[i].mask.values() == b.samples[i].mask.values());
    }

    for (const auto& s : a.samples) {
        const int64_t hw = static_cast<int64_t>(64) * 64;
        const float* disc = s.mask.values().data();
        const float* cup = disc + hw;
        int64_t disc_count = 0, cup_count = 0;
        for (int64_t i = 0; i < hw; ++i) {
            if (cup[i] > 0.5f) CHECK(disc[i] > 0.5f);  // cup inside disc
            disc_count += disc[i] > 0.5f;
            cup_count += cup[i] > 0.5f;
        }
        CHECK(disc_count > cup_count);
        CHECK(cup_count > 0);

        float lo = 1e9f, hi = -1e9f;
        for (float v : s.image.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);
    }
}

TEST_CASE("the five presets are pairwise distinct in at least two corruption parameters") {
    auto presets = domain_presets();
    REQUIRE(presets.size() == 5);
    for (size_t i = 0; i < presets.size(); ++i)
        for (size_t j = i + 1; j < presets.size(); ++j) {
            int differing = 0;
            differing += presets[i].intensity_shift != presets[j].intensity_shift;
            differing += presets[i].contrast_scale != presets[j].contrast_scale;
            differing += presets[i].noise_sigma != presets[j].noise_sigma;
            differing += presets[i].blur_sigma != presets[j].blur_sigma;
            CHECK(differing >= 2);
        }
}

TEST_CASE("dataset save/load round trip") {
    const std::string dir = "/tmp/tta_ds_roundtrip";
    std::filesystem::remove_all(dir);
    auto spec = domain_preset("B");
    auto dataset = generate_domain(spec, 5, 99);
    save_dataset(dataset, dir);
    auto loaded = load_dataset(dir);
    CHECK(loaded.spec.name == "B");
    CHECK(loaded.seed == 99);
    CHECK(loaded.spec.noise_sigma == spec.noise_sigma);
    REQUIRE(loaded.samples.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(loaded.samples[i].image.values() == dataset.samples[i].image.values());
        CHECK(loaded.samples[i].mask.values() == dataset.samples[i].mask.values());
    }
    CHECK_THROWS_AS(load_dataset("/tmp/tta_ds_missing_dir"), Error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("pretrain learns, is deterministic, and rejects divergence") {
    auto spec = domain_preset("A");
    auto train = generate_domain(spec, 40, 123);
    SegNetConfig model_cfg;
    model_cfg.seed = 5;

    auto r1 = pretrain(model_cfg, train, 8, 1e-3, 8, 42);
    CHECK(r1.epoch_losses.front() > r1.epoch_losses.back());

    auto r2 = pretrain(model_cfg, train, 8, 1e-3, 8, 42);
    CHECK(r1.model->collect_params(ParamSubset::all).values ==
          r2.model->collect_params(ParamSubset::all).values);
    CHECK(r1.train_dice == r2.train_dice);

    CHECK_THROWS_AS(pretrain(model_cfg, train, 2, 1e38, 8, 42), Error);
}

TEST_CASE("run_stream: no_adapt leaves the source untouched; beta=0 matches train-BN no_adapt") {
    auto spec_a = domain_preset("A");
    auto train = generate_domain(spec_a, 30, 55);
    SegNetConfig model_cfg;
    auto pre = pretrain(model_cfg, train, 6, 1e-3, 8, 7);

    auto target = generate_domain(domain_preset("D"), 6, 77);
    HarnessConfig cfg = tiny_harness();

    auto before = pre.model->collect_params(ParamSubset::all);
    StreamSpec na;
    na.kind = StreamKind::no_adapt;
    na.inference_bn = BnMode::eval;
    auto report_na = run_stream(*pre.model, target, na, cfg, 1, "A->D");
    auto after = pre.model->collect_params(ParamSubset::all);
    CHECK(before.values == after.values);

    // identical rerun (fresh clone of source weights inside)
    auto report_again = run_stream(*pre.model, target, na, cfg, 1, "A->D");
    REQUIRE(report_na.records.size() == report_again.records.size());
    for (size_t i = 0; i < report_na.records.size(); ++i)
        CHECK(report_na.records[i].dice_after == report_again.records[i].dice_after);

    // beta = 0 adaptation with train-mode inference == no_adapt with train-mode BN
    StreamSpec na_train = na;
    na_train.inference_bn = BnMode::train;
    auto base = run_stream(*pre.model, target, na_train, cfg, 1, "A->D");

    StreamSpec zero;
    zero.kind = StreamKind::grata;
    zero.adapt.beta = 0.0;
    auto adapted = run_stream(*pre.model, target, zero, cfg, 1, "A->D");
    REQUIRE(base.records.size() == adapted.records.size());
    for (size_t i = 0; i < base.records.size(); ++i)
        CHECK(base.records[i].dice_after == adapted.records[i].dice_after);
}

TEST_CASE("increasing noise strictly decreases no-adapt dice in expectation") {
    auto spec = domain_preset("A");
    auto train = generate_domain(spec, 60, 11);
    SegNetConfig model_cfg;
    auto pre = pretrain(model_cfg, train, 10, 1e-3, 8, 13);
    HarnessConfig cfg = tiny_harness();

    StreamSpec na;
    na.kind = StreamKind::no_adapt;
    na.inference_bn = BnMode::eval;

    std::vector<double> mean_dice;
    for (double sigma : {0.05, 0.2, 0.4}) {
        DomainSpec shifted = spec;
        shifted.noise_sigma = sigma;
        double acc = 0.0;
        for (uint64_t seed = 0; seed < 5; ++seed) {
            auto target = generate_domain(shifted, 12, 300 + seed);
            acc += run_stream(*pre.model, target, na, cfg, seed, "A->noise").dice_mean;
        }
        mean_dice.push_back(acc / 5.0);
    }
    CHECK(mean_dice[0] > mean_dice[1]);
    CHECK(mean_dice[1] > mean_dice[2]);
}

TEST_CASE("suite variant grids") {
    HarnessConfig cfg = tiny_harness();
    CHECK(suite_variants(SuiteKind::main_suite, cfg).size() == 3);
    CHECK(suite_variants(SuiteKind::ablation, cfg).size() == 3);
    CHECK(suite_variants(SuiteKind::exchange, cfg).size() == 3);
    CHECK(suite_variants(SuiteKind::activation, cfg).size() == 5);
    auto combo = suite_variants(SuiteKind::combination, cfg);
    CHECK(combo.size() == 30);
    std::set<std::string> labels;
    for (const auto& v : combo) {
        labels.insert(v.label);
        CHECK(v.spec.adapt.pseudo != v.spec.adapt.aux);
    }
    CHECK(labels.size() == 30);
    CHECK(suite_variants(SuiteKind::cosine_diag, cfg).size() == 1);
    CHECK(suite_variants(SuiteKind::cosine_diag, cfg)[0].spec.diag);
}

TEST_CASE("run_suite produces a deterministic report; ablation row 1 cross-checks bit-exactly") {
    HarnessConfig cfg = tiny_harness();
    SuiteEnv env = prepare_suite_env(cfg, "", false, false);

    auto result = run_suite(SuiteKind::ablation, {1}, env, false);
    CHECK(result.rows.size() == 5 * 3);  // 5 sources x 3 variants x 1 seed
    CHECK(result.aggregates.size() == 3);

    // dual route: the pseudo-objective fixed-lr row equals direct plain streams
    for (const auto& row : result.rows) {
        if (row.variant != "pseudo_fixed_lr" || row.scenario != "B") continue;
        StreamSpec plain;
        plain.kind = StreamKind::plain;
        plain.plain_objective = cfg.adapt.pseudo;
        plain.plain_lr = cfg.adapt.beta;
        plain.plain_optimizer = cfg.adapt.optimizer;
        plain.adapt = cfg.adapt;
        double disc = 0, cup = 0, mean = 0;
        int streams = 0;
        for (const auto& domain : env.domains) {
            if (domain.name == "B") continue;
            auto rep = run_stream(*env.source_models.at("B"), env.test_sets.at(domain.name),
                                  plain, cfg,
                                  stream_seed(1, "B", domain.name, "pseudo_fixed_lr"),
                                  "B->" + domain.name);
            disc += rep.dice_disc;
            cup += rep.dice_cup;
            mean += rep.dice_mean;
            ++streams;
        }
        CHECK(row.dice_disc == disc / streams);
        CHECK(row.dice_cup == cup / streams);
        CHECK(row.dice_mean == mean / streams);
    }

    const std::string out1 = "/tmp/tta_suite_out1";
    const std::string out2 = "/tmp/tta_suite_out2";
    std::filesystem::remove_all(out1);
    std::filesystem::remove_all(out2);
    emit_report(result, out1);
    emit_report(result, out2);

    auto csv1 = read_file(out1 + "/ablation.csv");
    CHECK(!csv1.empty());
    CHECK(csv1.rfind("scenario,variant,seed,dice_disc,dice_cup,dice_mean,cos_mean,eta_mean\n",
                     0) == 0);
    CHECK(csv1 == read_file(out2 + "/ablation.csv"));

    // full rerun of the suite is byte-identical as well
    auto rerun = run_suite(SuiteKind::ablation, {1}, env, false);
    emit_report(rerun, out2);
    CHECK(csv1 == read_file(out2 + "/ablation.csv"));

    const size_t lines = static_cast<size_t>(std::count(csv1.begin(), csv1.end(), '\n'));
    CHECK(lines == 1 + result.rows.size() + result.aggregates.size());
    std::filesystem::remove_all(out1);
    std::filesystem::remove_all(out2);
}

TEST_CASE("prepare_suite_env caches weights and can require them") {
    HarnessConfig cfg = tiny_harness();
    const std::string cache = "/tmp/tta_weights_cache";
    std::filesystem::remove_all(cache);

    CHECK_THROWS_AS(prepare_suite_env(cfg, cache, true, false), Error);

    SuiteEnv env = prepare_suite_env(cfg, cache, false, false);
    for (const auto& d : env.domains)
        CHECK(std::filesystem::exists(cache + "/" + d.name + ".gtwt"));

    SuiteEnv reloaded = prepare_suite_env(cfg, cache, true, false);
    for (const auto& d : env.domains)
        CHECK(env.source_models.at(d.name)->collect_params(ParamSubset::all).values ==
              reloaded.source_models.at(d.name)->collect_params(ParamSubset::all).values);
    std::filesystem::remove_all(cache);
}
