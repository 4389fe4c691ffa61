#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "tta/rng.hpp"
#include "tta/tensor.hpp"

using namespace tta;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Reference convolution: six nested loops, no cleverness.
std::vector<double> conv2d_naive(const std::vector<double>& x, int N, int C, int H, int W,
                                 const std::vector<double>& w, int O, int KH, int KW,
                                 std::vector<double> b, int stride, int pad) {
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (W + 2 * pad - KW) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N) * O * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = b[o];
                    for (int c = 0; c < C; ++c)
                        for (int kh = 0; kh < KH; ++kh)
                            for (int kw = 0; kw < KW; ++kw) {
                                const int iy = oy * stride + kh - pad;
                                const int ix = ox * stride + kw - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x[((n * C + c) * H + iy) * W + ix] *
                                       w[((o * C + c) * KH + kh) * KW + kw];
                            }
                    out[((n * O + o) * OH + oy) * OW + ox] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("elementwise basics") {
    auto x = Tensor<double>::from({3}, {0.0, 1.0, -1.0});
    auto s = sigmoid(x);
    CHECK(s.values()[0] == doctest::Approx(0.5));

    auto c = Tensor<double>::full({4, 4}, 2.5);
    CHECK(mean(c).item() == doctest::Approx(2.5));

    auto a = Tensor<double>::from({2}, {1.0, 2.0});
    auto b = Tensor<double>::scalar(3.0);
    auto r = add(a, b);
    CHECK(r.values()[0] == 4.0);
    CHECK(r.values()[1] == 5.0);
    auto r2 = sub(b, a);
    CHECK(r2.values()[0] == 2.0);
    CHECK(r2.values()[1] == 1.0);

    CHECK_THROWS_AS(add(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({3, 2})), Error);
}

TEST_CASE("grad of mean(sigmoid(x)) matches finite differences") {
    Rng rng(11);
    auto x = random_tensor({2, 5}, rng, -2.0, 2.0);
    double err = grad_check([](const Tensor<double>& t) { return mean(sigmoid(t)); }, x, 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("backward on products and means") {
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    auto x = Tensor<double>::scalar(2.0);
    auto y = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    auto loss = mul(x, y);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK(y.grad()[0] == doctest::Approx(2.0));

    tape.clear();
    auto z = Tensor<double>::full({8}, 1.0);
    z.set_requires_grad(true);
    auto m = mean(z);
    tape.backward(m);
    for (double g : z.grad()) CHECK(g == doctest::Approx(1.0 / 8.0));
}

TEST_CASE("repeated backward without reset accumulates") {
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    auto x = Tensor<double>::scalar(1.5);
    x.set_requires_grad(true);
    auto loss = scale(x, 2.0);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("backward errors") {
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    auto x = Tensor<double>::zeros({3});
    x.set_requires_grad(true);
    auto y = relu(x);
    CHECK_THROWS_AS(tape.backward(y), Error);

    auto loss = mean(y);
    {
        TapeScope<double> none(nullptr);
        CHECK_THROWS_AS(backward(loss), Error);
    }
}

TEST_CASE("conv2d identity and constant kernels") {
    Rng rng(3);
    auto x = random_tensor({1, 1, 5, 5}, rng, 0.0, 1.0);
    auto w = Tensor<double>::from({1, 1, 1, 1}, {1.0});
    auto b = Tensor<double>::zeros({1});
    auto y = conv2d(x, w, b, 1, 0);
    for (size_t i = 0; i < x.values().size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]));

    auto ximg = Tensor<double>::full({1, 1, 6, 6}, 0.7);
    auto w9 = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto y9 = conv2d(ximg, w9, b, 1, 1);
    // interior pixels see the full 3x3 window
    CHECK(y9.values()[1 * 6 + 1] == doctest::Approx(9 * 0.7));
    CHECK(y9.values()[3 * 6 + 2] == doctest::Approx(9 * 0.7));
}

TEST_CASE("conv2d matches the naive reference") {
    Rng rng(17);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{1, 0}, std::pair{2, 1}}) {
        auto x = random_tensor({2, 3, 8, 8}, rng);
        auto w = random_tensor({4, 3, 3, 3}, rng);
        auto b = random_tensor({4}, rng);
        auto y = conv2d(x, w, b, stride, pad);
        auto ref = conv2d_naive(x.values(), 2, 3, 8, 8, w.values(), 4, 3, 3, b.values(), stride, pad);
        REQUIRE(y.values().size() == ref.size());
        double max_diff = 0.0;
        for (size_t i = 0; i < ref.size(); ++i)
            max_diff = std::max(max_diff, std::fabs(y.values()[i] - ref[i]));
        CHECK(max_diff <= 1e-5);
    }
}

TEST_CASE("conv2d shape errors") {
    auto x = Tensor<double>::zeros({1, 2, 4, 4});
    auto w = Tensor<double>::zeros({3, 5, 3, 3});
    auto b = Tensor<double>::zeros({3});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), Error);
}

TEST_CASE("batch_norm2d train and eval modes") {
    // constant per-channel input: normalized value is ~0, output ~beta
    auto x = Tensor<double>::full({1, 2, 4, 4}, 3.0);
    auto gamma = Tensor<double>::full({2}, 1.5);
    auto beta = Tensor<double>::from({2}, {0.25, -0.5});
    auto rm = Tensor<double>::zeros({2});
    auto rv = Tensor<double>::full({2}, 1.0);
    auto y = batch_norm2d(x, gamma, beta, rm, rv, BnMode::train);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 16; ++i)
            CHECK(y.values()[c * 16 + i] == doctest::Approx(beta.values()[c]).epsilon(1e-6));

    // gamma=1, beta=0: per-channel mean 0 / var 1 within 1e-4
    Rng rng(5);
    auto xr = random_tensor({2, 3, 6, 6}, rng, 0.0, 4.0);
    auto g1 = Tensor<double>::full({3}, 1.0);
    auto b0 = Tensor<double>::zeros({3});
    auto rm3 = Tensor<double>::zeros({3});
    auto rv3 = Tensor<double>::full({3}, 1.0);
    auto yr = batch_norm2d(xr, g1, b0, rm3, rv3, BnMode::train);
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 36; ++i) {
                double v = yr.values()[(n * 3 + c) * 36 + i];
                s += v;
                s2 += v * v;
            }
        const double m = s / 72.0, var = s2 / 72.0 - m * m;
        CHECK(std::fabs(m) <= 1e-4);
        CHECK(std::fabs(var - 1.0) <= 1e-4);
    }

    // eval mode closed form
    auto x1 = Tensor<double>::full({1, 1, 2, 2}, 1.0);
    auto g2 = Tensor<double>::full({1}, 2.0);
    auto b3 = Tensor<double>::full({1}, 3.0);
    auto rm0 = Tensor<double>::zeros({1});
    auto rv1 = Tensor<double>::full({1}, 1.0);
    auto ye = batch_norm2d(x1, g2, b3, rm0, rv1, BnMode::eval);
    CHECK(ye.values()[0] == doctest::Approx(2.0 / std::sqrt(1.0 + 1e-5) + 3.0).epsilon(1e-6));
}

TEST_CASE("batch_norm2d running statistics update") {
    auto x = Tensor<double>::full({1, 1, 2, 2}, 2.0);
    auto g = Tensor<double>::full({1}, 1.0);
    auto b = Tensor<double>::zeros({1});
    auto rm = Tensor<double>::zeros({1});
    auto rv = Tensor<double>::full({1}, 1.0);
    batch_norm2d(x, g, b, rm, rv, BnMode::train, 0.1, 1e-5, true);
    CHECK(rm.values()[0] == doctest::Approx(0.2));
    // constant input: batch var 0, unbiased 0 -> rv shrinks by momentum
    CHECK(rv.values()[0] == doctest::Approx(0.9));

    // update disabled leaves buffers alone
    batch_norm2d(x, g, b, rm, rv, BnMode::train, 0.1, 1e-5, false);
    CHECK(rm.values()[0] == doctest::Approx(0.2));
}

TEST_CASE("spatial transforms are exact permutations") {
    auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto r = spatial_transform(x, SpatialTransform::rot90);
    CHECK(r.values() == std::vector<double>{2, 4, 1, 3});

    Rng rng(9);
    auto img = random_tensor({1, 2, 6, 6}, rng);
    for (auto t : {SpatialTransform::identity, SpatialTransform::hflip, SpatialTransform::vflip,
                   SpatialTransform::rot90, SpatialTransform::rot180, SpatialTransform::rot270}) {
        auto back = spatial_transform(spatial_transform(img, t), inverse(t));
        CHECK(back.values() == img.values());
    }

    auto four = spatial_transform(
        spatial_transform(spatial_transform(spatial_transform(img, SpatialTransform::rot90),
                                            SpatialTransform::rot90),
                          SpatialTransform::rot90),
        SpatialTransform::rot90);
    CHECK(four.values() == img.values());

    auto rect = Tensor<double>::zeros({2, 3});
    CHECK_THROWS_AS(spatial_transform(rect, SpatialTransform::rot90), Error);
    CHECK(spatial_transform(rect, SpatialTransform::hflip).shape() == Shape{2, 3});
}

TEST_CASE("resample") {
    auto x = Tensor<double>::full({1, 1, 2, 2}, 1.0);
    auto d = resample(x, ResampleMode::down_avg, 2);
    CHECK(d.shape() == Shape{1, 1, 1, 1});
    CHECK(d.values()[0] == doctest::Approx(1.0));

    auto p = Tensor<double>::from({1, 1, 1, 1}, {5.0});
    auto u = resample(p, ResampleMode::up_nearest, 2);
    CHECK(u.values() == std::vector<double>{5, 5, 5, 5});

    Rng rng(13);
    auto img = random_tensor({1, 3, 4, 4}, rng);
    auto round = resample(resample(img, ResampleMode::up_nearest, 3), ResampleMode::down_avg, 3);
    for (size_t i = 0; i < img.values().size(); ++i)
        CHECK(round.values()[i] == doctest::Approx(img.values()[i]).epsilon(1e-12));

    auto odd = Tensor<double>::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(resample(odd, ResampleMode::down_avg, 2), Error);
}

TEST_CASE("composite pipeline gradient vs finite differences") {
    // conv -> bn -> relu -> sigmoid -> bce against a fixed target, checked
    // for every parameter of the pipeline
    Rng rng(23);
    auto x = random_tensor({1, 2, 6, 6}, rng, 0.0, 1.0);
    auto target = random_tensor({1, 3, 6, 6}, rng, 0.0, 1.0);
    auto rm = Tensor<double>::zeros({3});
    auto rv = Tensor<double>::full({3}, 1.0);

    auto run = [&](const Tensor<double>& w, const Tensor<double>& b, const Tensor<double>& gam,
                   const Tensor<double>& bet, BnMode mode) {
        auto h = conv2d(x, w, b, 1, 1);
        auto rmc = rm.clone_detached();
        auto rvc = rv.clone_detached();
        auto n = batch_norm2d(h, gam, bet, rmc, rvc, mode);
        auto p = sigmoid(relu(n));
        auto pc = clamp(p, 1e-6, 1.0 - 1e-6);
        auto bce = sub(Tensor<double>::scalar(0.0),
                       add(mul(target, safe_log(pc)),
                           mul(sub(Tensor<double>::scalar(1.0), target),
                               safe_log(sub(Tensor<double>::scalar(1.0), pc)))));
        return mean(bce);
    };

    auto w0 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    auto b0 = random_tensor({3}, rng, -0.1, 0.1);
    auto g0 = random_tensor({3}, rng, 0.5, 1.5);
    auto s0 = random_tensor({3}, rng, -0.5, 0.5);

    auto check_param = [&](Tensor<double>& p, auto loss_fn) {
        double err = grad_check(loss_fn, p, 1e-5);
        CHECK(err <= 1e-5);
    };
    // train-mode statistics cancel the conv bias exactly (its gradient is
    // structurally zero there), so the bias is exercised through eval mode
    check_param(w0, [&](const Tensor<double>& t) { return run(t, b0, g0, s0, BnMode::train); });
    check_param(g0, [&](const Tensor<double>& t) { return run(w0, b0, t, s0, BnMode::train); });
    check_param(s0, [&](const Tensor<double>& t) { return run(w0, b0, g0, t, BnMode::train); });
    check_param(w0, [&](const Tensor<double>& t) { return run(t, b0, g0, s0, BnMode::eval); });
    check_param(b0, [&](const Tensor<double>& t) { return run(w0, t, g0, s0, BnMode::eval); });
    check_param(g0, [&](const Tensor<double>& t) { return run(w0, b0, t, s0, BnMode::eval); });
    check_param(s0, [&](const Tensor<double>& t) { return run(w0, b0, g0, t, BnMode::eval); });
}

TEST_CASE("grad_check calibration cases") {
    auto x = Tensor<double>::from({4}, {0.3, -0.7, 1.1, 0.4});
    double lin = grad_check([](const Tensor<double>& t) { return sum(scale(t, 3.0)); }, x, 1e-5);
    CHECK(lin <= 1e-10);

    auto ones = Tensor<double>::full({4}, 1.0);
    double quad = grad_check([](const Tensor<double>& t) { return sum(mul(t, t)); }, ones, 1e-5);
    CHECK(quad <= 1e-8);
}

TEST_CASE("every differentiable primitive passes grad_check on random inputs") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = random_tensor({2, 2, 4, 4}, rng, 0.1, 0.9);
        auto other = random_tensor({2, 2, 4, 4}, rng, 0.2, 1.2);
        auto sc = Tensor<double>::scalar(rng.uniform(0.5, 1.5));

        auto fd = [&](const char* label, auto f) {
            double err = grad_check(f, x, 1e-5);
            INFO(std::string(label) << " trial " << trial);
            CHECK(err <= 1e-6);
        };
        fd("add", [&](const Tensor<double>& t) { return mean(add(t, other)); });
        fd("sub", [&](const Tensor<double>& t) { return mean(sub(other, t)); });
        fd("mul", [&](const Tensor<double>& t) { return mean(mul(t, other)); });
        fd("mul-scalar", [&](const Tensor<double>& t) { return mean(mul(t, sc)); });
        fd("scale", [&](const Tensor<double>& t) { return mean(scale(t, -1.7)); });

        // keep sample points away from the relu kink; central differences
        // assume differentiability at the evaluation point
        auto xk = x.clone_detached();
        for (auto& v : xk.values())
            if (std::fabs(v - 0.5) < 1e-3) v += 2e-3;
        double relu_err = grad_check(
            [](const Tensor<double>& t) {
                return mean(relu(sub(t, Tensor<double>::scalar(0.5))));
            },
            xk, 1e-5);
        CHECK(relu_err <= 1e-6);
        fd("sigmoid", [&](const Tensor<double>& t) { return mean(sigmoid(t)); });
        fd("exp", [&](const Tensor<double>& t) { return mean(tta::exp(t)); });
        fd("log", [&](const Tensor<double>& t) { return mean(safe_log(t)); });
        fd("clamp", [&](const Tensor<double>& t) { return mean(clamp(t, -5.0, 5.0)); });
        fd("sum", [&](const Tensor<double>& t) { return sum(t); });
        fd("take", [&](const Tensor<double>& t) { return take(reshape(t, {64}), 7); });
        fd("rot90", [&](const Tensor<double>& t) {
            return mean(spatial_transform(t, SpatialTransform::rot90));
        });
        fd("down_avg", [&](const Tensor<double>& t) {
            return mean(mul(resample(t, ResampleMode::down_avg, 2), sc));
        });
        fd("up_nearest", [&](const Tensor<double>& t) {
            return mean(scale(resample(t, ResampleMode::up_nearest, 2), 0.7));
        });
        fd("concat", [&](const Tensor<double>& t) { return mean(concat_channels(t, other)); });
        fd("gap", [&](const Tensor<double>& t) { return mean(global_avg_pool(t)); });

        auto w = random_tensor({3, 2, 3, 3}, rng, -0.4, 0.4);
        auto b = random_tensor({3}, rng, -0.1, 0.1);
        auto proj = random_tensor({2, 3, 4, 4}, rng);
        fd("conv", [&](const Tensor<double>& t) { return mean(mul(conv2d(t, w, b, 1, 1), proj)); });

        auto gamma = random_tensor({2}, rng, 0.5, 1.5);
        auto beta = random_tensor({2}, rng, -0.3, 0.3);
        auto rm = Tensor<double>::zeros({2});
        auto rv = Tensor<double>::full({2}, 1.0);
        auto bn_proj = random_tensor({2, 2, 4, 4}, rng);
        fd("bn", [&](const Tensor<double>& t) {
            auto rmc = rm.clone_detached();
            auto rvc = rv.clone_detached();
            return mean(mul(batch_norm2d(t, gamma, beta, rmc, rvc, BnMode::train), bn_proj));
        });

        auto feat = random_tensor({2, 6}, rng);
        auto lw = random_tensor({4, 6}, rng, -0.5, 0.5);
        auto lb = random_tensor({4}, rng, -0.2, 0.2);
        double lerr = grad_check(
            [&](const Tensor<double>& t) { return mean(sigmoid(linear(t, lw, lb))); }, feat, 1e-5);
        CHECK(lerr <= 1e-6);
    }
}

TEST_CASE("backward is bit-deterministic") {
    auto run_once = [] {
        Rng rng(77);
        Tape<double> tape;
        TapeScope<double> scope(&tape);
        auto x = Tensor<double>::zeros({1, 2, 6, 6});
        for (auto& v : x.values()) v = rng.uniform(0.0, 1.0);
        auto w = Tensor<double>::zeros({2, 2, 3, 3});
        for (auto& v : w.values()) v = rng.uniform(-0.5, 0.5);
        auto b = Tensor<double>::zeros({2});
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        auto loss = mean(sigmoid(conv2d(x, w, b, 1, 1)));
        tape.backward(loss);
        return w.grad();
    };
    CHECK(run_once() == run_once());
}

TEST_CASE("log clamp keeps [0,1] pipelines NaN-free") {
    CHECK(safe_log(Tensor<double>::scalar(0.0)).item() == doctest::Approx(std::log(1e-12)));

    Rng rng(41);
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    auto p = random_tensor({128}, rng, 0.0, 1.0);
    p.values()[0] = 0.0;
    p.values()[1] = 1.0;
    p.set_requires_grad(true);
    auto ent = scale(mean(mul(p, safe_log(p))), -1.0);
    tape.backward(ent);
    for (double v : ent.values()) CHECK(std::isfinite(v));
    for (double g : p.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("non-finite outputs are detected") {
    auto big = Tensor<double>::scalar(1e308);
    CHECK_THROWS_AS(tta::exp(big), Error);
    CHECK_THROWS_AS(mul(big, big), Error);
    {
        FiniteCheckGuard off(false);
        auto inf = mul(big, big);
        CHECK(!std::isfinite(inf.item()));
    }
    CHECK_THROWS_AS(mul(big, big), Error);
}
