#pragma once

// Shared test helpers. The finite-difference oracle below is independent of
// the reverse-mode path it checks: it only uses forward loss evaluations.

#include <algorithm>
#include <cmath>

#include "tta/nn.hpp"
#include "tta/objectives.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta_test {

inline tta::Tensor<double> random_image_d(int size, uint64_t seed) {
    tta::Rng rng(seed);
    auto t = tta::Tensor<double>::zeros({1, 1, size, size});
    for (auto& v : t.values()) v = rng.uniform();
    return t;
}

inline tta::Tensor<float> random_image_f(int size, uint64_t seed) {
    tta::Rng rng(seed);
    auto t = tta::Tensor<float>::zeros({1, 1, size, size});
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform());
    return t;
}

inline double loss_value(tta::ObjectiveKind kind, tta::SegNet<double>& model,
                         const tta::Tensor<double>& x, const tta::ObjectiveContext<double>& ctx) {
    tta::TapeScope<double> no_grad(nullptr);
    return tta::objective_loss(kind, model, x, ctx).item();
}

struct FdCheck {
    double max_rel_err = 0.0;  // over coordinates where the oracle is valid
    int skipped = 0;           // coordinates straddling a kink in the window
    int total = 0;
};

// Max relative error between the analytic gradient of an objective over a
// parameter subset and central finite differences of the loss value. The
// consistency objective treats its weak-variant target as a stop-gradient,
// so the differenced function freezes the target at the base parameters --
// that is the function whose gradient the implementation claims to compute.
//
// Central differences presume differentiability inside the probe window; a
// relu kink there invalidates the oracle for that coordinate. Validity is
// checked from loss values alone: estimates at steps h and h/2 must agree
// (smooth coordinates differ by O(h^2), a kink by O(slope jump)). Invalid
// coordinates are excluded and counted; the screen cannot mask a wrong
// analytic gradient, which would still mismatch the stable estimate.
inline FdCheck objective_fd_check(tta::ObjectiveKind kind, tta::SegNet<double>& model,
                                  const tta::Tensor<double>& x,
                                  const tta::ObjectiveContext<double>& ctx,
                                  tta::ParamSubset subset, double step = 1e-5) {
    auto analytic = tta::eval_objective(kind, model, x, ctx, subset).grad;
    auto pv = model.collect_params(subset);

    tta::Tensor<double> frozen_target;
    if (kind == tta::ObjectiveKind::con) frozen_target = tta::consistency_target(model, x);
    auto value_at_current_params = [&]() {
        tta::TapeScope<double> no_grad(nullptr);
        if (kind == tta::ObjectiveKind::con)
            return tta::consistency_loss_from_target(model, x, ctx, frozen_target).item();
        return tta::objective_loss(kind, model, x, ctx).item();
    };
    auto central = [&](size_t i, double h) {
        const double keep = pv.values[i];
        pv.values[i] = keep + h;
        model.apply_params(pv);
        const double up = value_at_current_params();
        pv.values[i] = keep - h;
        model.apply_params(pv);
        const double down = value_at_current_params();
        pv.values[i] = keep;
        model.apply_params(pv);
        return (up - down) / (2.0 * h);
    };

    FdCheck result;
    result.total = static_cast<int>(pv.values.size());
    for (size_t i = 0; i < pv.values.size(); ++i) {
        const double fd_h = central(i, step);
        const double fd_h2 = central(i, step / 2.0);
        const double a = analytic.values[i];
        const double scale = std::max({std::fabs(fd_h), std::fabs(fd_h2), std::fabs(a), 1e-8});
        if (std::fabs(fd_h - fd_h2) > std::max(1e-7, 1e-4 * scale)) {
            ++result.skipped;
            continue;
        }
        const double denom = std::max({std::fabs(a), std::fabs(fd_h), 1e-8});
        result.max_rel_err = std::max(result.max_rel_err, std::fabs(a - fd_h) / denom);
    }
    return result;
}

inline double objective_fd_error(tta::ObjectiveKind kind, tta::SegNet<double>& model,
                                 const tta::Tensor<double>& x,
                                 const tta::ObjectiveContext<double>& ctx,
                                 tta::ParamSubset subset, double step = 1e-5) {
    return objective_fd_check(kind, model, x, ctx, subset, step).max_rel_err;
}

// Small double-precision model for oracle suites.
inline tta::SegNetConfig mini_config(uint64_t seed) {
    tta::SegNetConfig cfg;
    cfg.base_width = 4;
    cfg.depth = 2;
    cfg.seed = seed;
    return cfg;
}

}  // namespace tta_test
