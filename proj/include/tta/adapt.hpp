#pragma once

// The gradient-aligned adaptation step. Per test image: evaluate the
// auxiliary objective at theta, take one first-order lookahead step along its
// gradient, evaluate the pseudo objective at the shifted parameters, set the
// learning rate from the cosine similarity of the two gradients, and apply
// the pseudo gradient at the original theta. Nothing differentiates through
// the inner step: the update is strictly first-order.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tta/error.hpp"
#include "tta/nn.hpp"
#include "tta/objectives.hpp"
#include "tta/tensor.hpp"

namespace tta {

enum class LrActivation { cus, linear, sigmoid, relu, softplus };
enum class OptimizerKind { adam, sgd };

inline const char* lr_activation_name(LrActivation a) {
    switch (a) {
        case LrActivation::cus: return "cus";
        case LrActivation::linear: return "linear";
        case LrActivation::sigmoid: return "sigmoid";
        case LrActivation::relu: return "relu";
        case LrActivation::softplus: return "softplus";
    }
    return "?";
}

inline LrActivation parse_lr_activation(const std::string& s) {
    if (s == "cus") return LrActivation::cus;
    if (s == "linear") return LrActivation::linear;
    if (s == "sigmoid") return LrActivation::sigmoid;
    if (s == "relu") return LrActivation::relu;
    if (s == "softplus") return LrActivation::softplus;
    fail(ErrorCode::config, "unknown activation: " + s);
}

struct AdaptConfig {
    double beta = 1e-4;  // scaling factor for the dynamic learning rate
    LrActivation activation = LrActivation::cus;
    double alpha_inner = 1.0;  // coefficient of the lookahead step
    ObjectiveKind pseudo = ObjectiveKind::con;
    ObjectiveKind aux = ObjectiveKind::ent;
    ParamSubset subset = ParamSubset::affine;
    OptimizerKind optimizer = OptimizerKind::adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    bool continual = true;
    bool dynamic_lr_enabled = true;  // false: eta = beta
    uint64_t seed = 0;

    void validate() const {
        if (pseudo == aux)
            fail(ErrorCode::config, "adaptation: pseudo and aux objectives must differ");
        if (pseudo == ObjectiveKind::sup_ce || aux == ObjectiveKind::sup_ce)
            fail(ErrorCode::config,
                 "adaptation: sup_ce is a diagnostic oracle, not an adaptation objective");
        if (beta < 0.0) fail(ErrorCode::config, "adaptation: beta must be non-negative");
        if (alpha_inner < 0.0) fail(ErrorCode::config, "adaptation: alpha_inner must be >= 0");
    }
};

// Adam moments over the trained subset; persists across a test stream.
template <typename S>
struct OptState {
    std::vector<S> m, v;
    int64_t step = 0;

    void reset(int64_t length) {
        m.assign(static_cast<size_t>(length), S(0));
        v.assign(static_cast<size_t>(length), S(0));
        step = 0;
    }
};

struct StepRecord {
    int image_index = -1;
    double loss_aux = 0.0;
    double loss_pseudo = 0.0;
    double cosine = 0.0;
    double eta = 0.0;
    double grad_norm_aux = 0.0;
    double grad_norm_pseudo = 0.0;
    double dice_after = 0.0;
    double wall_time = 0.0;
    bool skipped = false;
};

// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
bool vec_finite(const std::vector<S>& v) {
    return all_finite(v);
}

template <typename S>
double dot_d(const std::vector<S>& a, const std::vector<S>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

}  // namespace detail

template <typename S>
double grad_norm(const ParamVector<S>& g) {
    return std::sqrt(detail::dot_d(g.values, g.values));
}

// theta' = theta - alpha * grad_aux; pure, theta untouched. alpha = 0 returns
// theta exactly.
template <typename S>
ParamVector<S> inner_step(const ParamVector<S>& theta, const ParamVector<S>& grad_aux,
                          double alpha) {
    if (theta.size() != grad_aux.size())
        fail(ErrorCode::shape_mismatch, "inner_step: length mismatch");
    ParamVector<S> shifted = theta;
    if (alpha == 0.0) return shifted;
    for (size_t i = 0; i < shifted.values.size(); ++i)
        shifted.values[i] =
            static_cast<S>(shifted.values[i] - static_cast<S>(alpha) * grad_aux.values[i]);
    return shifted;
}

// <g1,g2> / (|g1||g2|), clamped to [-1,1]; zero when either norm is below
// 1e-12 (no directional information).
template <typename S>
double cosine_similarity(const ParamVector<S>& g1, const ParamVector<S>& g2) {
    if (g1.size() != g2.size())
        fail(ErrorCode::shape_mismatch, "cosine_similarity: length mismatch");
    if (g1.subset != g2.subset)
        fail(ErrorCode::invalid_argument, "cosine_similarity: subset mismatch");
    const double n1 = grad_norm(g1);
    const double n2 = grad_norm(g2);
    if (n1 < 1e-12 || n2 < 1e-12) return 0.0;
    double cos = detail::dot_d(g1.values, g2.values) / (n1 * n2);
    return std::min(1.0, std::max(-1.0, cos));
}

inline double lr_activation(LrActivation kind, double x) {
    switch (kind) {
        case LrActivation::cus: return 0.25 * (x + 1.0) * (x + 1.0);
        case LrActivation::linear: return 0.5 * (x + 1.0);
        case LrActivation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case LrActivation::relu: return std::max(0.0, x);
        case LrActivation::softplus: return std::log1p(std::exp(x));
    }
    fail(ErrorCode::invalid_argument, "lr_activation: unknown kind");
}

inline double dynamic_lr(double cos, double beta, LrActivation kind) {
    return beta * lr_activation(kind, cos);
}

// ---------------------------------------------------------------------------
// Parameter updates. Both routes share these helpers so degenerate
// configurations are bit-identical across code paths.

namespace detail {

template <typename S>
void sgd_update(std::vector<S>& theta, const std::vector<S>& g, double eta) {
    if (eta == 0.0) return;
    const S e = static_cast<S>(eta);
    for (size_t i = 0; i < theta.size(); ++i)
        theta[i] = static_cast<S>(theta[i] - e * g[i]);
}

template <typename S>
void adam_update(std::vector<S>& theta, const std::vector<S>& g, double eta,
                 OptState<S>& state, const AdaptConfig& config) {
    if (state.m.size() != theta.size()) state.reset(static_cast<int64_t>(theta.size()));
    state.step += 1;
    const S b1 = static_cast<S>(config.adam_beta1);
    const S b2 = static_cast<S>(config.adam_beta2);
    const double corr1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(state.step));
    const double corr2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(state.step));
    const S eps = static_cast<S>(config.adam_eps);
    for (size_t i = 0; i < theta.size(); ++i) {
        state.m[i] = b1 * state.m[i] + (S(1) - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (S(1) - b2) * g[i] * g[i];
        if (eta == 0.0) continue;
        const S mhat = static_cast<S>(state.m[i] / corr1);
        const S vhat = static_cast<S>(state.v[i] / corr2);
        theta[i] = static_cast<S>(theta[i] -
                                  static_cast<S>(eta) * mhat / (std::sqrt(vhat) + eps));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Steps

// Fixed-rate single-objective fine-tuning step (the no-alignment baseline).
// Deliberately independent of grata_step so the two routes can be compared.
template <typename S>
StepRecord plain_step(SegNet<S>& model, const Tensor<S>& x, ObjectiveKind objective, double lr,
                      OptimizerKind optimizer, OptState<S>& opt_state,
                      const ObjectiveContext<S>& ctx, ParamSubset subset,
                      const AdaptConfig& adam_hp = AdaptConfig{}) {
    StepRecord record;
    const auto start = std::chrono::steady_clock::now();
    ParamVector<S> theta = model.collect_params(subset);
    try {
        auto res = eval_objective(objective, model, x, ctx, subset);
        record.loss_pseudo = res.loss;
        record.grad_norm_pseudo = grad_norm(res.grad);
        record.eta = lr;
        ParamVector<S> updated = theta;
        OptState<S> staged = opt_state;
        if (optimizer == OptimizerKind::sgd)
            detail::sgd_update(updated.values, res.grad.values, lr);
        else
            detail::adam_update(updated.values, res.grad.values, lr, staged, adam_hp);
        if (!std::isfinite(res.loss) || !detail::vec_finite(res.grad.values) ||
            !detail::vec_finite(updated.values))
            fail(ErrorCode::non_finite, "plain_step: non-finite step");
        opt_state = std::move(staged);
        model.apply_params(updated);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::non_finite) throw;
        model.apply_params(theta);
        record.skipped = true;
    }
    record.wall_time = std::chrono::duration<double>(
        std::chrono::steady_clock::now() - start).count();
    return record;
}

// Optional per-step diagnostic: cosine of the pseudo gradient (at the
// shifted and at the original parameters) against the supervised gradient.
// Filling it requires ctx.gt_mask.
struct StepDiag {
    double cos_pse_shifted_sup = 0.0;
    double cos_pse_theta_sup = 0.0;
};

// One gradient-aligned adaptation step; mutates only the configured subset
// (and opt_state). A step that produces NaN/Inf anywhere is skipped: theta is
// retained and the record flagged.
template <typename S>
StepRecord grata_step(SegNet<S>& model, const Tensor<S>& x, const AdaptConfig& config,
                      OptState<S>& opt_state, const ObjectiveContext<S>& ctx,
                      StepDiag* diag = nullptr) {
    StepRecord record;
    const auto start = std::chrono::steady_clock::now();
    ParamVector<S> theta = model.collect_params(config.subset);
    try {
        auto aux = eval_objective(config.aux, model, x, ctx, config.subset);
        record.loss_aux = aux.loss;
        record.grad_norm_aux = grad_norm(aux.grad);

        ParamVector<S> shifted = inner_step(theta, aux.grad, config.alpha_inner);
        model.apply_params(shifted);
        auto pseudo = eval_objective(config.pseudo, model, x, ctx, config.subset);
        record.loss_pseudo = pseudo.loss;
        record.grad_norm_pseudo = grad_norm(pseudo.grad);

        record.cosine = cosine_similarity(pseudo.grad, aux.grad);
        record.eta = config.dynamic_lr_enabled
                         ? dynamic_lr(record.cosine, config.beta, config.activation)
                         : config.beta;

        model.apply_params(theta);
        if (diag) {
            auto pse_base = eval_objective(config.pseudo, model, x, ctx, config.subset);
            auto sup = eval_objective(ObjectiveKind::sup_ce, model, x, ctx, config.subset);
            diag->cos_pse_shifted_sup = cosine_similarity(pseudo.grad, sup.grad);
            diag->cos_pse_theta_sup = cosine_similarity(pse_base.grad, sup.grad);
        }
        ParamVector<S> updated = theta;
        OptState<S> staged = opt_state;
        if (config.optimizer == OptimizerKind::sgd)
            detail::sgd_update(updated.values, pseudo.grad.values, record.eta);
        else
            detail::adam_update(updated.values, pseudo.grad.values, record.eta, staged, config);

        if (!std::isfinite(record.loss_aux) || !std::isfinite(record.loss_pseudo) ||
            !std::isfinite(record.cosine) || !std::isfinite(record.eta) ||
            !detail::vec_finite(aux.grad.values) || !detail::vec_finite(pseudo.grad.values) ||
            !detail::vec_finite(updated.values))
            fail(ErrorCode::non_finite, "grata_step: non-finite step");

        opt_state = std::move(staged);
        model.apply_params(updated);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::non_finite) throw;
        model.apply_params(theta);
        record.skipped = true;
    }
    record.wall_time = std::chrono::duration<double>(
        std::chrono::steady_clock::now() - start).count();
    return record;
}

// ---------------------------------------------------------------------------
// Taylor remainder diagnostic: |L_pse(theta - a*g_aux) - [L_pse(theta) -
// a*<grad L_pse(theta), g_aux>]|, the term the first-order rewrite drops.

// Generic form over closures; used directly by tests with hand-built models.
template <typename S, typename LossGrad, typename LossOnly>
double taylor_residual_generic(const ParamVector<S>& theta, const ParamVector<S>& grad_aux,
                               double alpha, LossGrad pseudo_loss_grad,
                               LossOnly pseudo_loss_at) {
    auto [l0, g0] = pseudo_loss_grad(theta);
    ParamVector<S> shifted = inner_step(theta, grad_aux, alpha);
    const double l1 = pseudo_loss_at(shifted);
    const double linear = l0 - alpha * detail::dot_d(g0.values, grad_aux.values);
    if (!std::isfinite(l1) || !std::isfinite(linear))
        fail(ErrorCode::non_finite, "taylor_residual: non-finite evaluation");
    return std::fabs(l1 - linear);
}

// The consistency objective carries a stop-gradient target; the expansion is
// therefore taken of the fixed-target function (the one whose gradient the
// implementation computes), with the target held at the base parameters.
template <typename S>
double taylor_residual(SegNet<S>& model, const Tensor<S>& x, const AdaptConfig& config,
                       double alpha, const ObjectiveContext<S>& ctx) {
    ParamVector<S> theta = model.collect_params(config.subset);
    auto aux = eval_objective(config.aux, model, x, ctx, config.subset);

    Tensor<S> frozen_target;
    if (config.pseudo == ObjectiveKind::con) {
        model.apply_params(theta);
        frozen_target = consistency_target(model, x);
    }
    auto pseudo_at = [&](SegNet<S>& m) {
        if (config.pseudo == ObjectiveKind::con)
            return consistency_loss_from_target(m, x, ctx, frozen_target);
        return objective_loss(config.pseudo, m, x, ctx);
    };

    auto loss_grad = [&](const ParamVector<S>& p) {
        model.apply_params(p);
        model.set_trainable(config.subset);
        model.zero_grads();
        Tape<S> tape;
        Tensor<S> loss;
        {
            TapeScope<S> scope(&tape);
            loss = pseudo_at(model);
            tape.backward(loss);
        }
        return std::pair<double, ParamVector<S>>(static_cast<double>(loss.item()),
                                                 model.collect_grads(config.subset));
    };
    auto loss_only = [&](const ParamVector<S>& p) {
        model.apply_params(p);
        TapeScope<S> no_grad(nullptr);
        return static_cast<double>(pseudo_at(model).item());
    };
    const double r = taylor_residual_generic(theta, aux.grad, alpha, loss_grad, loss_only);
    model.apply_params(theta);
    return r;
}

}  // namespace tta
