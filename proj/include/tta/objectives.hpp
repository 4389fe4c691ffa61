#pragma once

// The self-supervised objectives used for test-time adaptation plus the
// supervised cross-entropy oracle used only by diagnostics. Every objective
// is a deterministic function of (model state, input, context): stochastic
// ingredients (strong augmentation, rotation class, denoising field) draw
// from streams derived from the context seed, so repeated evaluations with
// the same context see identical draws.

#include <cstdint>
#include <string>

#include "tta/augment.hpp"
#include "tta/error.hpp"
#include "tta/nn.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

enum class ObjectiveKind { con, ent, rec, rot, sup_res, den, sup_ce };

inline const char* objective_name(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::con: return "con";
        case ObjectiveKind::ent: return "ent";
        case ObjectiveKind::rec: return "rec";
        case ObjectiveKind::rot: return "rot";
        case ObjectiveKind::sup_res: return "sup_res";
        case ObjectiveKind::den: return "den";
        case ObjectiveKind::sup_ce: return "sup_ce";
    }
    return "?";
}

inline ObjectiveKind parse_objective(const std::string& s) {
    if (s == "con") return ObjectiveKind::con;
    if (s == "ent") return ObjectiveKind::ent;
    if (s == "rec") return ObjectiveKind::rec;
    if (s == "rot") return ObjectiveKind::rot;
    if (s == "sup_res") return ObjectiveKind::sup_res;
    if (s == "den") return ObjectiveKind::den;
    if (s == "sup_ce") return ObjectiveKind::sup_ce;
    fail(ErrorCode::config, "unknown objective: " + s);
}

// Stream salts for the stochastic ingredients.
inline constexpr uint64_t kSaltStrongAug = 0x73747230ULL;
inline constexpr uint64_t kSaltRotation = 0x726f7430ULL;
inline constexpr uint64_t kSaltDenoise = 0x64656e30ULL;

template <typename S>
struct ObjectiveContext {
    // derive_seed(run_seed, image_index) by convention
    uint64_t seed = 0;
    AugmentationSpec aug;
    double denoise_sigma = 0.05;
    S eps_prob = static_cast<S>(1e-6);
    // ground-truth mask, required by sup_ce only
    const Tensor<S>* gt_mask = nullptr;
};

template <typename S>
Tensor<S> strong_variant(const Tensor<S>& x, const ObjectiveContext<S>& ctx) {
    Rng rng(derive_seed(ctx.seed, kSaltStrongAug));
    return strong_variant_with_rng(x, ctx.aug, rng);
}

namespace detail {

template <typename S>
Tensor<S> bce_mean(const Tensor<S>& pred, const Tensor<S>& target, S eps) {
    auto p = clamp(pred, eps, S(1) - eps);
    auto one = Tensor<S>::scalar(S(1));
    auto loss = add(mul(target, safe_log(p)),
                    mul(sub(one, target), safe_log(sub(one, p))));
    return scale(mean(loss), S(-1));
}

template <typename S>
Tensor<S> mse_mean(const Tensor<S>& a, const Tensor<S>& b) {
    auto d = sub(a, b);
    return mean(mul(d, d));
}

}  // namespace detail

// Mean over channels and pixels of -P log(max(P, eps)) on the plain input.
template <typename S>
Tensor<S> entropy_loss(SegNet<S>& model, const Tensor<S>& x, const ObjectiveContext<S>& ctx) {
    Tensor<S> p = model.forward_seg(x, BnMode::train);
    auto logp = safe_log(clamp(p, ctx.eps_prob, S(1)));
    return scale(mean(mul(p, logp)), S(-1));
}

// Mean of the six weak-augmented predictions, each mapped back to the
// original frame by the inverse spatial transform. Computed without a tape:
// the target is a stop-gradient.
template <typename S>
Tensor<S> consistency_target(SegNet<S>& model, const Tensor<S>& x) {
    TapeScope<S> no_grad(nullptr);
    Tensor<S> target;
    bool first = true;
    for (SpatialTransform t : weak_transform_set()) {
        Tensor<S> pred = model.forward_seg(spatial_transform(x, t), BnMode::train);
        Tensor<S> back = spatial_transform(pred, inverse(t));
        target = first ? back : add(target, back);
        first = false;
    }
    return scale(target, S(1) / S(6));
}

template <typename S>
Tensor<S> consistency_loss_from_target(SegNet<S>& model, const Tensor<S>& x,
                                       const ObjectiveContext<S>& ctx,
                                       const Tensor<S>& target) {
    Tensor<S> strong_pred = model.forward_seg(strong_variant(x, ctx), BnMode::train);
    return detail::bce_mean(strong_pred, target, ctx.eps_prob);
}

// Cross-entropy between the strong-augmented prediction and the weak-variant
// target; gradients flow only through the strong branch.
template <typename S>
Tensor<S> consistency_loss(SegNet<S>& model, const Tensor<S>& x,
                           const ObjectiveContext<S>& ctx) {
    return consistency_loss_from_target(model, x, ctx, consistency_target(model, x));
}

template <typename S>
Tensor<S> reconstruction_loss(SegNet<S>& model, const Tensor<S>& x,
                              const ObjectiveContext<S>& ctx) {
    (void)ctx;
    Tensor<S> y = model.forward_aux(x, AuxHead::reconstruction, BnMode::train);
    return detail::mse_mean(y, x);
}

// Rotate the input by 90k degrees (k drawn from the context stream) and
// classify k from the rotation head with a softmax cross-entropy.
template <typename S>
Tensor<S> rotation_loss(SegNet<S>& model, const Tensor<S>& x, const ObjectiveContext<S>& ctx) {
    Rng rng(derive_seed(ctx.seed, kSaltRotation));
    const int k = static_cast<int>(rng.uniform_int(4));
    static const SpatialTransform rots[4] = {SpatialTransform::identity, SpatialTransform::rot90,
                                             SpatialTransform::rot180, SpatialTransform::rot270};
    Tensor<S> xr = spatial_transform(x, rots[k]);
    Tensor<S> logits = model.forward_aux(xr, AuxHead::rotation4, BnMode::train);

    // log-sum-exp with a constant max shift; the gradient is exact
    S max_logit = logits.values()[0];
    for (S v : logits.values()) max_logit = std::max(max_logit, v);
    auto shifted = sub(logits, Tensor<S>::scalar(max_logit));
    auto lse = add(safe_log(sum(tta::exp(shifted))), Tensor<S>::scalar(max_logit));
    return sub(lse, take(logits, k));
}

template <typename S>
Tensor<S> superres_loss(SegNet<S>& model, const Tensor<S>& x, const ObjectiveContext<S>& ctx) {
    (void)ctx;
    Tensor<S> y = model.forward_aux(x, AuxHead::superres, BnMode::train);
    return detail::mse_mean(y, x);
}

// Additive Gaussian noise (standard normal scaled by ctx.denoise_sigma) is
// applied to the input; the reconstruction head must recover the clean image.
template <typename S>
Tensor<S> denoise_loss(SegNet<S>& model, const Tensor<S>& x, const ObjectiveContext<S>& ctx) {
    Rng rng(derive_seed(ctx.seed, kSaltDenoise));
    Tensor<S> noisy = x.clone_detached();
    for (auto& v : noisy.values())
        v = static_cast<S>(v + ctx.denoise_sigma * rng.normal());
    detail::clamp01_inplace(noisy.values());
    Tensor<S> y = model.forward_aux(noisy, AuxHead::reconstruction, BnMode::train);
    return detail::mse_mean(y, x);
}

template <typename S>
Tensor<S> supervised_ce_loss(SegNet<S>& model, const Tensor<S>& x,
                             const ObjectiveContext<S>& ctx) {
    if (!ctx.gt_mask)
        fail(ErrorCode::invalid_argument, "supervised_ce_loss: no ground-truth mask in context");
    Tensor<S> p = model.forward_seg(x, BnMode::train);
    if (p.shape() != ctx.gt_mask->shape())
        fail(ErrorCode::shape_mismatch, "supervised_ce_loss: mask shape mismatch");
    return detail::bce_mean(p, *ctx.gt_mask, ctx.eps_prob);
}

template <typename S>
Tensor<S> objective_loss(ObjectiveKind kind, SegNet<S>& model, const Tensor<S>& x,
                         const ObjectiveContext<S>& ctx) {
    switch (kind) {
        case ObjectiveKind::con: return consistency_loss(model, x, ctx);
        case ObjectiveKind::ent: return entropy_loss(model, x, ctx);
        case ObjectiveKind::rec: return reconstruction_loss(model, x, ctx);
        case ObjectiveKind::rot: return rotation_loss(model, x, ctx);
        case ObjectiveKind::sup_res: return superres_loss(model, x, ctx);
        case ObjectiveKind::den: return denoise_loss(model, x, ctx);
        case ObjectiveKind::sup_ce: return supervised_ce_loss(model, x, ctx);
    }
    fail(ErrorCode::invalid_argument, "objective_loss: unknown kind");
}

template <typename S>
struct ObjectiveResult {
    double loss = 0.0;
    ParamVector<S> grad;
};

// Zeroes grads, evaluates the named loss under a fresh tape, back-propagates
// and returns (loss, gradient restricted to the subset). Parameter values are
// never modified.
template <typename S>
ObjectiveResult<S> eval_objective(ObjectiveKind kind, SegNet<S>& model, const Tensor<S>& x,
                                  const ObjectiveContext<S>& ctx, ParamSubset subset) {
    model.set_trainable(subset);
    model.zero_grads();
    Tape<S> tape;
    Tensor<S> loss;
    {
        TapeScope<S> scope(&tape);
        loss = objective_loss(kind, model, x, ctx);
        tape.backward(loss);
    }
    ObjectiveResult<S> result;
    result.loss = static_cast<double>(loss.item());
    result.grad = model.collect_grads(subset);
    return result;
}

}  // namespace tta
