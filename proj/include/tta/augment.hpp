#pragma once

// Weak augmentations are the six invertible spatial transforms; the strong
// augmentation chain is photometric: brightness -> contrast -> gamma ->
// Gaussian noise -> Gaussian blur, clamped to [0,1] after each step.

#include <array>
#include <cmath>
#include <vector>

#include "tta/error.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

struct AugmentationSpec {
    double brightness_shift_min = -0.2;
    double brightness_shift_max = 0.2;
    double contrast_scale_min = 0.8;
    double contrast_scale_max = 1.2;
    double gamma_min = 0.7;
    double gamma_max = 1.5;
    double noise_sigma = 0.05;
    int blur_kernel = 3;
    double blur_sigma_min = 0.25;
    double blur_sigma_max = 1.0;
};

// Fixed order; the first element is the identity.
inline const std::array<SpatialTransform, 6>& weak_transform_set() {
    static const std::array<SpatialTransform, 6> set = {
        SpatialTransform::identity, SpatialTransform::hflip,  SpatialTransform::vflip,
        SpatialTransform::rot90,    SpatialTransform::rot180, SpatialTransform::rot270,
    };
    return set;
}

template <typename S>
std::vector<Tensor<S>> weak_variants(const Tensor<S>& x) {
    std::vector<Tensor<S>> out;
    out.reserve(6);
    for (SpatialTransform t : weak_transform_set()) out.push_back(spatial_transform(x, t));
    return out;
}

namespace detail {

template <typename S>
void clamp01_inplace(std::vector<S>& v) {
    for (auto& e : v) e = e < S(0) ? S(0) : (e > S(1) ? S(1) : e);
}

// Separable Gaussian blur with replicate borders, value-level (no tape).
template <typename S>
void gaussian_blur_inplace(std::vector<S>& v, int planes, int H, int W, int kernel,
                           double sigma) {
    const int r = kernel / 2;
    std::vector<double> k(static_cast<size_t>(kernel));
    double norm = 0.0;
    for (int i = 0; i < kernel; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
        norm += k[static_cast<size_t>(i)];
    }
    for (auto& e : k) e /= norm;

    std::vector<S> tmp(static_cast<size_t>(H) * W);
    for (int p = 0; p < planes; ++p) {
        S* plane = v.data() + static_cast<int64_t>(p) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) {
                    int sx = std::min(std::max(x + i, 0), W - 1);
                    acc += k[static_cast<size_t>(i + r)] * static_cast<double>(plane[y * W + sx]);
                }
                tmp[static_cast<size_t>(y) * W + x] = static_cast<S>(acc);
            }
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) {
                    int sy = std::min(std::max(y + i, 0), H - 1);
                    acc += k[static_cast<size_t>(i + r)] *
                           static_cast<double>(tmp[static_cast<size_t>(sy) * W + x]);
                }
                plane[y * W + x] = static_cast<S>(acc);
            }
    }
}

}  // namespace detail

// Draw order is fixed: brightness shift, contrast scale, gamma, the per-pixel
// noise field, blur sigma. The blur step is skipped when the kernel is < 3 or
// the sigma range collapses to zero.
template <typename S>
Tensor<S> strong_variant_with_rng(const Tensor<S>& x, const AugmentationSpec& spec, Rng& rng) {
    const auto& shape = x.shape();
    if (shape.size() < 2) fail(ErrorCode::shape_mismatch, "strong_variant: rank must be >= 2");
    const int H = shape[shape.size() - 2], W = shape[shape.size() - 1];
    const int planes = static_cast<int>(x.numel() / (static_cast<int64_t>(H) * W));

    Tensor<S> out = x.clone_detached();
    auto& v = out.values();

    const double shift = rng.uniform(spec.brightness_shift_min, spec.brightness_shift_max);
    for (auto& e : v) e = static_cast<S>(e + shift);
    detail::clamp01_inplace(v);

    // centred at 0.5 as c*x + 0.5*(1-c); exact identity at c = 1
    const double c = rng.uniform(spec.contrast_scale_min, spec.contrast_scale_max);
    const double off = 0.5 * (1.0 - c);
    for (auto& e : v) e = static_cast<S>(c * static_cast<double>(e) + off);
    detail::clamp01_inplace(v);

    const double gamma = rng.uniform(spec.gamma_min, spec.gamma_max);
    for (auto& e : v) e = static_cast<S>(std::pow(static_cast<double>(e), gamma));
    detail::clamp01_inplace(v);

    for (auto& e : v) e = static_cast<S>(e + spec.noise_sigma * rng.normal());
    detail::clamp01_inplace(v);

    const double blur_sigma = rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max);
    if (spec.blur_kernel >= 3 && blur_sigma > 0.0) {
        detail::gaussian_blur_inplace(v, planes, H, W, spec.blur_kernel, blur_sigma);
        detail::clamp01_inplace(v);
    }
    return out;
}

}  // namespace tta
