#pragma once

// Synthetic five-domain benchmark data: smooth random background, a bright
// disc ellipse with a brighter concentric cup ellipse, then a per-domain
// corruption chain (intensity shift, contrast scale, Gaussian noise, Gaussian
// blur) and min-max normalization to [0,1].

#include <cstdint>
#include <string>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

struct DomainSpec {
    std::string name = "A";
    double intensity_shift = 0.0;
    double contrast_scale = 1.0;
    double noise_sigma = 0.02;
    double blur_sigma = 0.0;
    // geometry priors, fractions of the image size
    double disc_r_min = 0.20;
    double disc_r_max = 0.35;
    double cup_ratio_min = 0.3;
    double cup_ratio_max = 0.7;
    double center_jitter = 0.08;
    // 1 = very smooth background texture, 0 = high-frequency
    double bg_smoothness = 0.6;
};

// The five committed presets. A is mild, D is the strongest corruption; every
// pair differs in at least two corruption parameters.
std::vector<DomainSpec> domain_presets();
DomainSpec domain_preset(const std::string& name);

struct SyntheticSample {
    Tensor<float> image;  // 1 x 1 x size x size, values in [0,1]
    Tensor<float> mask;   // 1 x 2 x size x size, channel 0 disc, channel 1 cup
    std::string domain;
    int index = 0;
    uint64_t seed = 0;
};

struct Dataset {
    DomainSpec spec;
    uint64_t seed = 0;
    int image_size = 64;
    std::vector<SyntheticSample> samples;
};

// Deterministic in (spec, n, seed). Throws after 10 degenerate geometry draws
// for a single sample.
Dataset generate_domain(const DomainSpec& spec, int n, uint64_t seed, int image_size = 64);

// Directory layout: manifest.txt (key=value) plus one raw little-endian f32
// file per sample holding the image followed by the mask.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace tta
