#include "tta/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "tta/augment.hpp"
#include "tta/error.hpp"
#include "tta/rng.hpp"

namespace tta {

namespace fs = std::filesystem;

std::vector<DomainSpec> domain_presets() {
    std::vector<DomainSpec> presets(5);
    presets[0].name = "A";
    presets[0].intensity_shift = 0.0;
    presets[0].contrast_scale = 1.0;
    presets[0].noise_sigma = 0.02;
    presets[0].blur_sigma = 0.0;

    presets[1].name = "B";
    presets[1].intensity_shift = 0.10;
    presets[1].contrast_scale = 0.80;
    presets[1].noise_sigma = 0.12;
    presets[1].blur_sigma = 0.6;

    presets[2].name = "C";
    presets[2].intensity_shift = -0.10;
    presets[2].contrast_scale = 0.65;
    presets[2].noise_sigma = 0.18;
    presets[2].blur_sigma = 0.9;

    presets[3].name = "D";
    presets[3].intensity_shift = 0.20;
    presets[3].contrast_scale = 0.50;
    presets[3].noise_sigma = 0.28;
    presets[3].blur_sigma = 1.2;

    presets[4].name = "E";
    presets[4].intensity_shift = -0.05;
    presets[4].contrast_scale = 0.75;
    presets[4].noise_sigma = 0.22;
    presets[4].blur_sigma = 0.4;
    return presets;
}

DomainSpec domain_preset(const std::string& name) {
    for (const auto& p : domain_presets())
        if (p.name == name) return p;
    fail(ErrorCode::config, "unknown domain preset: " + name);
}

namespace {

// Bilinear upsampling of a coarse uniform grid; the grid resolution encodes
// the background smoothness.
void paint_background(std::vector<double>& img, int size, double smoothness, Rng& rng) {
    const int grid = std::max(2, static_cast<int>(std::lround(2.0 + (1.0 - smoothness) * 14.0)));
    std::vector<double> coarse(static_cast<size_t>(grid) * grid);
    for (auto& v : coarse) v = rng.uniform();
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double gy = static_cast<double>(y) / (size - 1) * (grid - 1);
            const double gx = static_cast<double>(x) / (size - 1) * (grid - 1);
            const int y0 = std::min(grid - 2, static_cast<int>(gy));
            const int x0 = std::min(grid - 2, static_cast<int>(gx));
            const double fy = gy - y0, fx = gx - x0;
            const double v =
                coarse[static_cast<size_t>(y0) * grid + x0] * (1 - fy) * (1 - fx) +
                coarse[static_cast<size_t>(y0) * grid + x0 + 1] * (1 - fy) * fx +
                coarse[static_cast<size_t>(y0 + 1) * grid + x0] * fy * (1 - fx) +
                coarse[static_cast<size_t>(y0 + 1) * grid + x0 + 1] * fy * fx;
            img[static_cast<size_t>(y) * size + x] = 0.35 * v;
        }
}

struct Geometry {
    double cx, cy, rx, ry;
    double cup_rx, cup_ry;
};

Geometry draw_geometry(const DomainSpec& spec, int size, Rng& rng) {
    for (int attempt = 0; attempt < 10; ++attempt) {
        Geometry g;
        g.cx = 0.5 + spec.center_jitter * rng.uniform(-1.0, 1.0);
        g.cy = 0.5 + spec.center_jitter * rng.uniform(-1.0, 1.0);
        g.rx = rng.uniform(spec.disc_r_min, spec.disc_r_max);
        g.ry = rng.uniform(spec.disc_r_min, spec.disc_r_max);
        const double ratio = rng.uniform(spec.cup_ratio_min, spec.cup_ratio_max);
        g.cup_rx = ratio * g.rx;
        g.cup_ry = ratio * g.ry;
        const double margin = 0.02;
        if (g.cx - g.rx < margin || g.cx + g.rx > 1.0 - margin) continue;
        if (g.cy - g.ry < margin || g.cy + g.ry > 1.0 - margin) continue;
        if (g.cup_rx * size < 1.5 || g.cup_ry * size < 1.5) continue;
        return g;
    }
    fail(ErrorCode::invalid_argument, "generate_domain: degenerate geometry after 10 draws");
}

}  // namespace

Dataset generate_domain(const DomainSpec& spec, int n, uint64_t seed, int image_size) {
    if (n < 1) fail(ErrorCode::invalid_argument, "generate_domain: n must be >= 1");
    Dataset dataset;
    dataset.spec = spec;
    dataset.seed = seed;
    dataset.image_size = image_size;
    dataset.samples.reserve(static_cast<size_t>(n));

    const int size = image_size;
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        std::vector<double> img(static_cast<size_t>(size) * size);
        paint_background(img, size, spec.bg_smoothness, rng);

        const Geometry g = draw_geometry(spec, size, rng);
        const double disc_val = 0.55 + 0.10 * rng.uniform();
        const double cup_val = 0.80 + 0.15 * rng.uniform();

        SyntheticSample sample;
        sample.domain = spec.name;
        sample.index = i;
        sample.seed = seed;
        sample.image = Tensor<float>::zeros({1, 1, size, size});
        sample.mask = Tensor<float>::zeros({1, 2, size, size});
        float* disc_mask = sample.mask.values().data();
        float* cup_mask = disc_mask + static_cast<int64_t>(size) * size;

        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double px = (x + 0.5) / size, py = (y + 0.5) / size;
                const double ddx = (px - g.cx) / g.rx, ddy = (py - g.cy) / g.ry;
                const size_t at = static_cast<size_t>(y) * size + x;
                if (ddx * ddx + ddy * ddy <= 1.0) {
                    img[at] = disc_val;
                    disc_mask[at] = 1.0f;
                    const double cdx = (px - g.cx) / g.cup_rx, cdy = (py - g.cy) / g.cup_ry;
                    if (cdx * cdx + cdy * cdy <= 1.0) {
                        img[at] = cup_val;
                        cup_mask[at] = 1.0f;
                    }
                }
            }

        // corruption chain, then min-max normalization
        for (auto& v : img) v += spec.intensity_shift;
        for (auto& v : img) v = (v - 0.5) * spec.contrast_scale + 0.5;
        for (auto& v : img) v += spec.noise_sigma * rng.normal();
        if (spec.blur_sigma > 0.0) {
            const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * spec.blur_sigma)));
            detail::gaussian_blur_inplace(img, 1, size, size, 2 * radius + 1, spec.blur_sigma);
        }
        double lo = img[0], hi = img[0];
        for (double v : img) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double span = hi - lo;
        float* out = sample.image.values().data();
        for (size_t k = 0; k < img.size(); ++k)
            out[k] = span > 1e-12 ? static_cast<float>((img[k] - lo) / span) : 0.5f;

        dataset.samples.push_back(std::move(sample));
    }
    return dataset;
}

// ---------------------------------------------------------------------------
// Dataset directory IO

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& s, const std::string& key) {
    try {
        return std::stod(s);
    } catch (...) {
        fail(ErrorCode::format, "manifest: bad numeric value for " + key);
    }
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::io, "save_dataset: cannot create " + dir);

    const int size = dataset.image_size;
    std::ofstream manifest(fs::path(dir) / "manifest.txt", std::ios::trunc);
    if (!manifest) fail(ErrorCode::io, "save_dataset: cannot write manifest in " + dir);
    manifest << "domain=" << dataset.spec.name << "\n";
    manifest << "n=" << dataset.samples.size() << "\n";
    manifest << "seed=" << dataset.seed << "\n";
    manifest << "image_size=" << size << "\n";
    manifest << "intensity_shift=" << format_double(dataset.spec.intensity_shift) << "\n";
    manifest << "contrast_scale=" << format_double(dataset.spec.contrast_scale) << "\n";
    manifest << "noise_sigma=" << format_double(dataset.spec.noise_sigma) << "\n";
    manifest << "blur_sigma=" << format_double(dataset.spec.blur_sigma) << "\n";
    manifest << "disc_r_min=" << format_double(dataset.spec.disc_r_min) << "\n";
    manifest << "disc_r_max=" << format_double(dataset.spec.disc_r_max) << "\n";
    manifest << "cup_ratio_min=" << format_double(dataset.spec.cup_ratio_min) << "\n";
    manifest << "cup_ratio_max=" << format_double(dataset.spec.cup_ratio_max) << "\n";
    manifest << "center_jitter=" << format_double(dataset.spec.center_jitter) << "\n";
    manifest << "bg_smoothness=" << format_double(dataset.spec.bg_smoothness) << "\n";
    manifest << "image_shape=1x" << size << "x" << size << "\n";
    manifest << "mask_shape=2x" << size << "x" << size << "\n";
    manifest << "dtype=f32\n";

    for (size_t i = 0; i < dataset.samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05zu.bin", i);
        std::ofstream out(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::io, "save_dataset: cannot write sample file");
        const auto& img = dataset.samples[i].image.values();
        const auto& msk = dataset.samples[i].mask.values();
        out.write(reinterpret_cast<const char*>(img.data()),
                  static_cast<std::streamsize>(img.size() * sizeof(float)));
        out.write(reinterpret_cast<const char*>(msk.data()),
                  static_cast<std::streamsize>(msk.size() * sizeof(float)));
    }
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) fail(ErrorCode::io, "load_dataset: no manifest in " + dir);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::format, "load_dataset: malformed manifest line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) fail(ErrorCode::format, "load_dataset: manifest missing " + key);
        return it->second;
    };

    Dataset dataset;
    dataset.spec.name = need("domain");
    dataset.seed = static_cast<uint64_t>(std::stoull(need("seed")));
    dataset.image_size = std::stoi(need("image_size"));
    dataset.spec.intensity_shift = parse_double(need("intensity_shift"), "intensity_shift");
    dataset.spec.contrast_scale = parse_double(need("contrast_scale"), "contrast_scale");
    dataset.spec.noise_sigma = parse_double(need("noise_sigma"), "noise_sigma");
    dataset.spec.blur_sigma = parse_double(need("blur_sigma"), "blur_sigma");
    dataset.spec.disc_r_min = parse_double(need("disc_r_min"), "disc_r_min");
    dataset.spec.disc_r_max = parse_double(need("disc_r_max"), "disc_r_max");
    dataset.spec.cup_ratio_min = parse_double(need("cup_ratio_min"), "cup_ratio_min");
    dataset.spec.cup_ratio_max = parse_double(need("cup_ratio_max"), "cup_ratio_max");
    dataset.spec.center_jitter = parse_double(need("center_jitter"), "center_jitter");
    dataset.spec.bg_smoothness = parse_double(need("bg_smoothness"), "bg_smoothness");

    const int n = std::stoi(need("n"));
    const int size = dataset.image_size;
    const size_t img_count = static_cast<size_t>(size) * size;
    const size_t msk_count = 2 * img_count;
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05d.bin", i);
        std::ifstream in(fs::path(dir) / name, std::ios::binary);
        if (!in) fail(ErrorCode::io, std::string("load_dataset: missing ") + name);
        SyntheticSample sample;
        sample.domain = dataset.spec.name;
        sample.index = i;
        sample.seed = dataset.seed;
        sample.image = Tensor<float>::zeros({1, 1, size, size});
        sample.mask = Tensor<float>::zeros({1, 2, size, size});
        in.read(reinterpret_cast<char*>(sample.image.values().data()),
                static_cast<std::streamsize>(img_count * sizeof(float)));
        in.read(reinterpret_cast<char*>(sample.mask.values().data()),
                static_cast<std::streamsize>(msk_count * sizeof(float)));
        if (!in) fail(ErrorCode::format, std::string("load_dataset: truncated ") + name);
        dataset.samples.push_back(std::move(sample));
    }
    return dataset;
}

}  // namespace tta
