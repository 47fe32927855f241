#include "mdan/synthetic.hpp"

#include <cmath>
#include <random>

#include "mdan/errors.hpp"

namespace mdan {

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

// Base color per level-1 class: two classes get a warm/cool pair, more
// classes walk a simple hue wheel.
std::array<double, 3> base_color(std::size_t index, std::size_t count) {
    if (count <= 2) {
        return index == 0 ? std::array<double, 3>{0.85, 0.45, 0.15}
                          : std::array<double, 3>{0.15, 0.45, 0.85};
    }
    const double hue = static_cast<double>(index) / static_cast<double>(count);
    const double r = 0.5 + 0.45 * std::cos(2.0 * kPi * hue);
    const double g = 0.5 + 0.45 * std::cos(2.0 * kPi * (hue - 1.0 / 3.0));
    const double b = 0.5 + 0.45 * std::cos(2.0 * kPi * (hue - 2.0 / 3.0));
    return {r, g, b};
}

// Texture value in [0,1] at pixel (y,x).
double pattern_value(std::size_t pattern, std::size_t variant, double y, double x, double h,
                     double w, double phase, std::mt19937_64& noise_rng) {
    const double freq = 3.0 + 1.5 * static_cast<double>(variant);
    switch (pattern % 6) {
        case 0:  // horizontal stripes
            return 0.5 + 0.5 * std::sin(2.0 * kPi * freq * y / h + phase);
        case 1: {  // checkerboard
            const double cell = h / (4.0 + 2.0 * static_cast<double>(variant));
            const long cx = static_cast<long>(std::floor(x / cell));
            const long cy = static_cast<long>(std::floor(y / cell));
            return ((cx + cy) % 2 == 0) ? 1.0 : 0.0;
        }
        case 2: {  // dot grid
            const double cell = h / (4.0 + static_cast<double>(variant));
            const double dx = std::fmod(x, cell) - cell / 2.0;
            const double dy = std::fmod(y, cell) - cell / 2.0;
            return (dx * dx + dy * dy) < (cell * cell / 9.0) ? 1.0 : 0.0;
        }
        case 3: {  // linear gradient, orientation by variant
            return (variant % 2 == 0) ? x / w : y / h;
        }
        case 4:  // white noise
            return uniform01(noise_rng);
        default: {  // concentric rings
            const double cy = y - h / 2.0, cx = x - w / 2.0;
            const double r = std::sqrt(cx * cx + cy * cy) / (h / 2.0);
            return 0.5 + 0.5 * std::sin(2.0 * kPi * freq * r + phase);
        }
    }
}

double quantize(double v) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    return std::round(clamped * 255.0) / 255.0;
}

}  // namespace

std::vector<Sample> generate_dataset(const SyntheticSpec& spec,
                                     const EmotionHierarchy& hierarchy) {
    if (spec.image_h == 0 || spec.image_w == 0 || spec.samples_per_class == 0) {
        throw ConfigError("synthetic spec: extents and samples per class must be positive");
    }
    const int depth = hierarchy.depth();
    if (depth > 3) throw ConfigError("synthetic rules cover hierarchies of depth 1..3");

    const std::size_t h = spec.image_h, w = spec.image_w;
    const std::size_t leaves = hierarchy.level_size(depth);
    std::vector<Sample> samples;
    samples.reserve(leaves * spec.samples_per_class);

    for (std::size_t leaf = 0; leaf < leaves; ++leaf) {
        const LabelPath path = hierarchy.leaf_to_path(leaf);
        const std::size_t coarse = path.at(1);
        // Pattern from the position among the level-2 siblings, variant from
        // the position among level-3 siblings.
        std::size_t pattern = 0, variant = 0;
        if (depth >= 2) {
            const auto& siblings = hierarchy.children_of(1, coarse);
            for (std::size_t i = 0; i < siblings.size(); ++i)
                if (siblings[i] == path.at(2)) pattern = i;
        }
        if (depth >= 3) {
            const auto& siblings = hierarchy.children_of(2, path.at(2));
            for (std::size_t i = 0; i < siblings.size(); ++i)
                if (siblings[i] == path.at(3)) variant = i;
        }
        const std::array<double, 3> base = base_color(coarse, hierarchy.level_size(1));

        for (std::size_t n = 0; n < spec.samples_per_class; ++n) {
            std::mt19937_64 rng(spec.seed ^ (0x9E3779B97F4A7C15ULL * (leaf + 1)) ^
                                (0xBF58476D1CE4E5B9ULL * (n + 1)));
            const double brightness = 0.85 + 0.3 * uniform01(rng);
            const double phase = 2.0 * kPi * uniform01(rng);
            std::vector<double> pixels(3 * h * w);
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const double p =
                        pattern_value(pattern, variant, static_cast<double>(y),
                                      static_cast<double>(x), static_cast<double>(h),
                                      static_cast<double>(w), phase, rng);
                    const double shade = 0.35 + 0.65 * p;
                    for (std::size_t c = 0; c < 3; ++c) {
                        const double noise = 0.04 * (uniform01(rng) - 0.5);
                        pixels[c * h * w + y * w + x] =
                            quantize(base[c] * brightness * shade + noise);
                    }
                }
            }
            samples.push_back({Tensor({3, h, w}, std::move(pixels)), path});
        }
    }
    return samples;
}

ChannelStats compute_channel_stats(const std::vector<Sample>& samples) {
    if (samples.empty()) throw ContractError("compute_channel_stats: empty dataset");
    ChannelStats stats;
    const std::size_t plane = samples[0].image.size() / 3;
    std::array<double, 3> sum = {0, 0, 0}, sumsq = {0, 0, 0};
    for (const auto& s : samples) {
        const double* d = s.image.values().data();
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < plane; ++i) {
                const double v = d[c * plane + i];
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
    }
    const double n = static_cast<double>(samples.size() * plane);
    for (std::size_t c = 0; c < 3; ++c) {
        stats.mean[c] = sum[c] / n;
        const double var = sumsq[c] / n - stats.mean[c] * stats.mean[c];
        stats.stddev[c] = std::sqrt(std::max(var, 1e-12));
    }
    return stats;
}

Tensor normalize_image(const Tensor& image, const ChannelStats& stats) {
    if (image.rank() != 3 || image.shape()[0] != 3) {
        throw ShapeError("normalize_image: expected [3,H,W], got " + shape_str(image.shape()));
    }
    const std::size_t plane = image.size() / 3;
    std::vector<double> out(image.size());
    const double* d = image.values().data();
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            out[c * plane + i] = (d[c * plane + i] - stats.mean[c]) / stats.stddev[c];
        }
    }
    return Tensor(image.shape(), std::move(out));
}

void normalize_in_place(std::vector<Sample>& samples, const ChannelStats& stats) {
    for (auto& s : samples) s.image = normalize_image(s.image, stats);
}

}  // namespace mdan
