#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mdan/hierarchy.hpp"
#include "mdan/tensor.hpp"

namespace mdan {

struct Sample {
    Tensor image;  // [3,H,W]
    LabelPath label;
};

// Procedural dataset rules: level-1 classes pick the dominant hue (warm for
// the first class, cool for the second), deeper levels pick a texture
// pattern (stripes, checker, dots, gradient, noise, rings) and, at depth 3,
// a pattern variant. Generated labels are always hierarchy-consistent and
// generation is a pure function of the seed.
struct SyntheticSpec {
    std::size_t image_h = 64;
    std::size_t image_w = 64;
    std::size_t samples_per_class = 10;
    std::uint64_t seed = 7;
};

// Balanced over leaf classes; pixel values are 8-bit quantized and returned
// on the [0,1] scale, matching what a PPM round trip would load.
std::vector<Sample> generate_dataset(const SyntheticSpec& spec, const EmotionHierarchy& hierarchy);

struct ChannelStats {
    std::array<double, 3> mean = {0.0, 0.0, 0.0};
    std::array<double, 3> stddev = {1.0, 1.0, 1.0};
};

ChannelStats compute_channel_stats(const std::vector<Sample>& samples);
void normalize_in_place(std::vector<Sample>& samples, const ChannelStats& stats);
Tensor normalize_image(const Tensor& image, const ChannelStats& stats);

}  // namespace mdan
