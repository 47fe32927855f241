#pragma once

#include <string>
#include <vector>

#include "mdan/synthetic.hpp"
#include "mdan/tensor.hpp"

namespace mdan {

// 8-bit binary portable pixmaps. Values on the [0,1] scale; writing
// quantizes with round-to-nearest, reading divides by the stated maxval.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

// 8-bit binary portable graymap from a [H,W] map, min-max scaled to 0..255
// (a constant map writes all zeros).
void write_pgm(const std::string& path, const Tensor& map);

// Dataset index file: '#mean r g b' and '#std r g b' header lines, then
// 'path<TAB>leaf-class-name' rows with paths relative to the index file.
struct DatasetIndex {
    ChannelStats stats;
    std::vector<std::pair<std::string, std::string>> entries;  // path, leaf name
};

DatasetIndex read_dataset_index(const std::string& path);
void write_dataset_index(const std::string& path, const DatasetIndex& index);

// Loads every image named by the index, normalizes with the stored stats and
// resolves leaf names against the hierarchy.
std::vector<Sample> load_dataset(const std::string& index_path, const EmotionHierarchy& hierarchy);

}  // namespace mdan
