#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mdan/model.hpp"

namespace mdan {

// Checkpoint layout: magic "MDAN1", u32-length-prefixed key=value text block
// (configuration + hierarchy level sizes), u32 tensor count, then named
// tensors (u16 name length, name, TNSR1 blob).
struct Checkpoint {
    MdanConfig config;
    std::vector<std::size_t> level_sizes;
    MdanParams params;
};

std::string serialize_checkpoint(const MdanConfig& config,
                                 const std::vector<std::size_t>& level_sizes,
                                 const MdanParams& params);
Checkpoint deserialize_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const MdanConfig& config,
                     const std::vector<std::size_t>& level_sizes, const MdanParams& params);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mdan
