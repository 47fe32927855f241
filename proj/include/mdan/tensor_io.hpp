#pragma once

#include <iosfwd>
#include <string>

#include "mdan/tensor.hpp"

namespace mdan {

// Binary tensor format: magic "TNSR1", u32 rank, u64 extents, then the
// row-major float64 payload. All fields little-endian IEEE-754.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);

// Writes `content` to `path` via a temp file and rename.
void atomic_write_file(const std::string& path, const std::string& content);

}  // namespace mdan
