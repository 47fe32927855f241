#include "mdan/tensor_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mdan/errors.hpp"

namespace mdan {

namespace {

constexpr char kMagic[5] = {'T', 'N', 'S', 'R', '1'};

template <typename T>
void write_le(std::ostream& out, T v) {
    static_assert(std::endian::native == std::endian::little,
                  "big-endian hosts need byte swapping here");
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("tensor read: truncated stream");
    return v;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
void write_f64(std::ostream& out, double v) { write_le(out, v); }
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }
double read_f64(std::istream& in) { return read_le<double>(in); }

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) write_u64(out, e);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
    char magic[5];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("tensor read: bad magic, expected TNSR1");
    }
    const std::uint32_t rank = read_u32(in);
    if (rank > 8) throw DataError("tensor read: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
        e = static_cast<std::size_t>(read_u64(in));
        if (e == 0) throw DataError("tensor read: zero extent");
        n *= e;
    }
    std::vector<double> data(n);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw DataError("tensor read: truncated payload");
    return Tensor(std::move(shape), std::move(data));
}

void atomic_write_file(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open for writing: " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw DataError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw DataError("rename failed: " + tmp + " -> " + path);
    }
}

}  // namespace mdan
