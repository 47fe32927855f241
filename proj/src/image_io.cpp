#include "mdan/image_io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mdan/errors.hpp"
#include "mdan/tensor_io.hpp"

namespace mdan {

namespace {

unsigned char to_byte(double v) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    return static_cast<unsigned char>(std::lround(clamped * 255.0));
}

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (in) {
        if (c == '#') {
            while (in && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    while (in && !std::isspace(c)) {
        tok += static_cast<char>(c);
        c = in.get();
    }
    return tok;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.shape()[0] != 3) {
        throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
    }
    const std::size_t h = image.shape()[1], w = image.shape()[2];
    std::ostringstream os(std::ios::binary);
    os << "P6\n" << w << " " << h << "\n255\n";
    const double* d = image.values().data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                os.put(static_cast<char>(to_byte(d[c * h * w + y * w + x])));
            }
        }
    }
    atomic_write_file(path, os.str());
}

Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path);
    if (next_token(in) != "P6") throw ParseError(path + ": not a binary PPM (P6)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(next_token(in));
        h = std::stoul(next_token(in));
        maxval = std::stoul(next_token(in));
    } catch (const std::exception&) {
        throw ParseError(path + ": malformed PPM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
        throw ParseError(path + ": unsupported PPM header");
    }
    std::vector<char> raw(3 * w * h);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw ParseError(path + ": truncated PPM payload");
    std::vector<double> data(3 * w * h);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                data[c * h * w + y * w + x] =
                    static_cast<unsigned char>(raw[(y * w + x) * 3 + c]) /
                    static_cast<double>(maxval);
            }
        }
    }
    return Tensor({3, h, w}, std::move(data));
}

void write_pgm(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) {
        throw ShapeError("write_pgm: expected [H,W], got " + shape_str(map.shape()));
    }
    const std::size_t h = map.shape()[0], w = map.shape()[1];
    double lo = map.values()[0], hi = map.values()[0];
    for (double v : map.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = hi - lo;
    std::ostringstream os(std::ios::binary);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (double v : map.values()) {
        const double scaled = range < 1e-12 ? 0.0 : (v - lo) / range;
        os.put(static_cast<char>(to_byte(scaled)));
    }
    atomic_write_file(path, os.str());
}

DatasetIndex read_dataset_index(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset index: " + path);
    DatasetIndex index;
    bool have_mean = false, have_std = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ss(line.substr(1));
            std::string key;
            ss >> key;
            if (key == "mean" || key == "std") {
                std::array<double, 3>& target =
                    key == "mean" ? index.stats.mean : index.stats.stddev;
                if (!(ss >> target[0] >> target[1] >> target[2])) {
                    throw ParseError(path + ":" + std::to_string(lineno) + ": malformed #" + key +
                                     " header");
                }
                (key == "mean" ? have_mean : have_std) = true;
            }
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected 'path<TAB>leaf-class-name'");
        }
        index.entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    if (!have_mean || !have_std) {
        throw ParseError(path + ": missing #mean/#std normalization header");
    }
    return index;
}

void write_dataset_index(const std::string& path, const DatasetIndex& index) {
    std::ostringstream os;
    os.precision(17);
    os << "#mean " << index.stats.mean[0] << " " << index.stats.mean[1] << " "
       << index.stats.mean[2] << "\n";
    os << "#std " << index.stats.stddev[0] << " " << index.stats.stddev[1] << " "
       << index.stats.stddev[2] << "\n";
    for (const auto& [file, leaf] : index.entries) os << file << "\t" << leaf << "\n";
    atomic_write_file(path, os.str());
}

std::vector<Sample> load_dataset(const std::string& index_path,
                                 const EmotionHierarchy& hierarchy) {
    const DatasetIndex index = read_dataset_index(index_path);
    const auto base = std::filesystem::path(index_path).parent_path();
    std::vector<Sample> samples;
    samples.reserve(index.entries.size());
    for (const auto& [file, leaf] : index.entries) {
        const std::size_t leaf_index = hierarchy.class_index(hierarchy.depth(), leaf);
        Sample s;
        s.image = normalize_image(read_ppm((base / file).string()), index.stats);
        s.label = hierarchy.leaf_to_path(leaf_index);
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace mdan
