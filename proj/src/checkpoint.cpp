#include "mdan/checkpoint.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mdan/errors.hpp"
#include "mdan/tensor_io.hpp"

namespace mdan {

namespace {

constexpr char kMagic[5] = {'M', 'D', 'A', 'N', '1'};

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) out.push_back(part);
    return out;
}

std::string config_block(const MdanConfig& c, const std::vector<std::size_t>& level_sizes) {
    std::ostringstream os;
    os << "input_h=" << c.input_h << "\n";
    os << "input_w=" << c.input_w << "\n";
    os << "widths=" << c.widths[0] << "," << c.widths[1] << "," << c.widths[2] << ","
       << c.widths[3] << "\n";
    os << "pyramid_width=" << c.pyramid_width << "\n";
    os << "mapping=" << c.mapping << "\n";
    {
        std::string table;
        for (const auto& [la, ls] : c.mapping_table) {
            if (!table.empty()) table += ",";
            table += std::to_string(la) + ">" + std::to_string(ls);
        }
        os << "mapping_table=" << table << "\n";
    }
    os << "feature_fusion=" << (c.feature_fusion ? 1 : 0) << "\n";
    {
        std::string heads;
        for (const auto& [ls, h] : c.heads) {
            if (!heads.empty()) heads += ",";
            heads += std::to_string(ls) + ":" + std::to_string(h);
        }
        os << "heads=" << heads << "\n";
    }
    os << "alpha=" << fmt_double(c.alpha) << "\n";
    os << "mhcca=" << (c.mhcca_on ? 1 : 0) << "\n";
    os << "kv_projections=" << (c.kv_projections_on ? 1 : 0) << "\n";
    os << "upsample_add=" << (c.upsample_add_on ? 1 : 0) << "\n";
    os << "lcam_mean=" << (c.lcam_mean_on ? 1 : 0) << "\n";
    os << "lcam_max=" << (c.lcam_max_on ? 1 : 0) << "\n";
    os << "norm_mean=" << fmt_double(c.norm_mean[0]) << "," << fmt_double(c.norm_mean[1]) << ","
       << fmt_double(c.norm_mean[2]) << "\n";
    os << "norm_std=" << fmt_double(c.norm_std[0]) << "," << fmt_double(c.norm_std[1]) << ","
       << fmt_double(c.norm_std[2]) << "\n";
    os << "levels=" << join_sizes(level_sizes) << "\n";
    return os.str();
}

void parse_config_block(const std::string& text, MdanConfig& c,
                        std::vector<std::size_t>& level_sizes) {
    std::map<std::string, std::string> kv;
    for (const std::string& line : split(text, '\n')) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("checkpoint: malformed config line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError("checkpoint: missing config key '" + key + "'");
        return it->second;
    };
    c.input_h = std::stoul(need("input_h"));
    c.input_w = std::stoul(need("input_w"));
    {
        const auto parts = split(need("widths"), ',');
        if (parts.size() != 4) throw DataError("checkpoint: widths must have 4 entries");
        for (std::size_t i = 0; i < 4; ++i) c.widths[i] = std::stoul(parts[i]);
    }
    c.pyramid_width = std::stoul(need("pyramid_width"));
    c.mapping = need("mapping");
    c.mapping_table.clear();
    for (const std::string& entry : split(need("mapping_table"), ',')) {
        if (entry.empty()) continue;
        const auto gt = entry.find('>');
        if (gt == std::string::npos) throw DataError("checkpoint: bad mapping entry " + entry);
        c.mapping_table[std::stoi(entry.substr(0, gt))] = std::stoi(entry.substr(gt + 1));
    }
    c.feature_fusion = need("feature_fusion") == "1";
    c.heads.clear();
    for (const std::string& entry : split(need("heads"), ',')) {
        if (entry.empty()) continue;
        const auto colon = entry.find(':');
        if (colon == std::string::npos) throw DataError("checkpoint: bad heads entry " + entry);
        c.heads[std::stoi(entry.substr(0, colon))] = std::stoul(entry.substr(colon + 1));
    }
    c.alpha = std::stod(need("alpha"));
    c.mhcca_on = need("mhcca") == "1";
    c.kv_projections_on = need("kv_projections") == "1";
    c.upsample_add_on = need("upsample_add") == "1";
    c.lcam_mean_on = need("lcam_mean") == "1";
    c.lcam_max_on = need("lcam_max") == "1";
    {
        const auto parts = split(need("norm_mean"), ',');
        const auto parts2 = split(need("norm_std"), ',');
        if (parts.size() != 3 || parts2.size() != 3)
            throw DataError("checkpoint: normalization stats must have 3 channels");
        for (std::size_t i = 0; i < 3; ++i) {
            c.norm_mean[i] = std::stod(parts[i]);
            c.norm_std[i] = std::stod(parts2[i]);
        }
    }
    level_sizes.clear();
    for (const std::string& entry : split(need("levels"), ',')) {
        if (!entry.empty()) level_sizes.push_back(std::stoul(entry));
    }
    if (level_sizes.empty()) throw DataError("checkpoint: empty level sizes");
}

}  // namespace

std::string serialize_checkpoint(const MdanConfig& config,
                                 const std::vector<std::size_t>& level_sizes,
                                 const MdanParams& params) {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, sizeof(kMagic));
    const std::string block = config_block(config, level_sizes);
    write_u32(os, static_cast<std::uint32_t>(block.size()));
    os.write(block.data(), static_cast<std::streamsize>(block.size()));

    const auto named = params.named();
    write_u32(os, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        const std::uint16_t len = static_cast<std::uint16_t>(name.size());
        os.write(reinterpret_cast<const char*>(&len), sizeof(len));
        os.write(name.data(), len);
        write_tensor(os, t);
    }
    return os.str();
}

Checkpoint deserialize_checkpoint(std::istream& in) {
    char magic[5];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("checkpoint: bad magic, expected MDAN1");
    }
    const std::uint32_t block_len = read_u32(in);
    std::string block(block_len, '\0');
    in.read(block.data(), block_len);
    if (!in) throw DataError("checkpoint: truncated config block");

    Checkpoint ckpt;
    parse_config_block(block, ckpt.config, ckpt.level_sizes);

    // Rebuild the parameter skeleton, then overwrite values by name.
    ckpt.params = MdanParams::init(ckpt.config, ckpt.level_sizes, /*seed=*/0);
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, t] : ckpt.params.named()) by_name.emplace(name, t);

    const std::uint32_t count = read_u32(in);
    if (count != by_name.size()) {
        throw DataError("checkpoint: expected " + std::to_string(by_name.size()) +
                        " tensors, found " + std::to_string(count));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t len = 0;
        in.read(reinterpret_cast<char*>(&len), sizeof(len));
        std::string name(len, '\0');
        in.read(name.data(), len);
        if (!in) throw DataError("checkpoint: truncated tensor name");
        Tensor t = read_tensor(in);
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint: unexpected tensor '" + name + "'");
        if (it->second.shape() != t.shape()) {
            throw DataError("checkpoint: tensor '" + name + "' has shape " +
                            shape_str(t.shape()) + ", expected " + shape_str(it->second.shape()));
        }
        it->second.mutable_values() = t.values();
    }
    return ckpt;
}

void save_checkpoint(const std::string& path, const MdanConfig& config,
                     const std::vector<std::size_t>& level_sizes, const MdanParams& params) {
    atomic_write_file(path, serialize_checkpoint(config, level_sizes, params));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    return deserialize_checkpoint(in);
}

}  // namespace mdan
