#include "mdan/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mdan/errors.hpp"

namespace mdan {

namespace {

double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

Tensor init_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = bound * (2.0 * uniform01(rng) - 1.0);
    return Tensor(std::move(shape), std::move(data), /*requires_grad=*/true);
}

Tensor pointwise(const Tensor& x, const Tensor& w) { return conv2d(x, w, 1, 0); }

}  // namespace

std::size_t argmax(const std::vector<double>& v) {
    if (v.empty()) throw ContractError("argmax: empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// --- config ------------------------------------------------------------------

std::size_t MdanConfig::channels_of(int ls) const {
    if (ls < 2 || ls > 5) throw ConfigError("semantic level " + std::to_string(ls) + " out of [2,5]");
    return widths[static_cast<std::size_t>(ls) - 2];
}

std::size_t MdanConfig::spatial_h(int ls) const {
    if (ls < 2 || ls > 5) throw ConfigError("semantic level " + std::to_string(ls) + " out of [2,5]");
    return input_h >> (ls - 1);
}

std::size_t MdanConfig::spatial_w(int ls) const {
    if (ls < 2 || ls > 5) throw ConfigError("semantic level " + std::to_string(ls) + " out of [2,5]");
    return input_w >> (ls - 1);
}

std::size_t MdanConfig::head_dim(int ls, std::size_t h) const {
    const std::size_t flat = spatial_h(ls) * spatial_w(ls);
    if (h == 0 || flat % h != 0) {
        throw ConfigError("heads " + std::to_string(h) + " do not divide the flattened spatial size " +
                          std::to_string(flat) + " at level " + std::to_string(ls));
    }
    return flat / h;
}

std::size_t MdanConfig::head_dim(int ls) const {
    auto it = heads.find(ls);
    if (it == heads.end()) throw ConfigError("no head count configured at level " + std::to_string(ls));
    return head_dim(ls, it->second);
}

bool sequential_mapping(const MdanConfig& config, int depth) {
    for (int la = 1; la <= depth; ++la) {
        auto it = config.mapping_table.find(la);
        if (it == config.mapping_table.end() || it->second != 5 - la) return false;
    }
    return true;
}

void validate_config(MdanConfig& config, const std::vector<std::size_t>& level_sizes) {
    const int depth = static_cast<int>(level_sizes.size());
    if (depth < 1) throw ConfigError("hierarchy has no levels");
    if (config.input_h == 0 || config.input_h % 16 != 0 || config.input_w == 0 ||
        config.input_w % 16 != 0) {
        throw ConfigError("input size must be a positive multiple of 16");
    }
    for (std::size_t w : config.widths)
        if (w == 0) throw ConfigError("backbone widths must be positive");
    if (config.pyramid_width == 0) throw ConfigError("pyramid width must be positive");
    if (config.alpha < 0.0 || config.alpha > 1.0) throw ConfigError("alpha must be in [0,1]");

    if (config.mapping == "e") {
        config.mapping_table.clear();
        for (int la = 1; la <= depth; ++la) config.mapping_table[la] = 5 - la;
    } else if (config.mapping == "f") {
        config.mapping_table.clear();
        for (int la = 1; la <= depth; ++la) config.mapping_table[la] = 4 - depth + la;
    } else if (config.mapping == "table") {
        if (static_cast<int>(config.mapping_table.size()) != depth) {
            throw ConfigError("mapping table must assign every affective level 1.." +
                              std::to_string(depth));
        }
    } else {
        throw ConfigError("unknown mapping preset '" + config.mapping + "'");
    }

    std::vector<int> used;
    for (int la = 1; la <= depth; ++la) {
        auto it = config.mapping_table.find(la);
        if (it == config.mapping_table.end()) {
            throw ConfigError("mapping table misses affective level " + std::to_string(la));
        }
        const int ls = it->second;
        if (ls < 2 || ls > 5) {
            throw ConfigError("hierarchy depth exceeds available pyramid levels: l_a=" +
                              std::to_string(la) + " maps to l_s=" + std::to_string(ls));
        }
        if (std::find(used.begin(), used.end(), ls) != used.end()) {
            throw ConfigError("mapping table is not injective at l_s=" + std::to_string(ls));
        }
        used.push_back(ls);
    }

    // The dependent attention chain only exists on the fused l_s = 5 - l_a
    // assignment; any other mapping runs the plain pyramid.
    if (!sequential_mapping(config, depth) || !config.feature_fusion) {
        config.mhcca_on = false;
        config.kv_projections_on = false;
        config.lcam_mean_on = false;
        config.lcam_max_on = false;
    }
    if (!config.mhcca_on) config.kv_projections_on = false;

    if (config.mhcca_on) {
        for (int la = 2; la <= depth; ++la) {
            const int ls = config.mapping_table[la];
            if (!config.heads.count(ls)) {
                config.heads[ls] = static_cast<std::size_t>(1) << (la - 1);
            }
            config.head_dim(ls);  // divisibility check
        }
    }
}

// --- parameters ---------------------------------------------------------------

namespace {

// Laterals a configuration needs, in the order they are initialized.
std::vector<int> needed_laterals(const MdanConfig& config, int depth) {
    std::vector<int> levels;
    const bool chain = sequential_mapping(config, depth) && config.feature_fusion;
    if (chain) {
        levels.push_back(5);
        if (depth >= 1) levels.push_back(4);
        for (int la = 2; la <= depth; ++la) {
            if (!config.mhcca_on) levels.push_back(config.mapping_table.at(la));
        }
    } else if (config.feature_fusion) {
        int lowest = 5;
        for (const auto& [la, ls] : config.mapping_table) lowest = std::min(lowest, ls);
        for (int ls = 5; ls >= lowest; --ls) levels.push_back(ls);
    } else {
        for (const auto& [la, ls] : config.mapping_table) levels.push_back(ls);
    }
    std::sort(levels.begin(), levels.end(), std::greater<int>());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    return levels;
}

std::vector<int> attended_levels(const MdanConfig& config, int depth) {
    std::vector<int> levels;
    if (!config.mhcca_on) return levels;
    for (int la = 2; la <= depth; ++la) levels.push_back(config.mapping_table.at(la));
    return levels;
}

}  // namespace

MdanParams MdanParams::init(const MdanConfig& config, const std::vector<std::size_t>& level_sizes,
                            std::uint64_t seed) {
    const int depth = static_cast<int>(level_sizes.size());
    std::mt19937_64 rng(seed);
    MdanParams p;

    std::size_t cin = 3;
    for (std::size_t stage = 0; stage < 4; ++stage) {
        const std::size_t cout = config.widths[stage];
        p.backbone.push_back(init_uniform({cout, cin, 3, 3}, cin * 9, cout * 9, rng));
        cin = cout;
    }

    const std::size_t df = config.pyramid_width;
    for (int ls : needed_laterals(config, depth)) {
        const std::size_t c = config.channels_of(ls);
        p.lateral.emplace(ls, init_uniform({df, c, 1, 1}, c, df, rng));
    }

    for (int ls : attended_levels(config, depth)) {
        p.attn_q.emplace(ls, init_uniform({df, df, 1, 1}, df, df, rng));
        p.attn_o.emplace(ls, init_uniform({df, df, 1, 1}, df, df, rng));
        if (config.kv_projections_on) {
            const std::size_t c = config.channels_of(ls);
            p.attn_k.emplace(ls, init_uniform({c, c, 1, 1}, c, c, rng));
            p.attn_v.emplace(ls, init_uniform({c, c, 1, 1}, c, c, rng));
        }
    }

    for (int la = 1; la <= depth; ++la) {
        const std::size_t classes = level_sizes[static_cast<std::size_t>(la) - 1];
        p.local_w.push_back(init_uniform({classes, df}, df, classes, rng));
    }
    p.global_w = init_uniform({level_sizes.back(), config.widths[3]}, config.widths[3],
                              level_sizes.back(), rng);
    return p;
}

std::vector<std::pair<std::string, Tensor>> MdanParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < backbone.size(); ++i)
        out.emplace_back("backbone." + std::to_string(i), backbone[i]);
    for (const auto& [ls, t] : lateral) out.emplace_back("lateral." + std::to_string(ls), t);
    for (const auto& [ls, t] : attn_q) out.emplace_back("attn.q." + std::to_string(ls), t);
    for (const auto& [ls, t] : attn_o) out.emplace_back("attn.o." + std::to_string(ls), t);
    for (const auto& [ls, t] : attn_k) out.emplace_back("attn.k." + std::to_string(ls), t);
    for (const auto& [ls, t] : attn_v) out.emplace_back("attn.v." + std::to_string(ls), t);
    for (std::size_t i = 0; i < local_w.size(); ++i)
        out.emplace_back("local." + std::to_string(i + 1), local_w[i]);
    out.emplace_back("global", global_w);
    return out;
}

std::vector<Tensor> MdanParams::all() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named()) out.push_back(t);
    return out;
}

std::vector<Tensor> MdanParams::backbone_group() const { return backbone; }

std::vector<Tensor> MdanParams::head_group() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named()) {
        if (name.rfind("backbone.", 0) != 0) out.push_back(t);
    }
    return out;
}

std::size_t MdanParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : all()) n += t.size();
    return n;
}

void MdanParams::zero_grads() const {
    for (auto t : all()) t.zero_grad();
}

// --- operations ----------------------------------------------------------------

BackbonePyramid backbone_forward(const Tensor& image, const MdanConfig& config,
                                 const MdanParams& params) {
    if (image.rank() != 3 || image.shape()[0] != 3 || image.shape()[1] != config.input_h ||
        image.shape()[2] != config.input_w) {
        throw ShapeError("backbone_forward: image " + shape_str(image.shape()) +
                         " does not match configured input 3x" + std::to_string(config.input_h) +
                         "x" + std::to_string(config.input_w));
    }
    BackbonePyramid bp;
    Tensor x = image;
    for (std::size_t stage = 0; stage < 4; ++stage) {
        x = relu(conv2d(x, params.backbone[stage], 2, 1));
        bp.c[stage] = x;
    }
    return bp;
}

Tensor fpn_fuse(const Tensor& c, const Tensor& f_above, const Tensor& lateral) {
    return add(pointwise(c, lateral), upsample_bilinear_2x(f_above));
}

MhccaResult mhcca(const Tensor& f_coarse, const Tensor& c_fine, const Tensor& q_filter,
                  const Tensor& o_filter, const Tensor* k_filter, const Tensor* v_filter,
                  std::size_t heads) {
    if (f_coarse.rank() != 3 || c_fine.rank() != 3) {
        throw ShapeError("mhcca: expected [C,H,W] operands");
    }
    if (c_fine.shape()[1] != 2 * f_coarse.shape()[1] ||
        c_fine.shape()[2] != 2 * f_coarse.shape()[2]) {
        throw ShapeError("mhcca: fine map " + shape_str(c_fine.shape()) +
                         " is not 2x the coarse map " + shape_str(f_coarse.shape()));
    }
    const std::size_t df = f_coarse.shape()[0];
    const std::size_t cl = c_fine.shape()[0];
    const std::size_t h2 = c_fine.shape()[1], w2 = c_fine.shape()[2];
    const std::size_t flat = h2 * w2;
    if (heads == 0 || flat % heads != 0) {
        throw ConfigError("mhcca: heads " + std::to_string(heads) +
                          " do not divide flattened spatial size " + std::to_string(flat));
    }
    const std::size_t d = flat / heads;

    Tensor queries = reshape(pointwise(upsample_bilinear_2x(f_coarse), q_filter), {df, flat});
    Tensor keys = k_filter ? pointwise(c_fine, *k_filter) : c_fine;
    Tensor vals = v_filter ? pointwise(c_fine, *v_filter) : c_fine;
    Tensor kf = reshape(keys, {cl, flat});
    Tensor vf = reshape(vals, {cl, flat});

    MhccaResult result;
    std::vector<Tensor> head_outputs;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < heads; ++i) {
        Tensor qh = slice_lastdim(queries, i * d, d);
        Tensor kh = slice_lastdim(kf, i * d, d);
        Tensor vh = slice_lastdim(vf, i * d, d);
        Tensor attn = softmax_lastdim(scale(matmul(qh, transpose2d(kh)), inv_sqrt_d));
        result.attention.push_back(attn);
        head_outputs.push_back(matmul(attn, vh));
    }
    Tensor merged = reshape(concat_lastdim(head_outputs), {df, h2, w2});
    result.out = pointwise(merged, o_filter);
    return result;
}

Tensor compute_cam(const Tensor& f, const Tensor& w, std::size_t k) {
    if (f.rank() != 3 || w.rank() != 2 || w.shape()[1] != f.shape()[0]) {
        throw ShapeError("compute_cam: weights " + shape_str(w.shape()) +
                         " do not match features " + shape_str(f.shape()));
    }
    if (k >= w.shape()[0]) throw IndexError("compute_cam: class index out of range");
    const std::size_t df = f.shape()[0], h = f.shape()[1], wd = f.shape()[2];
    Tensor row = reshape(slice_lastdim(reshape(w, {w.size()}), k * df, df), {1, df});
    return reshape(matmul(row, reshape(f, {df, h * wd})), {h, wd});
}

Tensor lcam_fuse(const std::vector<Tensor>& cams, bool mean_on, bool max_on) {
    if (cams.empty()) throw ContractError("lcam_fuse: no activation maps");
    if (!mean_on && !max_on) throw ContractError("lcam_fuse: no pooling selected");

    Tensor fused;
    if (mean_on) {
        Tensor acc = cams[0];
        for (std::size_t i = 1; i < cams.size(); ++i) acc = add(acc, cams[i]);
        fused = scale(acc, 1.0 / static_cast<double>(cams.size()));
    }
    if (max_on) {
        Tensor mx = cams[0];
        for (std::size_t i = 1; i < cams.size(); ++i) mx = ewise_max(mx, cams[i]);
        fused = fused.defined() ? add(fused, mx) : mx;
    }

    Tensor lo = reduce_min(fused);
    Tensor hi = reduce_max(fused);
    Tensor range = add(hi, scale(lo, -1.0));
    if (range.item() < 1e-12) return Tensor::zeros(fused.shape());
    return div_broadcast_scalar(sub_broadcast_scalar(fused, lo), range);
}

Tensor lcam_apply(const Tensor& m, const Tensor& x) {
    if (m.rank() != 2 || x.rank() != 3 || m.shape()[0] != x.shape()[1] ||
        m.shape()[1] != x.shape()[2]) {
        throw ShapeError("lcam_apply: map " + shape_str(m.shape()) + " does not match features " +
                         shape_str(x.shape()));
    }
    return mul(x, reshape(add_scalar(m, 1.0), {1, m.shape()[0], m.shape()[1]}));
}

Tensor local_predict(const Tensor& f, const Tensor& w) {
    Tensor pooled = global_avg_pool(f);
    const std::size_t classes = w.shape()[0];
    return softmax_lastdim(reshape(matmul(w, reshape(pooled, {pooled.size(), 1})), {classes}));
}

Tensor global_predict(const Tensor& c5, const Tensor& g) { return local_predict(c5, g); }

Tensor fuse_predictions(const Tensor& p_local, const Tensor& p_global, double alpha) {
    if (p_local.shape() != p_global.shape()) {
        throw ShapeError("fuse_predictions: " + shape_str(p_local.shape()) + " vs " +
                         shape_str(p_global.shape()));
    }
    return add(scale(p_local, alpha), scale(p_global, 1.0 - alpha));
}

// --- full forward ----------------------------------------------------------------

ForwardResult mdan_forward(const Tensor& image, const MdanParams& params,
                           const MdanConfig& config, const EmotionHierarchy& hierarchy) {
    const int depth = hierarchy.depth();
    if (static_cast<int>(config.mapping_table.size()) != depth) {
        throw ConfigError("config not validated against this hierarchy depth");
    }
    for (int la = 1; la <= depth; ++la) {
        if (params.local_w[static_cast<std::size_t>(la) - 1].shape()[0] !=
            hierarchy.level_size(la)) {
            throw ConfigError("classifier size does not match hierarchy level " +
                              std::to_string(la));
        }
    }

    ForwardResult res;
    const BackbonePyramid bp = backbone_forward(image, config, params);
    res.c5 = bp.at(5);

    // Bottom-up branch: global prediction at the deepest level, children-sum
    // aggregation below it.
    res.predictions.global_.assign(static_cast<std::size_t>(depth), Tensor());
    res.predictions.global_[static_cast<std::size_t>(depth) - 1] =
        global_predict(bp.at(5), params.global_w);
    for (int la = depth; la >= 2; --la) {
        const std::size_t rows = hierarchy.level_size(la - 1);
        const std::size_t cols = hierarchy.level_size(la);
        Tensor agg({rows, cols}, hierarchy.aggregation_matrix(la));
        Tensor child = res.predictions.global_[static_cast<std::size_t>(la) - 1];
        res.predictions.global_[static_cast<std::size_t>(la) - 2] =
            reshape(matmul(agg, reshape(child, {cols, 1})), {rows});
    }

    // Top-down branch.
    res.predictions.local.assign(static_cast<std::size_t>(depth), Tensor());
    const bool chain = sequential_mapping(config, depth) && config.feature_fusion;
    if (chain) {
        res.pyramid[5] = pointwise(bp.at(5), params.lateral.at(5));
        for (int la = 1; la <= depth; ++la) {
            const int ls = 5 - la;
            Tensor f;
            if (la == 1) {
                f = fpn_fuse(bp.at(ls), res.pyramid.at(ls + 1), params.lateral.at(4));
            } else {
                Tensor x;
                if (config.mhcca_on) {
                    const Tensor* kf =
                        config.kv_projections_on ? &params.attn_k.at(ls) : nullptr;
                    const Tensor* vf =
                        config.kv_projections_on ? &params.attn_v.at(ls) : nullptr;
                    MhccaResult att =
                        mhcca(res.pyramid.at(ls + 1), bp.at(ls), params.attn_q.at(ls),
                              params.attn_o.at(ls), kf, vf, config.heads.at(ls));
                    res.artifacts.attention[la] = std::move(att.attention);
                    x = att.out;
                } else {
                    x = pointwise(bp.at(ls), params.lateral.at(ls));
                }
                if (config.upsample_add_on) {
                    x = add(x, upsample_bilinear_2x(res.pyramid.at(ls + 1)));
                }
                if (config.lcam_enabled()) {
                    const std::size_t prev = argmax(
                        res.predictions.local[static_cast<std::size_t>(la) - 2].values());
                    const auto& kids = hierarchy.children_of(la - 1, prev);
                    std::vector<Tensor> cams;
                    cams.reserve(kids.size());
                    for (std::size_t k : kids) {
                        cams.push_back(
                            compute_cam(x, params.local_w[static_cast<std::size_t>(la) - 1], k));
                    }
                    Tensor m = lcam_fuse(cams, config.lcam_mean_on, config.lcam_max_on);
                    res.artifacts.child_cams[la] = std::move(cams);
                    res.artifacts.child_classes[la] =
                        std::vector<std::size_t>(kids.begin(), kids.end());
                    res.artifacts.fused_map[la] = m;
                    f = lcam_apply(m, x);
                } else {
                    f = x;
                }
            }
            res.pyramid[ls] = f;
            res.predictions.local[static_cast<std::size_t>(la) - 1] =
                local_predict(f, params.local_w[static_cast<std::size_t>(la) - 1]);
        }
    } else if (config.feature_fusion) {
        int lowest = 5;
        for (const auto& [la, ls] : config.mapping_table) lowest = std::min(lowest, ls);
        res.pyramid[5] = pointwise(bp.at(5), params.lateral.at(5));
        for (int ls = 4; ls >= lowest; --ls) {
            res.pyramid[ls] = fpn_fuse(bp.at(ls), res.pyramid.at(ls + 1), params.lateral.at(ls));
        }
        for (int la = 1; la <= depth; ++la) {
            res.predictions.local[static_cast<std::size_t>(la) - 1] = local_predict(
                res.pyramid.at(config.mapping_table.at(la)),
                params.local_w[static_cast<std::size_t>(la) - 1]);
        }
    } else {
        for (int la = 1; la <= depth; ++la) {
            const int ls = config.mapping_table.at(la);
            Tensor f = pointwise(bp.at(ls), params.lateral.at(ls));
            res.pyramid[ls] = f;
            res.predictions.local[static_cast<std::size_t>(la) - 1] =
                local_predict(f, params.local_w[static_cast<std::size_t>(la) - 1]);
        }
    }

    res.predictions.overall.assign(static_cast<std::size_t>(depth), Tensor());
    for (int la = 1; la <= depth; ++la) {
        const std::size_t i = static_cast<std::size_t>(la) - 1;
        res.predictions.overall[i] =
            fuse_predictions(res.predictions.local[i], res.predictions.global_[i], config.alpha);
    }
    return res;
}

Tensor joint_loss(const std::vector<PredictionSet>& batch, const std::vector<LabelPath>& truths,
                  const EmotionHierarchy& hierarchy) {
    if (batch.empty() || batch.size() != truths.size()) {
        throw ContractError("joint_loss: batch and truths must align and be non-empty");
    }
    const int depth = hierarchy.depth();
    Tensor acc;
    for (int la = 1; la <= depth; ++la) {
        const std::size_t classes = hierarchy.level_size(la);
        std::vector<Tensor> rows;
        std::vector<std::size_t> y;
        rows.reserve(batch.size());
        for (std::size_t j = 0; j < batch.size(); ++j) {
            rows.push_back(batch[j].overall.at(static_cast<std::size_t>(la) - 1));
            y.push_back(truths[j].at(la));
        }
        Tensor p = reshape(concat_lastdim(rows), {batch.size(), classes});
        Tensor level_loss = cross_entropy(p, y);
        acc = acc.defined() ? add(acc, level_loss) : level_loss;
    }
    return scale(acc, 1.0 / static_cast<double>(depth));
}

}  // namespace mdan
