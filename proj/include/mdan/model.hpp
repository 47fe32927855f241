#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdan/hierarchy.hpp"
#include "mdan/tensor.hpp"

namespace mdan {

// Architectural choices. Semantic levels follow the pyramid convention:
// C2..C5 are the backbone stages, C_l has spatial extent input/2^(l-1).
struct MdanConfig {
    std::size_t input_h = 64;
    std::size_t input_w = 64;
    std::array<std::size_t, 4> widths = {8, 16, 32, 64};  // channels of C2..C5
    std::size_t pyramid_width = 32;                       // channels of every F map

    // "e": l_s = 5 - l_a with feature fusion (the default chain with
    // attention); "f": reversed assignment with fusion; "table": explicit
    // l_a -> l_s assignment in mapping_table.
    std::string mapping = "e";
    std::map<int, int> mapping_table;
    bool feature_fusion = true;

    // Attention heads per attended semantic level (key side). Filled with
    // defaults {2,4,8,...} by validate() when empty.
    std::map<int, std::size_t> heads;

    double alpha = 0.7;  // weight of the local prediction in the fusion

    bool mhcca_on = true;
    bool kv_projections_on = false;
    bool upsample_add_on = true;
    bool lcam_mean_on = true;
    bool lcam_max_on = true;
    bool lcam_enabled() const { return lcam_mean_on || lcam_max_on; }

    // Per-channel normalization statistics of the training data, carried
    // into checkpoints so prediction applies identical preprocessing.
    std::array<double, 3> norm_mean = {0.0, 0.0, 0.0};
    std::array<double, 3> norm_std = {1.0, 1.0, 1.0};

    std::size_t channels_of(int ls) const;  // channels of C_ls, ls in [2,5]
    std::size_t spatial_h(int ls) const;
    std::size_t spatial_w(int ls) const;
    // Flattened spatial size of C_ls split across the configured heads.
    std::size_t head_dim(int ls) const;
    std::size_t head_dim(int ls, std::size_t heads) const;
};

// Resolves the mapping preset against a hierarchy depth; validates extents,
// head divisibility and flag consistency, and fills defaults in place.
void validate_config(MdanConfig& config, const std::vector<std::size_t>& level_sizes);

// True when the validated mapping is l_s = 5 - l_a: the configuration that
// supports the dependent attention chain (MHCCA + L-CAM).
bool sequential_mapping(const MdanConfig& config, int depth);

// All learnable weights. Values are finite; classifier row counts match the
// hierarchy level sizes.
struct MdanParams {
    std::vector<Tensor> backbone;        // 4 stage filters, 3x3 stride 2
    std::map<int, Tensor> lateral;       // ls -> [d_F, C_ls, 1, 1]
    std::map<int, Tensor> attn_q;        // key-side ls -> [d_F, d_F, 1, 1]
    std::map<int, Tensor> attn_o;        // key-side ls -> [d_F, d_F, 1, 1]
    std::map<int, Tensor> attn_k;        // optional, [C_ls, C_ls, 1, 1]
    std::map<int, Tensor> attn_v;        // optional, [C_ls, C_ls, 1, 1]
    std::vector<Tensor> local_w;         // per level, [|C_la|, d_F], bias-free
    Tensor global_w;                     // [|C_depth|, c5], bias-free

    static MdanParams init(const MdanConfig& config, const std::vector<std::size_t>& level_sizes,
                           std::uint64_t seed);

    std::vector<std::pair<std::string, Tensor>> named() const;
    std::vector<Tensor> all() const;
    std::vector<Tensor> backbone_group() const;  // the lower-lr tier
    std::vector<Tensor> head_group() const;      // everything newly defined
    std::size_t parameter_count() const;
    void zero_grads() const;
};

struct PredictionSet {
    std::vector<Tensor> local;    // P_L per level, index la-1
    std::vector<Tensor> global_;  // P_G per level
    std::vector<Tensor> overall;  // P_O per level
};

struct AttentionArtifacts {
    // level la -> per-head attention matrices [d_F x C^L]
    std::map<int, std::vector<Tensor>> attention;
    // level la -> fused spatial map in [0,1]
    std::map<int, Tensor> fused_map;
    // level la -> per-child class activation maps, order matches child_classes
    std::map<int, std::vector<Tensor>> child_cams;
    std::map<int, std::vector<std::size_t>> child_classes;
};

struct ForwardResult {
    PredictionSet predictions;
    AttentionArtifacts artifacts;
    std::map<int, Tensor> pyramid;  // ls -> F_ls
    Tensor c5;
};

// --- individual operations (exposed for tests and inspection) ---------------

struct BackbonePyramid {
    std::array<Tensor, 4> c;  // C2..C5
    const Tensor& at(int ls) const { return c.at(static_cast<std::size_t>(ls) - 2); }
};

BackbonePyramid backbone_forward(const Tensor& image, const MdanConfig& config,
                                 const MdanParams& params);

Tensor fpn_fuse(const Tensor& c, const Tensor& f_above, const Tensor& lateral);

struct MhccaResult {
    Tensor out;
    std::vector<Tensor> attention;  // per head, [d_F x C^L]
};

// Cross-channel attention: queries from the 2x-upsampled coarse map, keys and
// values from the fine map, heads partitioning the flattened spatial axis
// into contiguous segments.
MhccaResult mhcca(const Tensor& f_coarse, const Tensor& c_fine, const Tensor& q_filter,
                  const Tensor& o_filter, const Tensor* k_filter, const Tensor* v_filter,
                  std::size_t heads);

Tensor compute_cam(const Tensor& f, const Tensor& w, std::size_t k);
Tensor lcam_fuse(const std::vector<Tensor>& cams, bool mean_on, bool max_on);
Tensor lcam_apply(const Tensor& m, const Tensor& x);
Tensor local_predict(const Tensor& f, const Tensor& w);
Tensor global_predict(const Tensor& c5, const Tensor& g);
Tensor fuse_predictions(const Tensor& p_local, const Tensor& p_global, double alpha);

ForwardResult mdan_forward(const Tensor& image, const MdanParams& params,
                           const MdanConfig& config, const EmotionHierarchy& hierarchy);

// Mean over levels of the cross-entropy of P_O against the per-level truth.
Tensor joint_loss(const std::vector<PredictionSet>& batch, const std::vector<LabelPath>& truths,
                  const EmotionHierarchy& hierarchy);

std::size_t argmax(const std::vector<double>& v);

}  // namespace mdan
