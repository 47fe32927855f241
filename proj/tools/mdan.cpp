// Command line front end: dataset generation, training, evaluation,
// prediction, activation map export, gradient checking and sweeps.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mdan/checkpoint.hpp"
#include "mdan/errors.hpp"
#include "mdan/grad_check.hpp"
#include "mdan/image_io.hpp"
#include "mdan/model.hpp"
#include "mdan/synthetic.hpp"
#include "mdan/tensor_io.hpp"
#include "mdan/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string hierarchy_path;
    std::string data_path;  // dataset index; empty means synthetic
    std::size_t samples = 50;
    std::uint64_t gen_seed = 7;
    std::size_t input = 64;
};

void add_data_options(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--hierarchy", o.hierarchy_path, "hierarchy TSV file")->required();
    cmd->add_option("--data", o.data_path, "dataset index (default: synthetic images)");
    cmd->add_option("--samples", o.samples, "synthetic samples per leaf class");
    cmd->add_option("--gen-seed", o.gen_seed, "synthetic data seed");
}

mdan::MdanConfig make_config(const CommonOpts& o, const std::string& mapping,
                             const std::string& heads, const std::vector<std::string>& ablate,
                             double alpha) {
    mdan::MdanConfig config;
    config.input_h = config.input_w = o.input;
    config.alpha = alpha;

    if (mapping == "e" || mapping == "f") {
        config.mapping = mapping;
    } else if (mapping.rfind("file:", 0) == 0) {
        const std::string path = mapping.substr(5);
        std::ifstream in(path);
        if (!in) throw mdan::DataError("cannot open mapping file: " + path);
        config.mapping = "table";
        int la = 0, ls = 0;
        while (in >> la >> ls) config.mapping_table[la] = ls;
        if (config.mapping_table.empty()) {
            throw mdan::ParseError(path + ": expected 'la ls' pairs");
        }
    } else {
        throw mdan::ConfigError("unknown mapping '" + mapping + "' (use e, f or file:PATH)");
    }

    if (!heads.empty()) {
        std::istringstream ss(heads);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto colon = item.find(':');
            if (colon == std::string::npos) {
                throw mdan::ConfigError("heads must be 'ls:h' pairs, got '" + item + "'");
            }
            config.heads[std::stoi(item.substr(0, colon))] =
                std::stoul(item.substr(colon + 1));
        }
    }

    for (const std::string& a : ablate) {
        if (a == "mhcca") config.mhcca_on = false;
        else if (a == "lcam-mean") config.lcam_mean_on = false;
        else if (a == "lcam-max") config.lcam_max_on = false;
        else if (a == "upsample-add") config.upsample_add_on = false;
        else if (a == "fusion") config.feature_fusion = false;
        else if (a == "kv") config.kv_projections_on = false;
        else throw mdan::ConfigError("unknown ablation '" + a + "'");
    }
    return config;
}

// Loads the index and normalizes with the supplied stats (the ones the model
// was or will be trained with), ignoring the stats stored in the index.
std::vector<mdan::Sample> load_with_stats(const std::string& index_path,
                                          const mdan::EmotionHierarchy& hierarchy,
                                          const mdan::ChannelStats& stats) {
    const mdan::DatasetIndex index = mdan::read_dataset_index(index_path);
    const fs::path base = fs::path(index_path).parent_path();
    std::vector<mdan::Sample> samples;
    samples.reserve(index.entries.size());
    for (const auto& [file, leaf] : index.entries) {
        mdan::Sample s;
        s.image = mdan::normalize_image(mdan::read_ppm((base / file).string()), stats);
        s.label = hierarchy.leaf_to_path(hierarchy.class_index(hierarchy.depth(), leaf));
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<mdan::Sample> eval_data(const CommonOpts& o, const mdan::EmotionHierarchy& hierarchy,
                                    const mdan::MdanConfig& config) {
    mdan::ChannelStats stats;
    stats.mean = config.norm_mean;
    stats.stddev = config.norm_std;
    if (!o.data_path.empty()) return load_with_stats(o.data_path, hierarchy, stats);
    mdan::SyntheticSpec spec;
    spec.image_h = config.input_h;
    spec.image_w = config.input_w;
    spec.samples_per_class = o.samples;
    spec.seed = o.gen_seed;
    std::vector<mdan::Sample> samples = mdan::generate_dataset(spec, hierarchy);
    mdan::normalize_in_place(samples, stats);
    return samples;
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        mdan::atomic_write_file(path, text);
    }
}

// Nearest-neighbor upscale of a [h,w] map by an integer factor, for export at
// input resolution.
mdan::Tensor upscale_nearest(const mdan::Tensor& m, std::size_t factor) {
    const std::size_t h = m.shape()[0], w = m.shape()[1];
    std::vector<double> out(h * factor * w * factor);
    const double* d = m.values().data();
    for (std::size_t y = 0; y < h * factor; ++y) {
        for (std::size_t x = 0; x < w * factor; ++x) {
            out[y * w * factor + x] = d[(y / factor) * w + x / factor];
        }
    }
    return mdan::Tensor({h * factor, w * factor}, std::move(out));
}

int run_gen_data(const CommonOpts& o, const std::string& out_dir) {
    const mdan::EmotionHierarchy hierarchy = mdan::EmotionHierarchy::load(o.hierarchy_path);
    mdan::SyntheticSpec spec;
    spec.image_h = spec.image_w = o.input;
    spec.samples_per_class = o.samples;
    spec.seed = o.gen_seed;
    const std::vector<mdan::Sample> samples = mdan::generate_dataset(spec, hierarchy);

    fs::create_directories(out_dir);
    mdan::DatasetIndex index;
    index.stats = mdan::compute_channel_stats(samples);
    const int depth = hierarchy.depth();
    std::map<std::string, std::size_t> counters;
    for (const mdan::Sample& s : samples) {
        const std::string leaf = hierarchy.class_name(depth, s.label.at(depth));
        const std::string file = leaf + "_" + std::to_string(counters[leaf]++) + ".ppm";
        mdan::write_ppm((fs::path(out_dir) / file).string(), s.image);
        index.entries.emplace_back(file, leaf);
    }
    mdan::write_dataset_index((fs::path(out_dir) / "index.tsv").string(), index);
    std::cout << "wrote " << samples.size() << " images to " << out_dir << "\n";
    return 0;
}

int run_train(const CommonOpts& o, const mdan::MdanConfig& base_config,
              const mdan::TrainConfig& tc, std::uint64_t init_seed, const std::string& out_path,
              const std::string& curve_path) {
    const mdan::EmotionHierarchy hierarchy = mdan::EmotionHierarchy::load(o.hierarchy_path);
    mdan::MdanConfig config = base_config;

    std::vector<mdan::Sample> data;
    if (!o.data_path.empty()) {
        const mdan::DatasetIndex index = mdan::read_dataset_index(o.data_path);
        config.norm_mean = index.stats.mean;
        config.norm_std = index.stats.stddev;
        mdan::ChannelStats stats{index.stats.mean, index.stats.stddev};
        data = load_with_stats(o.data_path, hierarchy, stats);
    } else {
        mdan::SyntheticSpec spec;
        spec.image_h = config.input_h;
        spec.image_w = config.input_w;
        spec.samples_per_class = o.samples;
        spec.seed = o.gen_seed;
        data = mdan::generate_dataset(spec, hierarchy);
        const mdan::ChannelStats stats = mdan::compute_channel_stats(data);
        config.norm_mean = stats.mean;
        config.norm_std = stats.stddev;
        mdan::normalize_in_place(data, stats);
    }

    mdan::validate_config(config, hierarchy.level_sizes());
    mdan::MdanParams params = mdan::MdanParams::init(config, hierarchy.level_sizes(), init_seed);
    const mdan::TrainResult result = mdan::train(params, config, hierarchy, data, tc);
    mdan::save_checkpoint(out_path, config, hierarchy.level_sizes(), params);

    if (!curve_path.empty()) write_text(curve_path, mdan::curve_csv(result.curve));
    if (!result.curve.empty()) {
        std::cout << "final loss " << result.curve.back().loss << " after " << tc.epochs
                  << " epochs; checkpoint " << out_path << "\n";
    } else {
        std::cout << "no training steps taken; checkpoint " << out_path << "\n";
    }
    return 0;
}

int run_eval(const CommonOpts& o, const std::string& ckpt_path, double alpha_override,
             bool has_alpha, const std::string& format, const std::string& out_path) {
    const mdan::EmotionHierarchy hierarchy = mdan::EmotionHierarchy::load(o.hierarchy_path);
    const mdan::Checkpoint ckpt = mdan::load_checkpoint(ckpt_path);
    if (ckpt.level_sizes != hierarchy.level_sizes()) {
        throw mdan::ConfigError("checkpoint level sizes do not match the hierarchy");
    }
    const double alpha = has_alpha ? alpha_override : ckpt.config.alpha;
    const std::vector<mdan::Sample> data = eval_data(o, hierarchy, ckpt.config);
    const mdan::EvalReport report =
        mdan::evaluate(ckpt.params, ckpt.config, hierarchy, data, alpha);
    write_text(out_path,
               format == "csv" ? mdan::report_csv(report) : mdan::report_jsonl(report, hierarchy));
    return 0;
}

int run_predict(const std::string& hierarchy_path, const std::string& ckpt_path,
                const std::string& image_path, const std::string& out_path) {
    const mdan::EmotionHierarchy hierarchy = mdan::EmotionHierarchy::load(hierarchy_path);
    const mdan::Checkpoint ckpt = mdan::load_checkpoint(ckpt_path);
    if (ckpt.level_sizes != hierarchy.level_sizes()) {
        throw mdan::ConfigError("checkpoint level sizes do not match the hierarchy");
    }
    mdan::ChannelStats stats{ckpt.config.norm_mean, ckpt.config.norm_std};
    const mdan::Tensor image =
        mdan::normalize_image(mdan::read_ppm(image_path), stats);
    const mdan::ForwardResult fr =
        mdan::mdan_forward(image, ckpt.params, ckpt.config, hierarchy);

    json out;
    out["image"] = image_path;
    out["alpha"] = ckpt.config.alpha;
    json levels = json::array();
    mdan::LabelPath overall_path;
    for (int la = 1; la <= hierarchy.depth(); ++la) {
        const std::size_t i = static_cast<std::size_t>(la) - 1;
        json rec;
        rec["level"] = la;
        rec["local"] = fr.predictions.local[i].values();
        rec["global"] = fr.predictions.global_[i].values();
        rec["overall"] = fr.predictions.overall[i].values();
        const std::size_t pick = mdan::argmax(fr.predictions.overall[i].values());
        rec["predicted"] = hierarchy.class_name(la, pick);
        rec["classes"] = [&] {
            std::vector<std::string> names;
            for (std::size_t k = 0; k < hierarchy.level_size(la); ++k)
                names.push_back(hierarchy.class_name(la, k));
            return names;
        }();
        overall_path.index_at_level.push_back(pick);
        levels.push_back(std::move(rec));
    }
    out["levels"] = std::move(levels);
    out["hierarchy_violations"] = hierarchy.violation_count(overall_path);
    write_text(out_path, out.dump(2) + "\n");
    return 0;
}

int run_export_cam(const std::string& hierarchy_path, const std::string& ckpt_path,
                   const std::string& image_path, const std::string& out_dir) {
    const mdan::EmotionHierarchy hierarchy = mdan::EmotionHierarchy::load(hierarchy_path);
    const mdan::Checkpoint ckpt = mdan::load_checkpoint(ckpt_path);
    mdan::ChannelStats stats{ckpt.config.norm_mean, ckpt.config.norm_std};
    const mdan::Tensor image = mdan::normalize_image(mdan::read_ppm(image_path), stats);
    const mdan::ForwardResult fr =
        mdan::mdan_forward(image, ckpt.params, ckpt.config, hierarchy);
    if (fr.artifacts.fused_map.empty()) {
        throw mdan::ConfigError("this checkpoint was trained without localized activation maps");
    }

    fs::create_directories(out_dir);
    std::size_t written = 0;
    for (const auto& [la, m] : fr.artifacts.fused_map) {
        const std::size_t factor = ckpt.config.input_h / m.shape()[0];
        mdan::write_pgm(
            (fs::path(out_dir) / ("fused_level" + std::to_string(la) + ".pgm")).string(),
            upscale_nearest(m, factor));
        ++written;
        const auto& cams = fr.artifacts.child_cams.at(la);
        const auto& classes = fr.artifacts.child_classes.at(la);
        for (std::size_t i = 0; i < cams.size(); ++i) {
            const std::string name = hierarchy.class_name(la, classes[i]);
            mdan::write_pgm((fs::path(out_dir) /
                             ("cam_level" + std::to_string(la) + "_" + name + ".pgm"))
                                .string(),
                            upscale_nearest(cams[i], factor));
            ++written;
        }
    }
    std::cout << "wrote " << written << " maps to " << out_dir << "\n";
    return 0;
}

int run_grad_check(bool inject_fault) {
    using mdan::Tensor;
    const double tol = 1e-6;
    double worst = 0.0;
    auto record = [&](const std::string& name, double err) {
        std::cout << name << ": max relative error " << err << "\n";
        worst = std::max(worst, err);
    };

    std::mt19937_64 rng(11);
    auto randn = [&](mdan::Shape shape) {
        std::vector<double> d(mdan::shape_numel(shape));
        std::normal_distribution<double> dist(0.0, 0.5);
        for (double& v : d) v = dist(rng);
        return Tensor(std::move(shape), std::move(d), true);
    };

    Tensor x = randn({2, 6, 6});
    Tensor w = randn({3, 2, 3, 3});
    record("conv3x3", mdan::grad_check(
                          [&](const Tensor& t) { return mdan::sum(mdan::conv2d(t, w, 2, 1)); }, x));
    record("matmul", mdan::grad_check(
                         [&](const Tensor& t) {
                             return mdan::sum(mdan::matmul(mdan::reshape(t, {4, 18}),
                                                           mdan::transpose2d(mdan::reshape(t, {4, 18}))));
                         },
                         x));
    record("upsample", mdan::grad_check(
                           [&](const Tensor& t) {
                               return mdan::sum(mdan::relu(mdan::upsample_bilinear_2x(t)));
                           },
                           x));
    // The cross entropy check compares the analytic sweep against central
    // differences by hand so a fault can be injected into the analytic side.
    {
        Tensor logits = randn({3, 4});
        const std::vector<std::size_t> y = {1, 0, 3};
        auto loss_at = [&](const std::vector<double>& v) {
            Tensor t({3, 4}, v);
            return mdan::cross_entropy(mdan::softmax_lastdim(t), y).item();
        };
        Tensor leaf({3, 4}, logits.values(), true);
        mdan::backward(mdan::cross_entropy(mdan::softmax_lastdim(leaf), y));
        std::vector<double> analytic = leaf.grad();
        if (inject_fault) {
            for (double& g : analytic) g = -g;
        }
        std::vector<double> numeric(analytic.size());
        const double h = 1e-6;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            std::vector<double> lo = logits.values(), hi = logits.values();
            lo[i] -= h;
            hi[i] += h;
            numeric[i] = (loss_at(hi) - loss_at(lo)) / (2.0 * h);
        }
        record("softmax+nll", mdan::max_relative_error(analytic, numeric));
    }

    if (worst > tol) {
        throw mdan::NumericError("gradient check failed: worst relative error " +
                                 std::to_string(worst) + " exceeds " + std::to_string(tol));
    }
    std::cout << "all gradient checks passed (tolerance " << tol << ")\n";
    return 0;
}

int run_sweep_alpha(const CommonOpts& o, const std::string& ckpt_path, int steps,
                    const std::string& out_path) {
    const mdan::EmotionHierarchy hierarchy = mdan::EmotionHierarchy::load(o.hierarchy_path);
    const mdan::Checkpoint ckpt = mdan::load_checkpoint(ckpt_path);
    const std::vector<mdan::Sample> data = eval_data(o, hierarchy, ckpt.config);
    std::vector<double> grid;
    for (int i = 0; i <= steps; ++i) grid.push_back(static_cast<double>(i) / steps);
    const auto curve =
        mdan::alpha_sweep(ckpt.params, ckpt.config, hierarchy, data, grid);

    std::ostringstream os;
    os << "alpha";
    for (int la = 1; la <= hierarchy.depth(); ++la) os << ",acc_overall_l" << la;
    os << "\n";
    for (const mdan::AlphaPoint& p : curve) {
        os << p.alpha;
        for (double a : p.acc_overall) os << "," << a;
        os << "\n";
    }
    write_text(out_path, os.str());
    return 0;
}

int run_sweep_mapping(const CommonOpts& o, const mdan::MdanConfig& base_config,
                      const mdan::TrainConfig& tc, std::uint64_t init_seed,
                      const std::string& out_path) {
    const mdan::EmotionHierarchy hierarchy = mdan::EmotionHierarchy::load(o.hierarchy_path);
    mdan::SyntheticSpec spec;
    spec.image_h = base_config.input_h;
    spec.image_w = base_config.input_w;
    spec.samples_per_class = o.samples;
    spec.seed = o.gen_seed;
    std::vector<mdan::Sample> train_data = mdan::generate_dataset(spec, hierarchy);
    spec.seed = o.gen_seed + 1;
    std::vector<mdan::Sample> test_data = mdan::generate_dataset(spec, hierarchy);
    const mdan::ChannelStats stats = mdan::compute_channel_stats(train_data);
    mdan::normalize_in_place(train_data, stats);
    mdan::normalize_in_place(test_data, stats);

    std::vector<mdan::MappingChoice> choices = {
        {"sequential+fusion", "e", {}, true},
        {"reversed+fusion", "f", {}, true},
        {"sequential", "e", {}, false},
    };
    const auto rows = mdan::mapping_experiment(base_config, hierarchy, train_data, test_data, tc,
                                               init_seed, choices);
    std::ostringstream os;
    os << "mapping,feature_fusion,parameters";
    for (int la = 1; la <= hierarchy.depth(); ++la) os << ",acc_overall_l" << la;
    os << "\n";
    for (const auto& row : rows) {
        os << row.choice.name << "," << (row.choice.feature_fusion ? 1 : 0) << ","
           << row.parameter_count;
        for (double a : row.report.acc_overall) os << "," << a;
        os << "\n";
    }
    write_text(out_path, os.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-branch hierarchical emotion classifier"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string mapping = "e", heads, out_path, curve_path, ckpt_path, image_path, format = "jsonl";
    std::vector<std::string> ablate;
    double alpha = 0.7;
    bool inject_fault = false;
    int sweep_steps = 10;
    std::uint64_t init_seed = 7;
    mdan::TrainConfig tc;

    auto* gen = app.add_subcommand("gen-data", "write a synthetic PPM dataset with an index");
    add_data_options(gen, opts);
    gen->add_option("--input", opts.input, "square image size");
    gen->add_option("--out", out_path, "output directory")->required();

    auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
    add_data_options(train_cmd, opts);
    train_cmd->add_option("--out", out_path, "checkpoint path")->required();
    train_cmd->add_option("--curve", curve_path, "write the loss curve CSV here");
    train_cmd->add_option("--input", opts.input, "square input size");
    train_cmd->add_option("--mapping", mapping, "e, f or file:PATH");
    train_cmd->add_option("--heads", heads, "attention heads, 'ls:h' pairs");
    train_cmd->add_option("--alpha", alpha, "local prediction weight");
    train_cmd->add_option("--ablate", ablate,
                          "disable parts: mhcca lcam-mean lcam-max upsample-add fusion kv");
    train_cmd->add_option("--epochs", tc.epochs, "training epochs");
    train_cmd->add_option("--batch", tc.batch_size, "batch size");
    train_cmd->add_option("--lr", tc.lr_new, "learning rate of the new layers");
    train_cmd->add_option("--seed", init_seed, "weight init and shuffle seed");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    add_data_options(eval_cmd, opts);
    eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    auto* alpha_opt = eval_cmd->add_option("--alpha", alpha, "override the stored alpha");
    eval_cmd->add_option("--format", format, "jsonl or csv")
        ->check(CLI::IsMember({"jsonl", "csv"}));
    eval_cmd->add_option("--out", out_path, "report path (default stdout)");

    auto* predict_cmd = app.add_subcommand("predict", "classify one PPM image, JSON output");
    predict_cmd->add_option("--hierarchy", opts.hierarchy_path, "hierarchy TSV file")->required();
    predict_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    predict_cmd->add_option("--image", image_path, "PPM image")->required();
    predict_cmd->add_option("--out", out_path, "JSON path (default stdout)");

    auto* cam_cmd = app.add_subcommand("export-cam", "write activation maps as PGM images");
    cam_cmd->add_option("--hierarchy", opts.hierarchy_path, "hierarchy TSV file")->required();
    cam_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    cam_cmd->add_option("--image", image_path, "PPM image")->required();
    cam_cmd->add_option("--out", out_path, "output directory")->required();

    auto* grad_cmd = app.add_subcommand("grad-check", "run the built-in gradient suite");
    grad_cmd->add_flag("--inject-fault", inject_fault, "force a failure (exercises exit code 3)");

    auto* sa_cmd = app.add_subcommand("sweep-alpha", "overall accuracy across the alpha grid");
    add_data_options(sa_cmd, opts);
    sa_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    sa_cmd->add_option("--steps", sweep_steps, "grid resolution")->check(CLI::PositiveNumber);
    sa_cmd->add_option("--out", out_path, "CSV path (default stdout)");

    auto* sm_cmd = app.add_subcommand("sweep-mapping", "train and compare mapping choices");
    add_data_options(sm_cmd, opts);
    sm_cmd->add_option("--input", opts.input, "square input size");
    sm_cmd->add_option("--epochs", tc.epochs, "training epochs per choice");
    sm_cmd->add_option("--batch", tc.batch_size, "batch size");
    sm_cmd->add_option("--seed", init_seed, "weight init and shuffle seed");
    sm_cmd->add_option("--out", out_path, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        tc.seed = init_seed;
        tc.lr_backbone = tc.lr_new / 10.0;
        if (gen->parsed()) return run_gen_data(opts, out_path);
        if (train_cmd->parsed()) {
            return run_train(opts, make_config(opts, mapping, heads, ablate, alpha), tc, init_seed,
                             out_path, curve_path);
        }
        if (eval_cmd->parsed()) {
            return run_eval(opts, ckpt_path, alpha, alpha_opt->count() > 0, format, out_path);
        }
        if (predict_cmd->parsed()) {
            return run_predict(opts.hierarchy_path, ckpt_path, image_path, out_path);
        }
        if (cam_cmd->parsed()) {
            return run_export_cam(opts.hierarchy_path, ckpt_path, image_path, out_path);
        }
        if (grad_cmd->parsed()) return run_grad_check(inject_fault);
        if (sa_cmd->parsed()) return run_sweep_alpha(opts, ckpt_path, sweep_steps, out_path);
        if (sm_cmd->parsed()) {
            mdan::MdanConfig config;
            config.input_h = config.input_w = opts.input;
            return run_sweep_mapping(opts, config, tc, init_seed, out_path);
        }
        return 1;
    } catch (const mdan::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mdan::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
