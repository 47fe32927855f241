#include "mdan/train.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "mdan/errors.hpp"
#include "mdan/optim.hpp"

namespace mdan {

namespace {

void validate_train_config(const TrainConfig& tc) {
    if (tc.epochs < 0 || tc.batch_size == 0 || tc.lr_new < 0 || tc.lr_backbone < 0 ||
        tc.momentum < 0 || tc.weight_decay < 0 || tc.lr_decay_every < 1 ||
        tc.lr_decay_factor <= 0) {
        throw ConfigError("invalid training configuration");
    }
}

// Deterministic Fisher-Yates, independent of library shuffle internals.
void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = rng() % i;
        std::swap(idx[i - 1], idx[j]);
    }
}

}  // namespace

TrainResult train(MdanParams& params, const MdanConfig& config, const EmotionHierarchy& hierarchy,
                  const std::vector<Sample>& data, const TrainConfig& tc) {
    validate_train_config(tc);
    if (data.empty()) throw DataError("train: empty dataset");

    TrainResult result;
    SgdState backbone_opt(params.backbone_group());
    SgdState head_opt(params.head_group());
    std::mt19937_64 shuffle_rng(tc.seed ^ 0xD1B54A32D192ED03ULL);

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const double decay =
            std::pow(tc.lr_decay_factor, static_cast<double>(epoch / tc.lr_decay_every));
        const double lr_b = tc.lr_backbone * decay;
        const double lr_h = tc.lr_new * decay;
        shuffle_indices(order, shuffle_rng);

        int step = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++step) {
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            std::vector<PredictionSet> preds;
            std::vector<LabelPath> truths;
            preds.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = data[order[i]];
                preds.push_back(mdan_forward(s.image, params, config, hierarchy).predictions);
                truths.push_back(s.label);
            }
            Tensor loss = joint_loss(preds, truths, hierarchy);
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(step));
            }
            backward(loss);
            backbone_opt.step(lr_b, tc.momentum, tc.weight_decay);
            head_opt.step(lr_h, tc.momentum, tc.weight_decay);
            result.curve.push_back({epoch, step, loss_value});
        }
    }
    return result;
}

std::vector<NumericPrediction> predict_all(const MdanParams& params, const MdanConfig& config,
                                           const EmotionHierarchy& hierarchy,
                                           const std::vector<Sample>& data) {
    std::vector<NumericPrediction> out;
    out.reserve(data.size());
    for (const Sample& s : data) {
        const ForwardResult fr = mdan_forward(s.image, params, config, hierarchy);
        NumericPrediction np;
        for (const Tensor& t : fr.predictions.local) np.local.push_back(t.values());
        for (const Tensor& t : fr.predictions.global_) np.global_.push_back(t.values());
        out.push_back(std::move(np));
    }
    return out;
}

EvalReport report_from_predictions(const std::vector<NumericPrediction>& preds,
                                   const std::vector<LabelPath>& truths,
                                   const EmotionHierarchy& hierarchy, double alpha) {
    if (preds.size() != truths.size() || preds.empty()) {
        throw ContractError("report: predictions and truths must align and be non-empty");
    }
    const int depth = hierarchy.depth();
    EvalReport report;
    report.alpha = alpha;
    report.acc_local.assign(static_cast<std::size_t>(depth), 0.0);
    report.acc_global.assign(static_cast<std::size_t>(depth), 0.0);
    report.acc_overall.assign(static_cast<std::size_t>(depth), 0.0);

    std::vector<std::vector<std::size_t>> arg_local(depth), arg_global(depth), arg_overall(depth);
    for (const NumericPrediction& np : preds) {
        for (int la = 1; la <= depth; ++la) {
            const std::size_t i = static_cast<std::size_t>(la) - 1;
            const std::vector<double>& pl = np.local[i];
            const std::vector<double>& pg = np.global_[i];
            std::vector<double> po(pl.size());
            for (std::size_t j = 0; j < pl.size(); ++j)
                po[j] = alpha * pl[j] + (1.0 - alpha) * pg[j];
            arg_local[i].push_back(argmax(pl));
            arg_global[i].push_back(argmax(pg));
            arg_overall[i].push_back(argmax(po));
        }
    }

    std::size_t viol_local = 0, viol_overall = 0;
    const std::size_t junctions = static_cast<std::size_t>(std::max(depth - 1, 1));
    for (std::size_t s = 0; s < preds.size(); ++s) {
        for (int la = 1; la <= depth; ++la) {
            const std::size_t i = static_cast<std::size_t>(la) - 1;
            const std::size_t truth = truths[s].at(la);
            if (arg_local[i][s] == truth) report.acc_local[i] += 1.0;
            if (arg_global[i][s] == truth) report.acc_global[i] += 1.0;
            if (arg_overall[i][s] == truth) report.acc_overall[i] += 1.0;
        }
        if (depth >= 2) {
            LabelPath pl, po;
            for (int la = 1; la <= depth; ++la) {
                pl.index_at_level.push_back(arg_local[static_cast<std::size_t>(la) - 1][s]);
                po.index_at_level.push_back(arg_overall[static_cast<std::size_t>(la) - 1][s]);
            }
            viol_local += static_cast<std::size_t>(hierarchy.violation_count(pl));
            viol_overall += static_cast<std::size_t>(hierarchy.violation_count(po));
        }
    }
    const double n = static_cast<double>(preds.size());
    for (int la = 1; la <= depth; ++la) {
        const std::size_t i = static_cast<std::size_t>(la) - 1;
        report.acc_local[i] /= n;
        report.acc_global[i] /= n;
        report.acc_overall[i] /= n;
    }
    report.violation_rate_local = static_cast<double>(viol_local) / (n * junctions);
    report.violation_rate_overall = static_cast<double>(viol_overall) / (n * junctions);

    std::vector<std::size_t> truth_col;
    for (int la = 1; la <= depth; ++la) {
        const std::size_t i = static_cast<std::size_t>(la) - 1;
        truth_col.clear();
        for (const LabelPath& t : truths) truth_col.push_back(t.at(la));
        report.confusion_local.push_back(hierarchical_confusion(hierarchy, la, truth_col,
                                                                arg_local[i]));
        report.confusion_overall.push_back(hierarchical_confusion(hierarchy, la, truth_col,
                                                                  arg_overall[i]));
    }
    return report;
}

EvalReport evaluate(const MdanParams& params, const MdanConfig& config,
                    const EmotionHierarchy& hierarchy, const std::vector<Sample>& data,
                    double alpha) {
    std::vector<LabelPath> truths;
    truths.reserve(data.size());
    for (const Sample& s : data) truths.push_back(s.label);
    return report_from_predictions(predict_all(params, config, hierarchy, data), truths,
                                   hierarchy, alpha);
}

std::vector<AlphaPoint> alpha_sweep(const MdanParams& params, const MdanConfig& config,
                                    const EmotionHierarchy& hierarchy,
                                    const std::vector<Sample>& data,
                                    const std::vector<double>& grid) {
    std::vector<LabelPath> truths;
    truths.reserve(data.size());
    for (const Sample& s : data) truths.push_back(s.label);
    const auto preds = predict_all(params, config, hierarchy, data);

    std::vector<AlphaPoint> curve;
    for (double alpha : grid) {
        const EvalReport r = report_from_predictions(preds, truths, hierarchy, alpha);
        curve.push_back({alpha, r.acc_overall});
    }
    return curve;
}

std::vector<MappingExperimentRow> mapping_experiment(
    const MdanConfig& base_config, const EmotionHierarchy& hierarchy,
    const std::vector<Sample>& train_data, const std::vector<Sample>& eval_data,
    const TrainConfig& tc, std::uint64_t init_seed, const std::vector<MappingChoice>& choices) {
    std::vector<MappingExperimentRow> rows;
    for (const MappingChoice& choice : choices) {
        MdanConfig config = base_config;
        config.mapping = choice.mapping;
        config.mapping_table = choice.mapping_table;
        config.feature_fusion = choice.feature_fusion;
        validate_config(config, hierarchy.level_sizes());

        MdanParams params = MdanParams::init(config, hierarchy.level_sizes(), init_seed);
        train(params, config, hierarchy, train_data, tc);
        MappingExperimentRow row;
        row.choice = choice;
        row.report = evaluate(params, config, hierarchy, eval_data, config.alpha);
        row.parameter_count = params.parameter_count();
        rows.push_back(std::move(row));
    }
    return rows;
}

// --- report serialization -------------------------------------------------------

namespace {

std::string json_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out;
}

void jsonl_record(std::ostringstream& os, const EvalReport& report,
                  const EmotionHierarchy& hierarchy, int la, const char* head, double accuracy,
                  const ConfusionMatrix* cm) {
    os << "{\"level\":" << la << ",\"head\":\"" << head << "\",\"alpha\":" << report.alpha
       << ",\"accuracy\":" << accuracy;
    if (cm) {
        os << ",\"cross_parent_error_fraction\":" << cm->cross_parent_error_fraction
           << ",\"confusion\":[";
        for (std::size_t i = 0; i < cm->counts.size(); ++i) {
            if (i) os << ",";
            os << cm->counts[i];
        }
        os << "],\"classes\":[";
        for (std::size_t i = 0; i < cm->classes; ++i) {
            if (i) os << ",";
            os << "\"" << json_escape(hierarchy.class_name(la, i)) << "\"";
        }
        os << "]";
    }
    os << "}\n";
}

}  // namespace

std::string report_jsonl(const EvalReport& report, const EmotionHierarchy& hierarchy) {
    std::ostringstream os;
    const int depth = static_cast<int>(report.acc_local.size());
    for (int la = 1; la <= depth; ++la) {
        const std::size_t i = static_cast<std::size_t>(la) - 1;
        jsonl_record(os, report, hierarchy, la, "local", report.acc_local[i],
                     &report.confusion_local[i]);
        jsonl_record(os, report, hierarchy, la, "global", report.acc_global[i], nullptr);
        jsonl_record(os, report, hierarchy, la, "overall", report.acc_overall[i],
                     &report.confusion_overall[i]);
    }
    os << "{\"head\":\"violations\",\"local\":" << report.violation_rate_local
       << ",\"overall\":" << report.violation_rate_overall << "}\n";
    return os.str();
}

std::string report_csv(const EvalReport& report) {
    std::ostringstream os;
    os << "level,head,alpha,accuracy\n";
    const int depth = static_cast<int>(report.acc_local.size());
    for (int la = 1; la <= depth; ++la) {
        const std::size_t i = static_cast<std::size_t>(la) - 1;
        os << la << ",local," << report.alpha << "," << report.acc_local[i] << "\n";
        os << la << ",global," << report.alpha << "," << report.acc_global[i] << "\n";
        os << la << ",overall," << report.alpha << "," << report.acc_overall[i] << "\n";
    }
    return os.str();
}

std::string curve_csv(const std::vector<LossPoint>& curve) {
    std::ostringstream os;
    os << "epoch,step,loss\n";
    for (const LossPoint& p : curve) os << p.epoch << "," << p.step << "," << p.loss << "\n";
    return os.str();
}

}  // namespace mdan
