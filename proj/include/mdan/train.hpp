#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdan/hierarchy.hpp"
#include "mdan/model.hpp"
#include "mdan/synthetic.hpp"

namespace mdan {

struct TrainConfig {
    int epochs = 20;
    std::size_t batch_size = 16;
    double lr_new = 0.01;       // newly defined layers
    double lr_backbone = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.001;
    int lr_decay_every = 10;    // epochs between decays
    double lr_decay_factor = 0.1;
    std::uint64_t seed = 7;     // shuffling order, independent of init
};

struct LossPoint {
    int epoch;
    int step;
    double loss;
};

struct TrainResult {
    std::vector<LossPoint> curve;
};

TrainResult train(MdanParams& params, const MdanConfig& config, const EmotionHierarchy& hierarchy,
                  const std::vector<Sample>& data, const TrainConfig& tc);

// Plain-number per-sample predictions, reusable across alpha values.
struct NumericPrediction {
    std::vector<std::vector<double>> local;    // per level
    std::vector<std::vector<double>> global_;  // per level
};

std::vector<NumericPrediction> predict_all(const MdanParams& params, const MdanConfig& config,
                                           const EmotionHierarchy& hierarchy,
                                           const std::vector<Sample>& data);

struct EvalReport {
    double alpha = 0.0;
    std::vector<double> acc_local, acc_global, acc_overall;  // per level
    double violation_rate_local = 0.0;   // mean violations per junction, P_L argmax path
    double violation_rate_overall = 0.0; // same for P_O
    std::vector<ConfusionMatrix> confusion_local;    // per level
    std::vector<ConfusionMatrix> confusion_overall;  // per level
};

EvalReport report_from_predictions(const std::vector<NumericPrediction>& preds,
                                   const std::vector<LabelPath>& truths,
                                   const EmotionHierarchy& hierarchy, double alpha);

EvalReport evaluate(const MdanParams& params, const MdanConfig& config,
                    const EmotionHierarchy& hierarchy, const std::vector<Sample>& data,
                    double alpha);

struct AlphaPoint {
    double alpha;
    std::vector<double> acc_overall;  // per level
};

std::vector<AlphaPoint> alpha_sweep(const MdanParams& params, const MdanConfig& config,
                                    const EmotionHierarchy& hierarchy,
                                    const std::vector<Sample>& data,
                                    const std::vector<double>& grid);

struct MappingChoice {
    std::string name;             // label in the report
    std::string mapping = "e";    // "e", "f" or "table"
    std::map<int, int> mapping_table;
    bool feature_fusion = true;
};

struct MappingExperimentRow {
    MappingChoice choice;
    EvalReport report;
    std::size_t parameter_count = 0;
};

// Trains a fresh model per mapping choice from a fixed seed and evaluates on
// held-out data.
std::vector<MappingExperimentRow> mapping_experiment(
    const MdanConfig& base_config, const EmotionHierarchy& hierarchy,
    const std::vector<Sample>& train_data, const std::vector<Sample>& eval_data,
    const TrainConfig& tc, std::uint64_t init_seed, const std::vector<MappingChoice>& choices);

// Report serialization: JSON-lines (one record per level per prediction
// head), an aggregate CSV row set, and the loss curve as CSV.
std::string report_jsonl(const EvalReport& report, const EmotionHierarchy& hierarchy);
std::string report_csv(const EvalReport& report);
std::string curve_csv(const std::vector<LossPoint>& curve);

}  // namespace mdan
