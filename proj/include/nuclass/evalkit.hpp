// Metrics and report surface: aggregated metrics, both confusion-matrix
// normalizations, one-vs-rest ROC/AUC, resource profile, and rendering.
#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nuclass/common.hpp"

namespace nuclass::evalkit {

struct LabeledPrediction {
    uint64_t event_id = 0;
    InteractionClass truth = InteractionClass::NC;
    InteractionClass predicted = InteractionClass::NC;
    std::array<double, 3> confidences = {0, 0, 0}; // sums to 1 within 1e-6
    double latency_ms = 0;
};

using Matrix3 = std::array<std::array<double, 3>, 3>;

enum class Normalization { Truth, Prediction };

struct ConfusionResult {
    Matrix3 counts{};     // rows = truth, columns = predicted
    Matrix3 normalized{}; // per the requested axis
    std::array<bool, 3> empty_marginal = {false, false, false};
};

ConfusionResult confusion(const std::vector<LabeledPrediction>& preds, Normalization norm);

struct AggregateMetrics {
    double accuracy = 0;
    double macro_precision = 0;
    double macro_recall = 0;
    double micro_precision = 0;
    double micro_recall = 0;
    // Classes skipped from a macro mean because their marginal is empty.
    std::vector<std::string> warnings;
};

AggregateMetrics aggregate_metrics(const std::vector<LabeledPrediction>& preds);

struct RocCurve {
    std::vector<std::pair<double, double>> points; // (FPR, TPR)
    double auc = 0;
};

// One-vs-rest ROC over all distinct score thresholds, AUC by trapezoid.
// Throws InvalidInputError when the class has no positives or no negatives.
RocCurve roc_auc(const std::vector<LabeledPrediction>& preds, int class_index);

struct ResourceProfile {
    double memory_mb = 0;     // peak resident set during measurement
    double ms_per_sample = 0; // mean over measured inferences
    std::optional<double> ms_stddev;
};

ResourceProfile resource_profile(const std::function<void(const PixelMapPair&)>& classify,
                                 const std::vector<PixelMapPair>& samples, int n_warmup,
                                 int n_measure);

struct MetricsReport {
    std::string model_tag;
    uint64_t split_hash = 0;
    AggregateMetrics aggregate;
    double macro_auc = 0; // unweighted mean of per-class one-vs-rest AUCs
    std::array<double, 3> per_class_auc = {0, 0, 0};
    Matrix3 recall_matrix{};
    Matrix3 precision_matrix{};
    std::array<RocCurve, 3> roc_curves;
    double memory_mb = 0;
    double ms_per_sample = 0;

    std::string to_json() const;
    static MetricsReport from_json(const std::string& text);
};

MetricsReport compute_report(const std::vector<LabeledPrediction>& preds,
                             const std::string& model_tag, uint64_t split_hash);

// Writes the paired report surface: metrics table (text), two confusion
// images per model, three per-class ROC overlays, and machine-readable
// metrics. Refuses reports computed on different splits.
std::vector<std::filesystem::path> render_report(const MetricsReport& model_a,
                                                 const MetricsReport& model_b,
                                                 const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Predictions file: one JSON record per line after a header line carrying
// the model tag and split hash. The model-agnostic boundary between
// inference and evaluation.
// ---------------------------------------------------------------------------

void write_predictions(const std::filesystem::path& path, const std::string& model_tag,
                       uint64_t split_hash, const std::vector<LabeledPrediction>& preds);

struct PredictionsFile {
    std::string model_tag;
    uint64_t split_hash = 0;
    std::vector<LabeledPrediction> preds;
};

PredictionsFile read_predictions(const std::filesystem::path& path);

} // namespace nuclass::evalkit
