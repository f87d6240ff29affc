#include "nuclass/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace nuclass::evalkit {

namespace {

void check_nonempty(const std::vector<LabeledPrediction>& preds) {
    if (preds.empty()) throw InvalidInputError("metrics require a nonempty prediction set");
}

} // namespace

ConfusionResult confusion(const std::vector<LabeledPrediction>& preds, Normalization norm) {
    check_nonempty(preds);
    ConfusionResult res;
    for (const auto& p : preds)
        res.counts[static_cast<int>(p.truth)][static_cast<int>(p.predicted)] += 1.0;

    if (norm == Normalization::Truth) {
        for (int r = 0; r < 3; ++r) {
            double row = 0;
            for (int c = 0; c < 3; ++c) row += res.counts[r][c];
            if (row == 0) {
                res.empty_marginal[r] = true; // left as zeros, flagged
                continue;
            }
            for (int c = 0; c < 3; ++c) res.normalized[r][c] = res.counts[r][c] / row;
        }
    } else {
        for (int c = 0; c < 3; ++c) {
            double col = 0;
            for (int r = 0; r < 3; ++r) col += res.counts[r][c];
            if (col == 0) {
                res.empty_marginal[c] = true;
                continue;
            }
            for (int r = 0; r < 3; ++r) res.normalized[r][c] = res.counts[r][c] / col;
        }
    }
    return res;
}

AggregateMetrics aggregate_metrics(const std::vector<LabeledPrediction>& preds) {
    check_nonempty(preds);
    AggregateMetrics m;
    double correct = 0;
    std::array<double, 3> tp{}, truth_n{}, pred_n{};
    for (const auto& p : preds) {
        int t = static_cast<int>(p.truth), q = static_cast<int>(p.predicted);
        truth_n[t] += 1;
        pred_n[q] += 1;
        if (t == q) {
            correct += 1;
            tp[t] += 1;
        }
    }
    m.accuracy = correct / static_cast<double>(preds.size());

    // Macro over classes present in the respective marginal; absent classes
    // are excluded from the mean with a warning rather than counted as zero.
    double prec_sum = 0, rec_sum = 0;
    int prec_n = 0, rec_n = 0;
    for (int c = 0; c < 3; ++c) {
        if (pred_n[c] > 0) {
            prec_sum += tp[c] / pred_n[c];
            ++prec_n;
        } else {
            m.warnings.push_back(std::string("precision undefined for never-predicted class ") +
                                 class_name(static_cast<InteractionClass>(c)));
        }
        if (truth_n[c] > 0) {
            rec_sum += tp[c] / truth_n[c];
            ++rec_n;
        } else {
            m.warnings.push_back(std::string("recall undefined for absent truth class ") +
                                 class_name(static_cast<InteractionClass>(c)));
        }
    }
    m.macro_precision = prec_n ? prec_sum / prec_n : 0;
    m.macro_recall = rec_n ? rec_sum / rec_n : 0;
    // Micro precision == micro recall == accuracy for single-label
    // multiclass; emitted anyway for the machine-readable report.
    m.micro_precision = m.accuracy;
    m.micro_recall = m.accuracy;
    return m;
}

RocCurve roc_auc(const std::vector<LabeledPrediction>& preds, int class_index) {
    check_nonempty(preds);
    if (class_index < 0 || class_index >= 3) throw InvalidInputError("class_index out of range");

    struct Scored {
        double score;
        bool positive;
    };
    std::vector<Scored> s;
    s.reserve(preds.size());
    size_t n_pos = 0;
    for (const auto& p : preds) {
        bool pos = static_cast<int>(p.truth) == class_index;
        n_pos += pos;
        s.push_back({p.confidences[static_cast<size_t>(class_index)], pos});
    }
    size_t n_neg = s.size() - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw InvalidInputError(std::string("AUC undefined: class ") +
                                class_name(static_cast<InteractionClass>(class_index)) +
                                " lacks positives or negatives");

    std::sort(s.begin(), s.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

    RocCurve curve;
    curve.points.emplace_back(0.0, 0.0);
    double tp = 0, fp = 0, auc = 0;
    double prev_fpr = 0, prev_tpr = 0;
    size_t i = 0;
    while (i < s.size()) {
        double score = s[i].score;
        // Consume the whole tie group so ties contribute a single diagonal
        // segment (the trapezoid then matches the Mann-Whitney 1/2 credit).
        while (i < s.size() && s[i].score == score) {
            if (s[i].positive)
                tp += 1;
            else
                fp += 1;
            ++i;
        }
        double fpr = fp / static_cast<double>(n_neg);
        double tpr = tp / static_cast<double>(n_pos);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        curve.points.emplace_back(fpr, tpr);
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    curve.auc = auc;
    return curve;
}

ResourceProfile resource_profile(const std::function<void(const PixelMapPair&)>& classify,
                                 const std::vector<PixelMapPair>& samples, int n_warmup,
                                 int n_measure) {
    if (n_measure < 1) throw InvalidInputError("n_measure must be >= 1");
    if (samples.empty()) throw InvalidInputError("resource_profile needs at least one sample");

    for (int i = 0; i < n_warmup; ++i) classify(samples[static_cast<size_t>(i) % samples.size()]);

    // Measured inferences run serially so wall-clock per sample is meaningful.
    std::vector<double> times;
    times.reserve(static_cast<size_t>(n_measure));
    for (int i = 0; i < n_measure; ++i) {
        const auto& sample = samples[static_cast<size_t>(i) % samples.size()];
        auto t0 = std::chrono::steady_clock::now();
        classify(sample);
        auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    ResourceProfile prof;
    double sum = 0;
    for (double t : times) sum += t;
    prof.ms_per_sample = sum / static_cast<double>(times.size());
    if (times.size() > 1) {
        double var = 0;
        for (double t : times) var += (t - prof.ms_per_sample) * (t - prof.ms_per_sample);
        prof.ms_stddev = std::sqrt(var / static_cast<double>(times.size() - 1));
    }

    // Peak resident set of this process (host memory; no accelerator here).
    std::ifstream status("/proc/self/status");
    std::string line;
    while (std::getline(status, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            prof.memory_mb = std::stod(line.substr(6)) / 1024.0; // kB -> MB
            break;
        }
    }
    return prof;
}

// ---------------------------------------------------------------------------
// Report assembly and serialization
// ---------------------------------------------------------------------------

MetricsReport compute_report(const std::vector<LabeledPrediction>& preds,
                             const std::string& model_tag, uint64_t split_hash) {
    check_nonempty(preds);
    MetricsReport r;
    r.model_tag = model_tag;
    r.split_hash = split_hash;
    r.aggregate = aggregate_metrics(preds);
    r.recall_matrix = confusion(preds, Normalization::Truth).normalized;
    r.precision_matrix = confusion(preds, Normalization::Prediction).normalized;

    double auc_sum = 0;
    int auc_n = 0;
    for (int c = 0; c < 3; ++c) {
        try {
            r.roc_curves[c] = roc_auc(preds, c);
            r.per_class_auc[c] = r.roc_curves[c].auc;
            auc_sum += r.per_class_auc[c];
            ++auc_n;
        } catch (const InvalidInputError&) {
            r.aggregate.warnings.push_back(std::string("AUC undefined for class ") +
                                           class_name(static_cast<InteractionClass>(c)));
            r.per_class_auc[c] = 0;
        }
    }
    r.macro_auc = auc_n ? auc_sum / auc_n : 0;

    double lat = 0;
    for (const auto& p : preds) lat += p.latency_ms;
    r.ms_per_sample = lat / static_cast<double>(preds.size());
    return r;
}

namespace {

json matrix_to_json(const Matrix3& m) {
    json rows = json::array();
    for (const auto& row : m) rows.push_back(std::vector<double>(row.begin(), row.end()));
    return rows;
}

Matrix3 matrix_from_json(const json& j) {
    Matrix3 m{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m[r][c] = j.at(r).at(c).get<double>();
    return m;
}

} // namespace

std::string MetricsReport::to_json() const {
    json j;
    j["model_tag"] = model_tag;
    j["split_hash"] = split_hash;
    j["accuracy"] = aggregate.accuracy;
    j["macro_precision"] = aggregate.macro_precision;
    j["macro_recall"] = aggregate.macro_recall;
    j["micro_precision"] = aggregate.micro_precision;
    j["micro_recall"] = aggregate.micro_recall;
    j["warnings"] = aggregate.warnings;
    j["macro_auc"] = macro_auc;
    j["per_class_auc"] = std::vector<double>(per_class_auc.begin(), per_class_auc.end());
    j["recall_matrix"] = matrix_to_json(recall_matrix);
    j["precision_matrix"] = matrix_to_json(precision_matrix);
    j["memory_mb"] = memory_mb;
    j["ms_per_sample"] = ms_per_sample;
    json curves = json::array();
    for (const auto& curve : roc_curves) {
        json pts = json::array();
        for (const auto& [fpr, tpr] : curve.points) pts.push_back({fpr, tpr});
        curves.push_back({{"auc", curve.auc}, {"points", pts}});
    }
    j["roc_curves"] = curves;
    return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
    json j = json::parse(text);
    MetricsReport r;
    r.model_tag = j.at("model_tag");
    r.split_hash = j.at("split_hash");
    r.aggregate.accuracy = j.at("accuracy");
    r.aggregate.macro_precision = j.at("macro_precision");
    r.aggregate.macro_recall = j.at("macro_recall");
    r.aggregate.micro_precision = j.at("micro_precision");
    r.aggregate.micro_recall = j.at("micro_recall");
    r.aggregate.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.macro_auc = j.at("macro_auc");
    auto auc = j.at("per_class_auc").get<std::vector<double>>();
    std::copy(auc.begin(), auc.end(), r.per_class_auc.begin());
    r.recall_matrix = matrix_from_json(j.at("recall_matrix"));
    r.precision_matrix = matrix_from_json(j.at("precision_matrix"));
    r.memory_mb = j.at("memory_mb");
    r.ms_per_sample = j.at("ms_per_sample");
    for (int c = 0; c < 3; ++c) {
        const auto& jc = j.at("roc_curves").at(c);
        r.roc_curves[c].auc = jc.at("auc");
        for (const auto& pt : jc.at("points"))
            r.roc_curves[c].points.emplace_back(pt.at(0).get<double>(), pt.at(1).get<double>());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Predictions file
// ---------------------------------------------------------------------------

void write_predictions(const fs::path& path, const std::string& model_tag, uint64_t split_hash,
                       const std::vector<LabeledPrediction>& preds) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write predictions file: " + path.string());
    json header = {{"model", model_tag}, {"split_hash", split_hash}, {"n", preds.size()}};
    out << header.dump() << "\n";
    for (const auto& p : preds) {
        json j = {{"event_id", p.event_id},
                  {"truth", class_name(p.truth)},
                  {"predicted", class_name(p.predicted)},
                  {"confidences", std::vector<double>(p.confidences.begin(), p.confidences.end())},
                  {"latency_ms", p.latency_ms}};
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + path.string());
}

PredictionsFile read_predictions(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open predictions file: " + path.string());
    PredictionsFile file;
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty predictions file: " + path.string());
    json header = json::parse(line);
    file.model_tag = header.at("model");
    file.split_hash = header.at("split_hash");
    size_t n = header.at("n");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        LabeledPrediction p;
        p.event_id = j.at("event_id");
        p.truth = class_from_name(j.at("truth"));
        p.predicted = class_from_name(j.at("predicted"));
        auto conf = j.at("confidences").get<std::vector<double>>();
        std::copy(conf.begin(), conf.end(), p.confidences.begin());
        p.latency_ms = j.at("latency_ms");
        file.preds.push_back(p);
    }
    if (file.preds.size() != n)
        throw IoError("predictions file truncated: expected " + std::to_string(n) + " records, got " +
                      std::to_string(file.preds.size()));
    return file;
}

} // namespace nuclass::evalkit
