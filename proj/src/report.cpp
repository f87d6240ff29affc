// Report rendering: metrics table, confusion-matrix heatmaps, ROC overlays.
// Images are binary PPM; file names are deterministic functions of the
// model tag and split hash.

#include <cmath>
#include <cstdio>
#include <fstream>

#include "nuclass/evalkit.hpp"

namespace fs = std::filesystem;

namespace nuclass::evalkit {

namespace {

struct Rgb {
    uint8_t r, g, b;
};

class Canvas {
public:
    Canvas(int w, int h, Rgb fill = {255, 255, 255}) : w_(w), h_(h), px_(static_cast<size_t>(w) * h, fill) {}

    void set(int x, int y, Rgb c) {
        if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
        px_[static_cast<size_t>(y) * w_ + x] = c;
    }

    void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) set(x, y, c);
    }

    void line(double x0, double y0, double x1, double y1, Rgb c) {
        int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
        for (int i = 0; i <= steps; ++i) {
            double t = static_cast<double>(i) / steps;
            set(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
                static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
        }
    }

    void write_ppm(const fs::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write image: " + path.string());
        out << "P6\n" << w_ << " " << h_ << "\n255\n";
        out.write(reinterpret_cast<const char*>(px_.data()),
                  static_cast<std::streamsize>(px_.size() * sizeof(Rgb)));
    }

private:
    int w_, h_;
    std::vector<Rgb> px_;
};

Rgb heat_color(double v) { // 0 -> near white, 1 -> dark blue
    v = std::clamp(v, 0.0, 1.0);
    auto ch = [&](double lo, double hi) { return static_cast<uint8_t>(std::lround(hi + v * (lo - hi))); };
    return {ch(20, 247), ch(50, 250), ch(140, 255)};
}

void render_confusion(const Matrix3& m, const fs::path& path) {
    const int cell = 96, pad = 4;
    Canvas canvas(3 * cell + 4 * pad, 3 * cell + 4 * pad, {230, 230, 230});
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            int x0 = pad + c * (cell + pad), y0 = pad + r * (cell + pad);
            canvas.fill_rect(x0, y0, x0 + cell, y0 + cell, heat_color(m[r][c]));
            // Cell value as a small horizontal bar along the bottom edge.
            int bar = static_cast<int>(std::lround(m[r][c] * (cell - 8)));
            canvas.fill_rect(x0 + 4, y0 + cell - 8, x0 + 4 + bar, y0 + cell - 4, {30, 30, 30});
        }
    canvas.write_ppm(path);
}

void render_roc_overlay(const RocCurve& a, const RocCurve& b, const fs::path& path) {
    const int size = 320, margin = 20;
    Canvas canvas(size, size);
    auto px = [&](double fpr) { return margin + fpr * (size - 2 * margin); };
    auto py = [&](double tpr) { return size - margin - tpr * (size - 2 * margin); };
    // Axes and chance diagonal.
    canvas.line(px(0), py(0), px(1), py(0), {0, 0, 0});
    canvas.line(px(0), py(0), px(0), py(1), {0, 0, 0});
    canvas.line(px(0), py(0), px(1), py(1), {200, 200, 200});
    auto draw = [&](const RocCurve& curve, Rgb color) {
        for (size_t i = 1; i < curve.points.size(); ++i)
            canvas.line(px(curve.points[i - 1].first), py(curve.points[i - 1].second),
                        px(curve.points[i].first), py(curve.points[i].second), color);
    };
    draw(a, {200, 40, 40});
    draw(b, {40, 60, 200});
    canvas.write_ppm(path);
}

std::string hash_tag(const MetricsReport& r) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(r.split_hash));
    return r.model_tag + "-" + buf;
}

void append_row(std::string& table, const std::string& name, double a, double b, int decimals) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "| %-30s | %12.*f | %12.*f |\n", name.c_str(), decimals, a,
                  decimals, b);
    table += buf;
}

} // namespace

std::vector<fs::path> render_report(const MetricsReport& model_a, const MetricsReport& model_b,
                                    const fs::path& out_dir) {
    if (model_a.split_hash != model_b.split_hash)
        throw DataMismatchError("refusing to compare reports from different splits: " +
                                hash_tag(model_a) + " vs " + hash_tag(model_b));
    fs::create_directories(out_dir);
    std::vector<fs::path> files;

    // Metrics table, same row set as the paper's summary table.
    std::string table;
    table += "| Metric                         | " + model_a.model_tag + std::string(12 - std::min<size_t>(12, model_a.model_tag.size()), ' ') +
             " | " + model_b.model_tag + std::string(12 - std::min<size_t>(12, model_b.model_tag.size()), ' ') + " |\n";
    table += "|--------------------------------|--------------|--------------|\n";
    append_row(table, "Accuracy", model_a.aggregate.accuracy, model_b.aggregate.accuracy, 4);
    append_row(table, "Precision", model_a.aggregate.macro_precision, model_b.aggregate.macro_precision, 4);
    append_row(table, "Recall", model_a.aggregate.macro_recall, model_b.aggregate.macro_recall, 4);
    append_row(table, "AUC-ROC", model_a.macro_auc, model_b.macro_auc, 4);
    append_row(table, "Inference Memory Usage (MB)", model_a.memory_mb, model_b.memory_mb, 2);
    append_row(table, "Time per Sample (mSec)", model_a.ms_per_sample, model_b.ms_per_sample, 2);
    fs::path table_path = out_dir / ("metrics_table-" + hash_tag(model_a) + "-vs-" + hash_tag(model_b) + ".md");
    {
        std::ofstream out(table_path, std::ios::trunc);
        if (!out) throw IoError("cannot write metrics table: " + table_path.string());
        out << table;
    }
    files.push_back(table_path);

    for (const auto* r : {&model_a, &model_b}) {
        fs::path recall_path = out_dir / ("confusion-recall-" + hash_tag(*r) + ".ppm");
        fs::path precision_path = out_dir / ("confusion-precision-" + hash_tag(*r) + ".ppm");
        render_confusion(r->recall_matrix, recall_path);
        render_confusion(r->precision_matrix, precision_path);
        files.push_back(recall_path);
        files.push_back(precision_path);

        fs::path metrics_path = out_dir / ("metrics-" + hash_tag(*r) + ".json");
        std::ofstream out(metrics_path, std::ios::trunc);
        if (!out) throw IoError("cannot write metrics json: " + metrics_path.string());
        out << r->to_json() << "\n";
        files.push_back(metrics_path);
    }

    for (int c = 0; c < 3; ++c) {
        fs::path roc_path = out_dir / ("roc-" + std::string(class_name(static_cast<InteractionClass>(c))) +
                                       "-" + hash_tag(model_a) + "-vs-" + hash_tag(model_b) + ".ppm");
        render_roc_overlay(model_a.roc_curves[c], model_b.roc_curves[c], roc_path);
        files.push_back(roc_path);
    }
    return files;
}

} // namespace nuclass::evalkit
