#ifndef EMSS_METRICS_HPP
#define EMSS_METRICS_HPP

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "emss/checkpoint.hpp"
#include "emss/data.hpp"

namespace emss {

enum class MetricKind { dice, l1 };

inline std::string to_string(MetricKind k) { return k == MetricKind::dice ? "dice" : "l1"; }

inline MetricKind metric_from_string(const std::string& s) {
    if (s == "dice") return MetricKind::dice;
    if (s == "l1") return MetricKind::l1;
    throw std::invalid_argument("unknown metric kind: " + s);
}

/// Dice overlap 2|A∩B| / (|A|+|B|) on binary masks; both-empty -> 1.
inline double dice(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask) {
    if (pred_mask.sizes() != gt_mask.sizes())
        throw std::invalid_argument("dice: shape mismatch");
    auto binary = [](const torch::Tensor& t) {
        return ((t == 0) | (t == 1)).all().item<bool>();
    };
    if (!binary(pred_mask) || !binary(gt_mask))
        throw std::invalid_argument("dice requires binary masks (values in {0,1})");
    double inter = (pred_mask * gt_mask).sum().item<double>();
    double total = pred_mask.sum().item<double>() + gt_mask.sum().item<double>();
    if (total == 0) return 1.0;
    return 2.0 * inter / total;
}

/// Epoch-indexed metric curve.
struct MetricSeries {
    std::string label;
    std::string kind = "l1";
    std::vector<std::pair<int, double>> points;

    void add(int epoch, double value) {
        if (!points.empty() && epoch <= points.back().first)
            throw std::invalid_argument("MetricSeries epochs must be strictly increasing");
        points.emplace_back(epoch, value);
    }
    size_t size() const { return points.size(); }
};

inline void write_series_csv(const MetricSeries& s, const std::filesystem::path& path,
                             const std::string& value_header) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "epoch," << value_header << "\n";
    out << std::setprecision(17);
    for (auto& [e, v] : s.points) out << e << "," << v << "\n";
}

/// Appendix-shaped table: (spec x init) rows, checkpoint-epoch columns.
struct MetricTable {
    struct Row {
        std::string spec, init;
        std::vector<double> values;
    };
    std::string metric = "dice";
    std::vector<int> epochs;
    std::vector<Row> rows;

    void validate() const {
        if (rows.empty() || epochs.empty()) throw std::invalid_argument("empty metric table");
        for (size_t i = 1; i < epochs.size(); ++i)
            if (epochs[i] <= epochs[i - 1])
                throw std::invalid_argument("table epochs must be strictly increasing");
        for (const auto& r : rows)
            if (r.values.size() != epochs.size())
                throw std::invalid_argument("table row '" + r.spec + "/" + r.init +
                                            "' has wrong cell count");
    }
};

enum class TableFormat { csv, markdown };

inline void emit_table(const MetricTable& table, const std::filesystem::path& path,
                       TableFormat format) {
    table.validate();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << std::setprecision(17);
    if (format == TableFormat::csv) {
        out << "spec,init,metric";
        for (int e : table.epochs) out << "," << e;
        out << "\n";
        for (const auto& r : table.rows) {
            out << r.spec << "," << r.init << "," << table.metric;
            for (double v : r.values) out << "," << v;
            out << "\n";
        }
    } else {
        out << "| spec | init |";
        for (int e : table.epochs) out << " " << e << " |";
        out << "\n|---|---|";
        for (size_t i = 0; i < table.epochs.size(); ++i) out << "---|";
        out << "\n";
        out << std::setprecision(6);
        for (const auto& r : table.rows) {
            out << "| " << r.spec << " | " << r.init << " |";
            for (double v : r.values) out << " " << v << " |";
            out << "\n";
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline MetricTable parse_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    auto split_line = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        return cells;
    };
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty table file: " + path.string());
    auto header = split_line(line);
    if (header.size() < 4 || header[0] != "spec" || header[1] != "init" || header[2] != "metric")
        throw std::runtime_error("unrecognized table header in " + path.string());
    MetricTable t;
    for (size_t i = 3; i < header.size(); ++i) t.epochs.push_back(std::stoi(header[i]));
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error("ragged table row in " + path.string());
        MetricTable::Row r;
        r.spec = cells[0];
        r.init = cells[1];
        t.metric = cells[2];
        for (size_t i = 3; i < cells.size(); ++i) r.values.push_back(std::stod(cells[i]));
        t.rows.push_back(std::move(r));
    }
    t.validate();
    return t;
}

namespace detail {

inline torch::Tensor center_crop_divisible(const torch::Tensor& chw, int divisor) {
    long H = chw.size(-2), W = chw.size(-1);
    long h = (H / divisor) * divisor, w = (W / divisor) * divisor;
    if (h == 0 || w == 0)
        throw std::invalid_argument("image smaller than network divisor");
    long r = (H - h) / 2, c = (W - w) / 2;
    using torch::indexing::Slice;
    return chw.index({torch::indexing::Ellipsis, Slice(r, r + h), Slice(c, c + w)}).contiguous();
}

}  // namespace detail

/// Metric of one network over a test set; no parameter updates, batch-size
/// independent (samples are evaluated one at a time and averaged).
inline double evaluate_network(Network& net, const Dataset& test_set, MetricKind kind,
                               double threshold = 0.5) {
    if (test_set.empty()) throw std::invalid_argument("empty test set");
    if (kind == MetricKind::dice && net.head_kind != HeadKind::segmentation)
        throw std::invalid_argument("dice metric requires a segmentation head; checkpoint task is '" +
                                    to_string(net.head_kind) + "'");
    torch::NoGradGuard no_grad;
    net.eval();
    int div = 1 << net.spec.blocks;
    double acc = 0;
    for (size_t i = 0; i < test_set.size(); ++i) {
        auto s = test_set.get(i);
        auto x = detail::center_crop_divisible(standardize(s.input), div).unsqueeze(0);
        auto t = detail::center_crop_divisible(
            s.target_is_mask ? s.target : standardize(s.target), div).unsqueeze(0);
        auto y = net.forward(x);
        if (kind == MetricKind::dice) {
            auto pred = (y > threshold).to(torch::kFloat32);
            acc += dice(pred, t);
        } else {
            acc += (y - t).abs().mean().item<double>();
        }
    }
    return acc / static_cast<double>(test_set.size());
}

struct EvalRow {
    std::string spec, init;
    std::vector<int> epochs;
    std::vector<double> values;
};

/// One appendix-table row: the metric of every checkpoint on the test set,
/// with parameters exactly as stored.
inline EvalRow evaluate_checkpoints(const std::vector<std::filesystem::path>& checkpoints,
                                    const Dataset& test_set, MetricKind kind,
                                    double threshold = 0.5) {
    if (checkpoints.empty()) throw std::invalid_argument("no checkpoints to evaluate");
    if (test_set.empty()) throw std::invalid_argument("empty test set");
    EvalRow row;
    for (const auto& path : checkpoints) {
        CheckpointRecord rec;
        try {
            rec = load_checkpoint(path);
        } catch (const std::exception& e) {
            throw std::runtime_error("cannot load checkpoint " + path.string() + ": " + e.what());
        }
        if (row.epochs.empty()) {
            row.spec = rec.spec.name;
            row.init = rec.provenance;
        }
        auto net = restore_network(rec);
        row.epochs.push_back(rec.epoch);
        row.values.push_back(evaluate_network(net, test_set, kind, threshold));
    }
    return row;
}

/// Line plot of metric curves rendered to a PNG; deterministic bytes for a
/// fixed series list.
inline void emit_convergence_plot(const std::vector<MetricSeries>& series,
                                  const std::filesystem::path& path) {
    if (series.empty()) throw std::invalid_argument("emit_convergence_plot: no series");
    for (const auto& s : series)
        if (s.points.empty()) throw std::invalid_argument("emit_convergence_plot: empty series");
    const int W = 900, H = 600, ml = 70, mr = 20, mt = 20, mb = 50;
    cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        for (auto& [e, v] : s.points) {
            xmin = std::min(xmin, double(e));
            xmax = std::max(xmax, double(e));
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto px = [&](double e) { return ml + int((e - xmin) / (xmax - xmin) * (W - ml - mr)); };
    auto py = [&](double v) { return H - mb - int((v - ymin) / (ymax - ymin) * (H - mt - mb)); };
    cv::rectangle(canvas, {ml, mt}, {W - mr, H - mb}, cv::Scalar(0, 0, 0));
    const std::vector<cv::Scalar> palette = {
        {180, 60, 30}, {30, 120, 200}, {40, 160, 40}, {30, 30, 200}, {160, 30, 160}, {20, 140, 140}};
    for (int t = 0; t <= 5; ++t) {
        double v = ymin + (ymax - ymin) * t / 5.0;
        double e = xmin + (xmax - xmin) * t / 5.0;
        std::ostringstream vs, es;
        vs << std::setprecision(3) << v;
        es << std::setprecision(3) << e;
        cv::putText(canvas, vs.str(), {5, py(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
        cv::putText(canvas, es.str(), {px(e) - 10, H - mb + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                    {0, 0, 0});
        cv::line(canvas, {ml, py(v)}, {W - mr, py(v)}, cv::Scalar(230, 230, 230));
    }
    cv::putText(canvas, "epoch", {W / 2 - 20, H - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0});
    for (size_t si = 0; si < series.size(); ++si) {
        auto color = palette[si % palette.size()];
        const auto& pts = series[si].points;
        for (size_t i = 1; i < pts.size(); ++i)
            cv::line(canvas, {px(pts[i - 1].first), py(pts[i - 1].second)},
                     {px(pts[i].first), py(pts[i].second)}, color, 2, cv::LINE_AA);
        std::string label = series[si].label.empty() ? ("series " + std::to_string(si)) : series[si].label;
        int ly = mt + 20 + int(si) * 18;
        cv::line(canvas, {W - mr - 160, ly - 4}, {W - mr - 130, ly - 4}, color, 2);
        cv::putText(canvas, label, {W - mr - 125, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
    }
    if (!cv::imwrite(path.string(), canvas))
        throw std::runtime_error("failed to write plot: " + path.string());
}

}  // namespace emss

#endif  // EMSS_METRICS_HPP
