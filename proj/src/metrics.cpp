#include "wsigrade/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace wsigrade::metrics {

std::array<std::array<double, kNumIsupGrades>, kNumIsupGrades> kappa_weights() {
    std::array<std::array<double, kNumIsupGrades>, kNumIsupGrades> w{};
    const double denom = kNumIsupGrades - 1;
    for (int i = 0; i < kNumIsupGrades; ++i)
        for (int j = 0; j < kNumIsupGrades; ++j) {
            const double d = (i - j) / denom;
            w[i][j] = d * d;
        }
    return w;
}

double quadratic_kappa(const ConfusionMatrix& cm) {
    const int64_t n = cm.total();
    if (n == 0) throw ParamError("quadratic_kappa: empty confusion matrix");

    std::array<double, kNumIsupGrades> row_marginal{}, col_marginal{};
    for (int i = 0; i < kNumIsupGrades; ++i)
        for (int j = 0; j < kNumIsupGrades; ++j) {
            row_marginal[i] += static_cast<double>(cm.counts[i][j]);
            col_marginal[j] += static_cast<double>(cm.counts[i][j]);
        }

    const auto w = kappa_weights();
    double observed = 0.0, expected = 0.0;
    for (int i = 0; i < kNumIsupGrades; ++i)
        for (int j = 0; j < kNumIsupGrades; ++j) {
            observed += w[i][j] * static_cast<double>(cm.counts[i][j]);
            expected += w[i][j] * row_marginal[i] * col_marginal[j] / static_cast<double>(n);
        }

    if (expected == 0.0) {
        // both raters constant: agreement is perfect by construction, or the
        // statistic is undefined when they disagree on the constant
        if (observed == 0.0) return 1.0;
        throw ParamError("quadratic_kappa: degenerate marginals with nonzero disagreement");
    }
    const int distinct_true = static_cast<int>(
        std::count_if(row_marginal.begin(), row_marginal.end(), [](double v) { return v > 0; }));
    const int distinct_pred = static_cast<int>(
        std::count_if(col_marginal.begin(), col_marginal.end(), [](double v) { return v > 0; }));
    if (distinct_true == 1 && distinct_pred == 1)
        throw ParamError(
            "quadratic_kappa: both raters constant with different values; agreement by chance "
            "is undefined");
    return 1.0 - observed / expected;
}

DetectionMetrics detection_metrics(const std::vector<int>& true_grades,
                                   const std::vector<double>& malignancy_scores) {
    if (true_grades.size() != malignancy_scores.size())
        throw ParamError("detection_metrics: length mismatch");
    if (true_grades.empty()) throw ParamError("detection_metrics: empty input");

    const size_t n = true_grades.size();
    size_t pos = 0;
    for (int g : true_grades) {
        validate_isup(g);
        if (g >= 1) ++pos;
    }
    const size_t neg = n - pos;
    if (pos == 0 || neg == 0)
        throw ParamError("detection_metrics: AUC undefined for single-class ground truth");

    // threshold 0.5 for accuracy / F1
    size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (size_t i = 0; i < n; ++i) {
        const bool truth = true_grades[i] >= 1;
        const bool pred = malignancy_scores[i] > 0.5;
        if (truth && pred) ++tp;
        else if (!truth && pred) ++fp;
        else if (!truth && !pred) ++tn;
        else ++fn;
    }
    DetectionMetrics out;
    out.accuracy = static_cast<double>(tp + tn) / static_cast<double>(n);
    const double denom = 2.0 * tp + fp + fn;
    out.f1 = denom > 0 ? 2.0 * tp / denom : 0.0;

    // Mann–Whitney with average ranks over ties
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return malignancy_scores[a] < malignancy_scores[b];
    });
    std::vector<double> rank(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n &&
               malignancy_scores[order[j + 1]] == malignancy_scores[order[i]])
            ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t t = i; t <= j; ++t) rank[order[t]] = avg_rank;
        i = j + 1;
    }
    double pos_rank_sum = 0.0;
    for (size_t idx = 0; idx < n; ++idx)
        if (true_grades[idx] >= 1) pos_rank_sum += rank[idx];
    out.auc = (pos_rank_sum - static_cast<double>(pos) * (pos + 1) / 2.0) /
              (static_cast<double>(pos) * static_cast<double>(neg));
    return out;
}

GradingReport grading_report(const std::vector<int>& true_grades,
                             const std::vector<int>& predicted_grades) {
    if (true_grades.size() != predicted_grades.size())
        throw ParamError("grading_report: length mismatch");
    if (true_grades.empty()) throw ParamError("grading_report: empty input");

    GradingReport report;
    const size_t n = true_grades.size();
    size_t correct = 0;
    double abs_error = 0.0;
    for (size_t i = 0; i < n; ++i) {
        report.cm.add(true_grades[i], predicted_grades[i]);
        if (true_grades[i] == predicted_grades[i]) ++correct;
        const int diff = std::abs(true_grades[i] - predicted_grades[i]);
        abs_error += diff;
        if (diff >= 2) ++report.severe_errors;
    }
    report.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    report.mean_abs_error = abs_error / static_cast<double>(n);
    report.kappa = quadratic_kappa(report.cm);

    // macro F1 over the six grades; absent classes contribute 0 with a warning
    double f1_sum = 0.0;
    for (int g = 0; g < kNumIsupGrades; ++g) {
        int64_t tp = report.cm.counts[g][g];
        int64_t fp = 0, fn = 0;
        for (int other = 0; other < kNumIsupGrades; ++other) {
            if (other == g) continue;
            fp += report.cm.counts[other][g];
            fn += report.cm.counts[g][other];
        }
        const double denom = static_cast<double>(2 * tp + fp + fn);
        if (denom == 0.0) {
            report.warnings.push_back("grade " + std::to_string(g) +
                                      " absent from truth and predictions; per-class F1 set to 0");
            continue;
        }
        f1_sum += 2.0 * static_cast<double>(tp) / denom;
    }
    report.macro_f1 = f1_sum / kNumIsupGrades;
    return report;
}

std::string confusion_matrix_csv(const ConfusionMatrix& cm) {
    std::ostringstream out;
    out << "true\\pred";
    for (int j = 0; j < kNumIsupGrades; ++j) out << "," << j;
    out << "\n";
    for (int i = 0; i < kNumIsupGrades; ++i) {
        out << i;
        for (int j = 0; j < kNumIsupGrades; ++j) out << "," << cm.counts[i][j];
        out << "\n";
    }
    return out.str();
}

void render_confusion_matrix_png(const ConfusionMatrix& cm, const std::string& path) {
    const int cell = 64, margin = 48;
    const int size = margin + kNumIsupGrades * cell;
    cv::Mat canvas(size, size, CV_8UC3, cv::Scalar(255, 255, 255));

    int64_t max_count = 1;
    for (const auto& row : cm.counts)
        for (int64_t v : row) max_count = std::max(max_count, v);

    for (int i = 0; i < kNumIsupGrades; ++i) {
        for (int j = 0; j < kNumIsupGrades; ++j) {
            const double t = static_cast<double>(cm.counts[i][j]) / static_cast<double>(max_count);
            // white -> blue ramp
            const auto shade = static_cast<uint8_t>(std::lround(255.0 * (1.0 - 0.85 * t)));
            cv::Rect rect(margin + j * cell, margin + i * cell, cell, cell);
            cv::rectangle(canvas, rect, cv::Scalar(255, shade, shade), cv::FILLED);
            cv::rectangle(canvas, rect, cv::Scalar(160, 160, 160), 1);
            const std::string label = std::to_string(cm.counts[i][j]);
            cv::putText(canvas, label,
                        {margin + j * cell + 8, margin + i * cell + cell / 2 + 6},
                        cv::FONT_HERSHEY_SIMPLEX, 0.5,
                        t > 0.5 ? cv::Scalar(255, 255, 255) : cv::Scalar(30, 30, 30), 1,
                        cv::LINE_AA);
        }
        cv::putText(canvas, std::to_string(i), {margin / 3, margin + i * cell + cell / 2 + 6},
                    cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
        cv::putText(canvas, std::to_string(i), {margin + i * cell + cell / 2 - 6, margin - 12},
                    cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    }
    if (!cv::imwrite(path, canvas)) throw IoError("cannot write confusion matrix png: " + path);
}

}  // namespace wsigrade::metrics
