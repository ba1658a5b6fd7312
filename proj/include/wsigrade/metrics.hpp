#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wsigrade/common.hpp"
#include "wsigrade/core.hpp"

namespace wsigrade::metrics {

// Rows = true ISUP grade, columns = predicted.
struct ConfusionMatrix {
    std::array<std::array<int64_t, kNumIsupGrades>, kNumIsupGrades> counts{};

    void add(int true_grade, int predicted_grade) {
        counts[validate_isup(true_grade)][validate_isup(predicted_grade)] += 1;
    }
    int64_t total() const {
        int64_t n = 0;
        for (const auto& row : counts)
            for (int64_t v : row) n += v;
        return n;
    }
};

// W_ij = ((i-j)/(k-1))^2
std::array<std::array<double, kNumIsupGrades>, kNumIsupGrades> kappa_weights();

// 1 - sum(W*O)/sum(W*E), E the marginal outer product scaled to the O total.
double quadratic_kappa(const ConfusionMatrix& cm);

struct DetectionMetrics {
    double accuracy = 0.0;
    double f1 = 0.0;
    double auc = 0.0;
};

// Binary detection: positive = grade >= 1. Accuracy/F1 threshold the score at
// 0.5; AUC is the Mann–Whitney rank statistic with ties counted half.
DetectionMetrics detection_metrics(const std::vector<int>& true_grades,
                                   const std::vector<double>& malignancy_scores);

struct GradingReport {
    ConfusionMatrix cm;
    double kappa = 0.0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double mean_abs_error = 0.0;
    int64_t severe_errors = 0;  // |true - predicted| >= 2
    std::vector<std::string> warnings;
};

GradingReport grading_report(const std::vector<int>& true_grades,
                             const std::vector<int>& predicted_grades);

// Serialization helpers used by the CLI reports.
std::string confusion_matrix_csv(const ConfusionMatrix& cm);
void render_confusion_matrix_png(const ConfusionMatrix& cm, const std::string& path);

}  // namespace wsigrade::metrics
