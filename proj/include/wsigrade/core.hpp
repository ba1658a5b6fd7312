#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wsigrade/common.hpp"
#include "wsigrade/image.hpp"

namespace wsigrade {

// ---------------------------------------------------------------------------
// Grades
// ---------------------------------------------------------------------------

// Gleason growth patterns range 3-5; 0 stands for benign tissue.
enum class GleasonGrade : int {
    Benign = 0,
    GG3 = 3,
    GG4 = 4,
    GG5 = 5,
};

GleasonGrade gleason_from_int(int value);
inline int to_int(GleasonGrade g) { return static_cast<int>(g); }

constexpr int kNumIsupGrades = 6;  // 0 (benign) through 5

int validate_isup(int grade);

// Slide-level grade from the (primary, secondary) pattern pair.
// Valid pairs: (0,0) and the nine cancer combinations of {3,4,5}.
int isup_from_gleason(GleasonGrade primary, GleasonGrade secondary);

// ---------------------------------------------------------------------------
// Ordinal label encoding
// ---------------------------------------------------------------------------

// Cumulative 5-bit target whose element sum equals the grade:
// grade 2 -> [1,1,0,0,0].
struct OrdinalTarget {
    std::array<int, 5> bits{};

    int sum() const {
        int s = 0;
        for (int b : bits) s += b;
        return s;
    }
};

OrdinalTarget encode_ordinal(int isup_grade);

// Count rule: the number of sigmoid outputs strictly above `threshold`.
// Equals the encoding's element sum and tolerates isolated non-monotone
// outputs.
int decode_ordinal(const std::array<double, 5>& sigmoid_outputs, double threshold = 0.5);

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct PatchRecord {
    std::string slide_id;
    int index = 0;
    std::string path;  // patch PNG on disk; may be empty for in-memory patches
    Image pixels;      // may be empty when the patch lives on disk
    double tissue_fraction = 0.0;
    double mean_intensity = 0.0;
    std::optional<GleasonGrade> pseudo_label;
    std::optional<double> pseudo_confidence;
};

struct SlideRecord {
    std::string slide_id;
    GleasonGrade primary_gg = GleasonGrade::Benign;
    GleasonGrade secondary_gg = GleasonGrade::Benign;
    int isup = 0;
    std::string split;       // train / val / test
    std::string image_path;  // slide PNG
    std::map<int, std::string> mask_paths;  // lesion masks keyed by GG value
    std::vector<PatchRecord> patches;
};

// Checks the grade arithmetic invariants; throws InvalidLabelError.
void validate_slide(const SlideRecord& slide);

}  // namespace wsigrade
