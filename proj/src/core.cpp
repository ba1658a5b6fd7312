#include "wsigrade/core.hpp"

namespace wsigrade {

GleasonGrade gleason_from_int(int value) {
    switch (value) {
        case 0: return GleasonGrade::Benign;
        case 3: return GleasonGrade::GG3;
        case 4: return GleasonGrade::GG4;
        case 5: return GleasonGrade::GG5;
        default:
            throw InvalidLabelError("Gleason grade must be one of {0,3,4,5}, got " +
                                    std::to_string(value));
    }
}

int validate_isup(int grade) {
    if (grade < 0 || grade > 5)
        throw InvalidLabelError("ISUP grade must lie in [0,5], got " + std::to_string(grade));
    return grade;
}

int isup_from_gleason(GleasonGrade primary, GleasonGrade secondary) {
    const int p = to_int(primary);
    const int s = to_int(secondary);
    if ((p == 0) != (s == 0))
        throw InvalidLabelError("mixed benign/cancer Gleason pair (" + std::to_string(p) +
                                "," + std::to_string(s) + ") is not a valid label");
    if (p == 0) return 0;
    if (p == 3 && s == 3) return 1;
    if (p == 3 && s == 4) return 2;
    if (p == 4 && s == 3) return 3;
    if (p + s == 8) return 4;  // (4,4), (3,5), (5,3)
    return 5;                  // (4,5), (5,4), (5,5)
}

OrdinalTarget encode_ordinal(int isup_grade) {
    validate_isup(isup_grade);
    OrdinalTarget t;
    for (int j = 0; j < 5; ++j) t.bits[j] = j < isup_grade ? 1 : 0;
    return t;
}

int decode_ordinal(const std::array<double, 5>& sigmoid_outputs, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ParamError("decode threshold must lie in (0,1)");
    int grade = 0;
    for (double o : sigmoid_outputs) {
        if (!(o >= 0.0 && o <= 1.0))
            throw InvalidProbabilityError("sigmoid output outside [0,1]: " + std::to_string(o));
        if (o > threshold) ++grade;  // strict: ties at the threshold do not count
    }
    return grade;
}

void validate_slide(const SlideRecord& slide) {
    const int expected = isup_from_gleason(slide.primary_gg, slide.secondary_gg);
    if (expected != slide.isup)
        throw InvalidLabelError("slide " + slide.slide_id + ": ISUP " +
                                std::to_string(slide.isup) + " does not match Gleason pair (" +
                                std::to_string(to_int(slide.primary_gg)) + "," +
                                std::to_string(to_int(slide.secondary_gg)) + ")");
}

}  // namespace wsigrade
