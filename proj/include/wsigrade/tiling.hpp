#pragma once

#include <string>
#include <vector>

#include "wsigrade/core.hpp"
#include "wsigrade/image.hpp"

namespace wsigrade::tiling {

// White-background rejection: a pixel counts as tissue when it is saturated
// enough and not near-white.
struct TissueParams {
    double saturation_min = 0.07;
    double value_max = 0.95;
};

struct TilingConfig {
    int patch_size = 256;
    TissueParams tissue;
};

double mean_intensity(const Image& patch);
double tissue_fraction(const Image& patch, const TissueParams& params = {});

// Non-overlapping row-major grid tiles; right/bottom remainders padded with
// white. Each record carries recomputed tissue_fraction and mean_intensity.
std::vector<PatchRecord> extract_patches(const Image& slide, const std::string& slide_id,
                                         const TilingConfig& config = {});

// The n patches with lowest mean intensity, ascending. Ties break on
// (mean_intensity, index). Bags shorter than n are padded by cycling the
// sorted list from the start.
std::vector<PatchRecord> select_bag(const std::vector<PatchRecord>& patches, int n = 36);

}  // namespace wsigrade::tiling
