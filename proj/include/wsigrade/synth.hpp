#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "wsigrade/core.hpp"
#include "wsigrade/image.hpp"

namespace wsigrade::synth {

// Procedural texture of one tissue class: a base tint plus elliptical
// nuclei-like blobs at a class-specific density and size.
struct ClassTexture {
    std::array<uint8_t, 3> base_color{};
    std::array<uint8_t, 3> blob_color{};
    double blob_density = 0.0;  // expected blobs per 256x256 cell
    double radius_min = 0.0;
    double radius_max = 0.0;
    double anisotropy = 1.0;    // max axis ratio
};

struct SynthSpec {
    int slides_per_grade = 10;  // training split
    int val_per_grade = 3;
    int test_per_grade = 3;
    int slide_size = 1024;      // square, a multiple of cell
    int cell = 256;             // lesion regions are unions of grid cells
    double primary_fraction = 0.42;
    double secondary_fraction = 0.26;
    double tint_jitter = 0.05;  // per-slide multiplicative stain tint range
    int pixel_noise = 5;        // uniform per-channel noise amplitude
    uint64_t seed = 7;
    std::map<int, ClassTexture> textures;  // keyed by class {0,3,4,5}

    static SynthSpec defaults();
    void validate() const;
    int grid_cells() const { return (slide_size / cell) * (slide_size / cell); }
};

// Cell-level layout of one slide; the ground truth for every downstream test.
struct SlidePlan {
    std::string slide_id;
    std::string split;
    int isup = 0;
    GleasonGrade primary = GleasonGrade::Benign;
    GleasonGrade secondary = GleasonGrade::Benign;
    int grid_rows = 0;
    int grid_cols = 0;
    std::vector<int> cell_class;  // per cell, row-major: 0 / 3 / 4 / 5
    uint64_t render_seed = 0;
};

// Deterministic corpus layout: near-uniform grade distribution per split,
// lesions grown as connected cell regions, primary strictly larger than
// secondary.
std::vector<SlidePlan> plan_corpus(const SynthSpec& spec);

struct RenderedSlide {
    Image image;
    std::map<int, Mask> lesion_masks;  // per planted GG class
};

RenderedSlide render_slide(const SynthSpec& spec, const SlidePlan& plan);

SlideRecord record_from_plan(const SlidePlan& plan);

// Ground-truth class of the patch at `patch_index` when the tiling grid
// matches the cell grid.
int patch_truth(const SlidePlan& plan, int patch_index);

struct CorpusStats {
    std::array<int64_t, kNumIsupGrades> slides_per_grade{};
    std::map<int, int64_t> patch_class_counts;  // planted cells per class
    std::vector<std::string> warnings;
};

CorpusStats corpus_stats(const std::vector<SlideRecord>& records,
                         const std::vector<SlidePlan>* plans = nullptr);

// Renders and writes the whole corpus (slides/, masks/, corpus.jsonl) one
// slide at a time; returns the records as written.
std::vector<SlideRecord> write_corpus(const SynthSpec& spec, const std::string& out_dir);

}  // namespace wsigrade::synth
