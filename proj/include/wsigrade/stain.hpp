#pragma once

#include <array>
#include <string>
#include <vector>

#include "wsigrade/core.hpp"
#include "wsigrade/image.hpp"
#include "wsigrade/tiling.hpp"

namespace wsigrade::stain {

// Per-pixel stain coefficients, row-major H/E/D planes interleaved per pixel.
struct HedImage {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // height*width*3, channel order (H, E, D)

    HedImage() = default;
    HedImage(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0) {}
    double& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

// Row i is the optical-density RGB vector of stain i (H, E, D), each row
// unit-normalized. `inverse` maps OD back to stain coefficients.
struct StainMatrix {
    std::array<std::array<double, 3>, 3> rows{};
    std::array<std::array<double, 3>, 3> inverse{};

    static StainMatrix from_rows(const std::array<std::array<double, 3>, 3>& raw_rows);
};

// Ruifrok–Johnston H&E-DAB stain vectors.
const StainMatrix& default_stain_matrix();

// Optical density of an 8-bit value: -log10((v+1)/256). White maps to 0
// exactly and v=0 stays bounded.
double optical_density(uint8_t value);

HedImage rgb_to_hed(const Image& patch, const StainMatrix& matrix = default_stain_matrix());
Image hed_to_rgb(const HedImage& hed, const StainMatrix& matrix = default_stain_matrix());

// Per-channel affine perturbation in HED space.
struct StainParams {
    std::array<double, 3> alpha{1.0, 1.0, 1.0};
    std::array<double, 3> beta{0.0, 0.0, 0.0};
};

// `PaperLiteral` draws alpha and beta uniformly from [0,1], attenuating
// channels almost to zero in the worst case; `Centered` perturbs around the
// identity and is the default.
enum class StainMode { Centered, PaperLiteral };

struct Aug1Config {
    double flip_prob = 0.5;
    double brightness = 0.4;   // max relative strength
    double contrast = 0.4;
    double saturation = 0.4;
    double hue = 0.1;          // max shift as a fraction of the hue circle
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;
};

struct AugmentationConfig {
    StainMode mode = StainMode::Centered;
    std::array<double, 2> alpha_range{0.95, 1.05};
    std::array<double, 2> beta_range{-0.05, 0.05};
    Aug1Config aug1;

    static AugmentationConfig centered();
    static AugmentationConfig paper_literal();
};

StainParams sample_stain_params(Rng& rng, const AugmentationConfig& config);

Image stain_augment(const Image& patch, const StainParams& params,
                    const StainMatrix& matrix = default_stain_matrix());
PatchRecord stain_augment(const PatchRecord& patch, const StainParams& params,
                          const tiling::TissueParams& tissue = {},
                          const StainMatrix& matrix = default_stain_matrix());

// Standard augmentation pipeline: horizontal flip, color jitter
// (brightness/contrast/saturation/hue), grayscale, Gaussian blur — in that
// order, every draw taken from `rng`.
Image aug1_view(const Image& patch, Rng& rng, const Aug1Config& config);
PatchRecord aug1_view(const PatchRecord& patch, Rng& rng, const Aug1Config& config,
                      const tiling::TissueParams& tissue = {});

// Separable Gaussian blur with reflect padding; kernel radius ceil(3*sigma).
Image gaussian_blur(const Image& img, double sigma);

}  // namespace wsigrade::stain
