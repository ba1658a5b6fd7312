#include "wsigrade/stain.hpp"

#include <algorithm>
#include <cmath>

namespace wsigrade::stain {

namespace {

constexpr double kLn10 = 2.302585092994045684;

std::array<std::array<double, 3>, 3> invert3x3(const std::array<std::array<double, 3>, 3>& m) {
    const double a = m[0][0], b = m[0][1], c = m[0][2];
    const double d = m[1][0], e = m[1][1], f = m[1][2];
    const double g = m[2][0], h = m[2][1], i = m[2][2];
    const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    if (std::fabs(det) < 1e-12) throw NumericError("stain matrix is singular");
    const double inv_det = 1.0 / det;
    return {{
        {(e * i - f * h) * inv_det, (c * h - b * i) * inv_det, (b * f - c * e) * inv_det},
        {(f * g - d * i) * inv_det, (a * i - c * g) * inv_det, (c * d - a * f) * inv_det},
        {(d * h - e * g) * inv_det, (b * g - a * h) * inv_det, (a * e - b * d) * inv_det},
    }};
}

// per-value optical density lookup
const std::array<double, 256>& od_table() {
    static const std::array<double, 256> table = [] {
        std::array<double, 256> t{};
        for (int v = 0; v < 256; ++v) t[v] = -std::log10((v + 1.0) / 256.0);
        return t;
    }();
    return table;
}

}  // namespace

StainMatrix StainMatrix::from_rows(const std::array<std::array<double, 3>, 3>& raw_rows) {
    StainMatrix m;
    for (int r = 0; r < 3; ++r) {
        const auto& row = raw_rows[r];
        const double norm = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
        if (norm < 1e-12) throw NumericError("stain vector has zero length");
        for (int c = 0; c < 3; ++c) m.rows[r][c] = row[c] / norm;
    }
    m.inverse = invert3x3(m.rows);
    return m;
}

const StainMatrix& default_stain_matrix() {
    static const StainMatrix matrix = StainMatrix::from_rows({{
        {0.65, 0.70, 0.29},  // hematoxylin
        {0.07, 0.99, 0.11},  // eosin
        {0.27, 0.57, 0.78},  // DAB
    }});
    return matrix;
}

double optical_density(uint8_t value) { return od_table()[value]; }

HedImage rgb_to_hed(const Image& patch, const StainMatrix& matrix) {
    HedImage out(patch.height, patch.width);
    const auto& od = od_table();
    const auto& inv = matrix.inverse;
    const size_t n = patch.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        const double o0 = od[patch.data[3 * i]];
        const double o1 = od[patch.data[3 * i + 1]];
        const double o2 = od[patch.data[3 * i + 2]];
        // od is a row vector; stains = od * inverse
        out.data[3 * i]     = o0 * inv[0][0] + o1 * inv[1][0] + o2 * inv[2][0];
        out.data[3 * i + 1] = o0 * inv[0][1] + o1 * inv[1][1] + o2 * inv[2][1];
        out.data[3 * i + 2] = o0 * inv[0][2] + o1 * inv[1][2] + o2 * inv[2][2];
    }
    return out;
}

Image hed_to_rgb(const HedImage& hed, const StainMatrix& matrix) {
    Image out(hed.height, hed.width);
    const auto& rows = matrix.rows;
    const size_t n = static_cast<size_t>(hed.height) * hed.width;
    for (size_t i = 0; i < n; ++i) {
        const double h = hed.data[3 * i];
        const double e = hed.data[3 * i + 1];
        const double d = hed.data[3 * i + 2];
        for (int c = 0; c < 3; ++c) {
            const double od = h * rows[0][c] + e * rows[1][c] + d * rows[2][c];
            const double value = 256.0 * std::exp(-od * kLn10) - 1.0;
            out.data[3 * i + c] =
                static_cast<uint8_t>(std::clamp(std::lround(value), 0L, 255L));
        }
    }
    return out;
}

AugmentationConfig AugmentationConfig::centered() { return AugmentationConfig{}; }

AugmentationConfig AugmentationConfig::paper_literal() {
    AugmentationConfig cfg;
    cfg.mode = StainMode::PaperLiteral;
    cfg.alpha_range = {0.0, 1.0};
    cfg.beta_range = {0.0, 1.0};
    return cfg;
}

StainParams sample_stain_params(Rng& rng, const AugmentationConfig& config) {
    StainParams p;
    for (int c = 0; c < 3; ++c) p.alpha[c] = rng.uniform(config.alpha_range[0], config.alpha_range[1]);
    for (int c = 0; c < 3; ++c) p.beta[c] = rng.uniform(config.beta_range[0], config.beta_range[1]);
    return p;
}

Image stain_augment(const Image& patch, const StainParams& params, const StainMatrix& matrix) {
    HedImage hed = rgb_to_hed(patch, matrix);
    const size_t n = static_cast<size_t>(hed.height) * hed.width;
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            hed.data[3 * i + c] = hed.data[3 * i + c] * params.alpha[c] + params.beta[c];
    return hed_to_rgb(hed, matrix);
}

PatchRecord stain_augment(const PatchRecord& patch, const StainParams& params,
                          const tiling::TissueParams& tissue, const StainMatrix& matrix) {
    PatchRecord out = patch;
    out.pixels = stain_augment(patch.pixels, params, matrix);
    out.tissue_fraction = tiling::tissue_fraction(out.pixels, tissue);
    out.mean_intensity = tiling::mean_intensity(out.pixels);
    return out;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        kernel[k + radius] = std::exp(-0.5 * (k * k) / (sigma * sigma));
        sum += kernel[k + radius];
    }
    for (double& w : kernel) w /= sum;

    auto reflect = [](int idx, int size) {
        if (idx < 0) idx = -idx - 1;
        if (idx >= size) idx = 2 * size - idx - 1;
        return std::clamp(idx, 0, size - 1);
    };

    const int h = img.height, w = img.width;
    std::vector<double> tmp(static_cast<size_t>(h) * w * 3);
    // horizontal pass
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[k + radius] * img.at(y, reflect(x + k, w), c);
                tmp[(static_cast<size_t>(y) * w + x) * 3 + c] = acc;
            }
    // vertical pass
    Image out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[k + radius] *
                           tmp[(static_cast<size_t>(reflect(y + k, h)) * w + x) * 3 + c];
                out.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
            }
    return out;
}

namespace {

uint8_t quantize(double v) {
    return static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

Image adjust_brightness(const Image& img, double factor) {
    Image out(img.height, img.width);
    for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = quantize(img.data[i] * factor);
    return out;
}

Image adjust_contrast(const Image& img, double factor) {
    double mean_gray = 0.0;
    const size_t n = img.pixel_count();
    for (size_t i = 0; i < n; ++i)
        mean_gray += luma(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
    mean_gray /= static_cast<double>(n);
    Image out(img.height, img.width);
    for (size_t i = 0; i < img.data.size(); ++i)
        out.data[i] = quantize(mean_gray + (img.data[i] - mean_gray) * factor);
    return out;
}

Image adjust_saturation(const Image& img, double factor) {
    Image out(img.height, img.width);
    const size_t n = img.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        const double gray = luma(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
        for (int c = 0; c < 3; ++c)
            out.data[3 * i + c] = quantize(gray + (img.data[3 * i + c] - gray) * factor);
    }
    return out;
}

Image adjust_hue(const Image& img, double shift_fraction) {
    const double shift_deg = shift_fraction * 360.0;
    Image out(img.height, img.width);
    const size_t n = img.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        Hsv hsv = rgb_to_hsv(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
        hsv.h = std::fmod(hsv.h + shift_deg + 360.0, 360.0);
        hsv_to_rgb(hsv, out.data[3 * i], out.data[3 * i + 1], out.data[3 * i + 2]);
    }
    return out;
}

Image to_grayscale(const Image& img) {
    Image out(img.height, img.width);
    const size_t n = img.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        const uint8_t g =
            quantize(luma(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]));
        out.data[3 * i] = out.data[3 * i + 1] = out.data[3 * i + 2] = g;
    }
    return out;
}

}  // namespace

Image aug1_view(const Image& patch, Rng& rng, const Aug1Config& config) {
    Image view = patch;
    if (rng.bernoulli(config.flip_prob)) view = flip_horizontal(view);
    if (config.brightness > 0.0) {
        const double f = rng.uniform(std::max(0.0, 1.0 - config.brightness), 1.0 + config.brightness);
        view = adjust_brightness(view, f);
    }
    if (config.contrast > 0.0) {
        const double f = rng.uniform(std::max(0.0, 1.0 - config.contrast), 1.0 + config.contrast);
        view = adjust_contrast(view, f);
    }
    if (config.saturation > 0.0) {
        const double f = rng.uniform(std::max(0.0, 1.0 - config.saturation), 1.0 + config.saturation);
        view = adjust_saturation(view, f);
    }
    if (config.hue > 0.0) {
        const double s = rng.uniform(-config.hue, config.hue);
        view = adjust_hue(view, s);
    }
    if (rng.bernoulli(config.grayscale_prob)) view = to_grayscale(view);
    if (rng.bernoulli(config.blur_prob)) {
        const double sigma = rng.uniform(config.blur_sigma_min, config.blur_sigma_max);
        view = gaussian_blur(view, sigma);
    }
    return view;
}

PatchRecord aug1_view(const PatchRecord& patch, Rng& rng, const Aug1Config& config,
                      const tiling::TissueParams& tissue) {
    PatchRecord out = patch;
    out.pixels = aug1_view(patch.pixels, rng, config);
    out.tissue_fraction = tiling::tissue_fraction(out.pixels, tissue);
    out.mean_intensity = tiling::mean_intensity(out.pixels);
    return out;
}

}  // namespace wsigrade::stain
