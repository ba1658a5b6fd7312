#include "wsigrade/tiling.hpp"

#include <algorithm>
#include <numeric>

namespace wsigrade::tiling {

double mean_intensity(const Image& patch) {
    if (patch.empty()) return 0.0;
    uint64_t sum = 0;
    for (uint8_t v : patch.data) sum += v;
    return static_cast<double>(sum) / static_cast<double>(patch.data.size());
}

double tissue_fraction(const Image& patch, const TissueParams& params) {
    if (patch.empty()) return 0.0;
    size_t tissue = 0;
    const size_t n = patch.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        const Hsv hsv = rgb_to_hsv(patch.data[3 * i], patch.data[3 * i + 1], patch.data[3 * i + 2]);
        if (hsv.s > params.saturation_min && hsv.v < params.value_max) ++tissue;
    }
    return static_cast<double>(tissue) / static_cast<double>(n);
}

std::vector<PatchRecord> extract_patches(const Image& slide, const std::string& slide_id,
                                         const TilingConfig& config) {
    if (slide.empty()) throw EmptySlideError("slide " + slide_id + " has no pixels");
    const int ps = config.patch_size;
    if (ps < 1) throw ParamError("patch size must be positive");

    const int rows = (slide.height + ps - 1) / ps;
    const int cols = (slide.width + ps - 1) / ps;

    std::vector<PatchRecord> out;
    out.reserve(static_cast<size_t>(rows) * cols);
    for (int ty = 0; ty < rows; ++ty) {
        for (int tx = 0; tx < cols; ++tx) {
            Image patch = Image::filled(ps, ps, 255, 255, 255);
            const int y0 = ty * ps, x0 = tx * ps;
            const int copy_h = std::min(ps, slide.height - y0);
            const int copy_w = std::min(ps, slide.width - x0);
            for (int y = 0; y < copy_h; ++y)
                for (int x = 0; x < copy_w; ++x)
                    for (int c = 0; c < 3; ++c)
                        patch.at(y, x, c) = slide.at(y0 + y, x0 + x, c);

            PatchRecord rec;
            rec.slide_id = slide_id;
            rec.index = ty * cols + tx;
            rec.tissue_fraction = tissue_fraction(patch, config.tissue);
            rec.mean_intensity = mean_intensity(patch);
            rec.pixels = std::move(patch);
            out.push_back(std::move(rec));
        }
    }
    return out;
}

std::vector<PatchRecord> select_bag(const std::vector<PatchRecord>& patches, int n) {
    if (patches.empty()) throw EmptySlideError("cannot select a bag from zero patches");
    if (n < 1) throw ParamError("bag size must be >= 1");

    std::vector<size_t> order(patches.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (patches[a].mean_intensity != patches[b].mean_intensity)
            return patches[a].mean_intensity < patches[b].mean_intensity;
        return patches[a].index < patches[b].index;
    });

    std::vector<PatchRecord> bag;
    bag.reserve(static_cast<size_t>(n));
    const size_t m = std::min(order.size(), static_cast<size_t>(n));
    for (size_t i = 0; i < m; ++i) bag.push_back(patches[order[i]]);
    // shorter slides: cycle the sorted list until the bag is full
    size_t cursor = 0;
    while (bag.size() < static_cast<size_t>(n)) {
        bag.push_back(patches[order[cursor % order.size()]]);
        ++cursor;
    }
    return bag;
}

}  // namespace wsigrade::tiling
