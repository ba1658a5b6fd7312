#include "wsigrade/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "wsigrade/manifest.hpp"

namespace wsigrade::synth {

namespace fs = std::filesystem;

SynthSpec SynthSpec::defaults() {
    SynthSpec spec;
    // class separation comes mostly from blob geometry; base tints stay close
    // so that per-slide stain jitter does not trivialize the task
    spec.textures[0] = ClassTexture{{233, 208, 222}, {214, 168, 198}, 10.0, 12.0, 20.0, 1.6};
    spec.textures[3] = ClassTexture{{228, 200, 217}, {168, 124, 176}, 34.0, 7.0, 11.0, 1.4};
    spec.textures[4] = ClassTexture{{224, 194, 213}, {140, 96, 156}, 90.0, 4.0, 6.5, 1.3};
    spec.textures[5] = ClassTexture{{219, 187, 208}, {112, 72, 134}, 230.0, 2.0, 3.8, 1.2};
    return spec;
}

void SynthSpec::validate() const {
    if (slides_per_grade < 1) throw ParamError("slides_per_grade must be >= 1");
    if (slide_size < cell || slide_size % cell != 0)
        throw ParamError("slide_size must be a positive multiple of the cell size");
    if (primary_fraction <= 0.0 || secondary_fraction <= 0.0 ||
        primary_fraction + secondary_fraction > 1.0)
        throw ParamError("lesion fractions must be positive and sum to at most 1");
    if (primary_fraction <= secondary_fraction)
        throw ParamError("primary lesion fraction must exceed the secondary fraction");
    for (int cls : {0, 3, 4, 5})
        if (!textures.count(cls))
            throw ParamError("missing texture for class " + std::to_string(cls));
}

namespace {

// the (primary, secondary) variants per ISUP grade, cycled over slides
const std::vector<std::pair<int, int>>& grade_variants(int isup) {
    static const std::array<std::vector<std::pair<int, int>>, 6> table{{
        {{0, 0}},
        {{3, 3}},
        {{3, 4}},
        {{4, 3}},
        {{4, 4}, {3, 5}, {5, 3}},
        {{4, 5}, {5, 4}, {5, 5}},
    }};
    return table[static_cast<size_t>(validate_isup(isup))];
}

// connected random region of `count` cells grown from a random free start
std::vector<int> grow_region(int rows, int cols, const std::vector<bool>& taken, int count,
                             Rng& rng) {
    std::vector<int> free_cells;
    for (int i = 0; i < rows * cols; ++i)
        if (!taken[static_cast<size_t>(i)]) free_cells.push_back(i);
    if (static_cast<int>(free_cells.size()) < count)
        throw ParamError("lesion does not fit into the remaining tissue");

    for (int attempt = 0; attempt < 64; ++attempt) {
        const int start = free_cells[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int>(free_cells.size()) - 1))];
        std::vector<int> region{start};
        std::vector<bool> in_region(static_cast<size_t>(rows * cols), false);
        in_region[static_cast<size_t>(start)] = true;
        std::vector<int> frontier{start};
        while (static_cast<int>(region.size()) < count && !frontier.empty()) {
            const size_t pick =
                static_cast<size_t>(rng.uniform_int(0, static_cast<int>(frontier.size()) - 1));
            const int cell = frontier[pick];
            const int r = cell / cols, c = cell % cols;
            std::vector<int> neighbors;
            if (r > 0) neighbors.push_back(cell - cols);
            if (r + 1 < rows) neighbors.push_back(cell + cols);
            if (c > 0) neighbors.push_back(cell - 1);
            if (c + 1 < cols) neighbors.push_back(cell + 1);
            std::vector<int> open;
            for (int nb : neighbors)
                if (!taken[static_cast<size_t>(nb)] && !in_region[static_cast<size_t>(nb)])
                    open.push_back(nb);
            if (open.empty()) {
                frontier.erase(frontier.begin() + static_cast<std::ptrdiff_t>(pick));
                continue;
            }
            const int next =
                open[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(open.size()) - 1))];
            region.push_back(next);
            in_region[static_cast<size_t>(next)] = true;
            frontier.push_back(next);
        }
        if (static_cast<int>(region.size()) == count) return region;
    }
    throw ParamError("could not grow a connected lesion region");
}

}  // namespace

std::vector<SlidePlan> plan_corpus(const SynthSpec& spec) {
    spec.validate();
    std::vector<SlidePlan> plans;
    const int rows = spec.slide_size / spec.cell;
    const int cols = rows;
    const int n_cells = rows * cols;

    const std::array<std::pair<std::string, int>, 3> splits{{
        {"train", spec.slides_per_grade},
        {"val", spec.val_per_grade},
        {"test", spec.test_per_grade},
    }};
    for (const auto& [split, per_grade] : splits) {
        for (int grade = 0; grade < kNumIsupGrades; ++grade) {
            const auto& variants = grade_variants(grade);
            for (int idx = 0; idx < per_grade; ++idx) {
                SlidePlan plan;
                char buf[64];
                std::snprintf(buf, sizeof(buf), "g%d_%s_%03d", grade, split.c_str(), idx);
                plan.slide_id = buf;
                plan.split = split;
                plan.isup = grade;
                const auto [p, s] = variants[static_cast<size_t>(idx) % variants.size()];
                plan.primary = gleason_from_int(p);
                plan.secondary = gleason_from_int(s);
                plan.grid_rows = rows;
                plan.grid_cols = cols;
                plan.cell_class.assign(static_cast<size_t>(n_cells), 0);
                plan.render_seed = mix_seed(spec.seed, string_salt(plan.slide_id));

                if (grade >= 1) {
                    Rng rng(mix_seed(spec.seed, string_salt(plan.slide_id), 0x1e510));
                    const int primary_cells = std::max(
                        1, static_cast<int>(std::lround(spec.primary_fraction * n_cells)));
                    const int secondary_cells = std::max(
                        1, static_cast<int>(std::lround(spec.secondary_fraction * n_cells)));
                    std::vector<bool> taken(static_cast<size_t>(n_cells), false);
                    for (int cell : grow_region(rows, cols, taken, primary_cells, rng)) {
                        plan.cell_class[static_cast<size_t>(cell)] = p;
                        taken[static_cast<size_t>(cell)] = true;
                    }
                    for (int cell : grow_region(rows, cols, taken, secondary_cells, rng))
                        plan.cell_class[static_cast<size_t>(cell)] = s;
                }
                plans.push_back(std::move(plan));
            }
        }
    }
    return plans;
}

RenderedSlide render_slide(const SynthSpec& spec, const SlidePlan& plan) {
    Rng rng(plan.render_seed);
    RenderedSlide out;
    out.image = Image::filled(spec.slide_size, spec.slide_size, 255, 255, 255);
    for (int cls : {3, 4, 5})
        if (std::find(plan.cell_class.begin(), plan.cell_class.end(), cls) !=
            plan.cell_class.end())
            out.lesion_masks.emplace(cls, Mask(spec.slide_size, spec.slide_size));

    std::array<double, 3> tint;
    for (double& t : tint) t = rng.uniform(1.0 - spec.tint_jitter, 1.0 + spec.tint_jitter);

    for (int cell_idx = 0; cell_idx < plan.grid_rows * plan.grid_cols; ++cell_idx) {
        const int cy = (cell_idx / plan.grid_cols) * spec.cell;
        const int cx = (cell_idx % plan.grid_cols) * spec.cell;
        const int cls = plan.cell_class[static_cast<size_t>(cell_idx)];
        const ClassTexture& tex = spec.textures.at(cls);
        Rng cell_rng = rng.derive(static_cast<uint64_t>(cell_idx));

        // tissue footprint: an off-center rectangle covering 80-96% per axis
        const double coverage = cell_rng.uniform(0.80, 0.96);
        const int side = static_cast<int>(std::lround(spec.cell * std::sqrt(coverage)));
        const int max_off = spec.cell - side;
        const int oy = cell_rng.uniform_int(0, max_off);
        const int ox = cell_rng.uniform_int(0, max_off);

        // base tint with pixel noise
        for (int y = oy; y < oy + side; ++y)
            for (int x = ox; x < ox + side; ++x)
                for (int c = 0; c < 3; ++c) {
                    const int noise = cell_rng.uniform_int(-spec.pixel_noise, spec.pixel_noise);
                    const double value = tex.base_color[static_cast<size_t>(c)] * tint[static_cast<size_t>(c)] + noise;
                    out.image.at(cy + y, cx + x, c) =
                        static_cast<uint8_t>(std::clamp(std::lround(value), 0L, 255L));
                }

        // nuclei blobs
        const int blob_count = std::max(
            0, static_cast<int>(std::lround(tex.blob_density * cell_rng.uniform(0.85, 1.15))));
        for (int bidx = 0; bidx < blob_count; ++bidx) {
            const double bx = cell_rng.uniform(ox + 2.0, ox + side - 2.0);
            const double by = cell_rng.uniform(oy + 2.0, oy + side - 2.0);
            const double radius = cell_rng.uniform(tex.radius_min, tex.radius_max);
            const double ratio = cell_rng.uniform(1.0, tex.anisotropy);
            const double theta = cell_rng.uniform(0.0, 3.14159265358979323846);
            const double a = radius * ratio, b = radius / ratio;
            const double ct = std::cos(theta), st = std::sin(theta);
            std::array<double, 3> color;
            for (int c = 0; c < 3; ++c)
                color[static_cast<size_t>(c)] =
                    std::clamp(tex.blob_color[static_cast<size_t>(c)] * tint[static_cast<size_t>(c)] +
                                   cell_rng.uniform_int(-10, 10),
                               0.0, 255.0);
            const int y_lo = std::max(oy, static_cast<int>(std::floor(by - a)));
            const int y_hi = std::min(oy + side - 1, static_cast<int>(std::ceil(by + a)));
            const int x_lo = std::max(ox, static_cast<int>(std::floor(bx - a)));
            const int x_hi = std::min(ox + side - 1, static_cast<int>(std::ceil(bx + a)));
            for (int y = y_lo; y <= y_hi; ++y)
                for (int x = x_lo; x <= x_hi; ++x) {
                    const double dx = x - bx, dy = y - by;
                    const double u = (dx * ct + dy * st) / a;
                    const double v = (-dx * st + dy * ct) / b;
                    if (u * u + v * v <= 1.0)
                        for (int c = 0; c < 3; ++c)
                            out.image.at(cy + y, cx + x, c) =
                                static_cast<uint8_t>(color[static_cast<size_t>(c)]);
                }
        }

        if (cls >= 3) {
            Mask& mask = out.lesion_masks.at(cls);
            for (int y = oy; y < oy + side; ++y)
                for (int x = ox; x < ox + side; ++x) mask.at(cy + y, cx + x) = 255;
        }
    }
    return out;
}

SlideRecord record_from_plan(const SlidePlan& plan) {
    SlideRecord rec;
    rec.slide_id = plan.slide_id;
    rec.primary_gg = plan.primary;
    rec.secondary_gg = plan.secondary;
    rec.isup = plan.isup;
    rec.split = plan.split;
    validate_slide(rec);
    return rec;
}

int patch_truth(const SlidePlan& plan, int patch_index) {
    if (patch_index < 0 || patch_index >= static_cast<int>(plan.cell_class.size()))
        throw ParamError("patch index outside the slide grid");
    return plan.cell_class[static_cast<size_t>(patch_index)];
}

CorpusStats corpus_stats(const std::vector<SlideRecord>& records,
                         const std::vector<SlidePlan>* plans) {
    if (records.empty()) throw ParamError("corpus_stats: empty corpus");
    CorpusStats stats;
    for (const auto& rec : records) stats.slides_per_grade[static_cast<size_t>(rec.isup)] += 1;
    for (int g = 0; g < kNumIsupGrades; ++g)
        if (stats.slides_per_grade[static_cast<size_t>(g)] == 0)
            stats.warnings.push_back("no slides with ISUP grade " + std::to_string(g));
    if (plans) {
        for (const auto& plan : *plans)
            for (int cls : plan.cell_class) stats.patch_class_counts[cls] += 1;
    }
    return stats;
}

std::vector<SlideRecord> write_corpus(const SynthSpec& spec, const std::string& out_dir) {
    const auto plans = plan_corpus(spec);
    fs::create_directories(fs::path(out_dir) / "slides");
    fs::create_directories(fs::path(out_dir) / "masks");

    std::vector<SlideRecord> records;
    records.reserve(plans.size());
    for (const auto& plan : plans) {
        RenderedSlide rendered = render_slide(spec, plan);
        SlideRecord rec = record_from_plan(plan);
        rec.image_path = "slides/" + plan.slide_id + ".png";
        save_png((fs::path(out_dir) / rec.image_path).string(), rendered.image);
        for (const auto& [cls, mask] : rendered.lesion_masks) {
            const std::string mask_path =
                "masks/" + plan.slide_id + "_gg" + std::to_string(cls) + ".png";
            save_mask_png((fs::path(out_dir) / mask_path).string(), mask);
            rec.mask_paths[cls] = mask_path;
        }
        records.push_back(std::move(rec));
    }
    write_slide_manifest((fs::path(out_dir) / "corpus.jsonl").string(), records);
    return records;
}

}  // namespace wsigrade::synth
