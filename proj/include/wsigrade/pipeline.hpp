#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wsigrade/grader.hpp"
#include "wsigrade/mil.hpp"
#include "wsigrade/mintoml.hpp"
#include "wsigrade/nn.hpp"
#include "wsigrade/ssl.hpp"
#include "wsigrade/stain.hpp"
#include "wsigrade/synth.hpp"

namespace wsigrade::pipeline {

// Whole-run configuration. Construction defaults follow the published
// training recipe (batch sizes 8/40/8, epochs 35/50/30, Adam at 3e-4 with
// cosine annealing); the desk preset shrinks the epoch counts so the full
// pipeline fits a single-CPU budget.
struct PipelineConfig {
    uint64_t seed = 7;

    // corpus
    int per_grade = 10;
    int val_per_grade = 3;
    int test_per_grade = 3;
    int slide_size = 1024;
    double tint_jitter = 0.05;
    double primary_fraction = 0.42;
    double secondary_fraction = 0.26;

    // tiling
    int patch_size = 256;
    int bag_size = 36;

    nn::EncoderSpec encoder;

    // module 1
    int m1_epochs = 35;
    int m1_batch = 8;
    int m1_k = 4;
    double m1_lr = 3e-4;
    bool m1_augment = true;

    // module 2
    int m2_epochs = 50;
    int m2_batch = 40;
    double m2_lr = 3e-4;
    double lambda = 0.02;
    double momentum = 0.99;
    int per_class = 400;
    double m2_val_fraction = 0.1;
    std::string stain_mode = "centered";
    double min_confidence = 0.0;

    // module 3
    int m3_epochs = 30;
    int m3_batch = 8;
    double m3_lr = 3e-4;
    int attention_dim = 64;
    bool finetune_backbone = true;
    bool m3_augment = true;

    bool render_png = true;

    static PipelineConfig desk();

    void apply(const mintoml::Doc& doc);
    mintoml::Doc to_toml() const;
    void validate() const;

    synth::SynthSpec synth_spec() const;
    stain::AugmentationConfig augmentation() const;
};

// Ablation variants of the fine-tuning stage.
enum class Variant { Main, NoOr, NoSsl };
std::string variant_name(Variant v);
std::string grader_checkpoint_name(Variant v);
std::string report_dir_name(Variant v);

// Individual stages; each is idempotent and records itself in
// <run_dir>/manifest.json. Later stages read the earlier stages' outputs from
// the run directory.
bool stage_synth(const PipelineConfig& config, const std::string& run_dir);
bool stage_tile(const PipelineConfig& config, const std::string& run_dir);
bool stage_train_mil(const PipelineConfig& config, const std::string& run_dir);
bool stage_build_ssl(const PipelineConfig& config, const std::string& run_dir);
bool stage_pretrain(const PipelineConfig& config, const std::string& run_dir);
bool stage_finetune(const PipelineConfig& config, const std::string& run_dir, Variant variant);
bool stage_evaluate(const PipelineConfig& config, const std::string& run_dir, Variant variant);

// Runs every stage in order (plus the requested ablation variants); returns
// the run directory. Stages already marked complete are skipped.
std::string run_pipeline(const PipelineConfig& config, const std::string& run_dir,
                         const std::vector<Variant>& ablations = {});

// Helpers shared with the CLI.
std::string default_runs_root();
std::string timestamped_run_dir(const std::string& root, uint64_t seed);

// Tiling as a reusable operation: tiles every slide of `records` (image
// paths relative to `input_root`), writes patch PNGs under
// <output_dir>/patches and a tiled manifest at <output_dir>/<manifest_name>.
std::vector<SlideRecord> tile_corpus(const std::vector<SlideRecord>& records,
                                     const std::string& input_root, const std::string& output_dir,
                                     const std::string& image_prefix, int patch_size,
                                     const std::string& manifest_name = "tiled.jsonl");

}  // namespace wsigrade::pipeline
