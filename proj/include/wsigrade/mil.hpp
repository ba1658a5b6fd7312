#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <string>
#include <vector>

#include "wsigrade/core.hpp"
#include "wsigrade/manifest.hpp"
#include "wsigrade/nn.hpp"
#include "wsigrade/tiling.hpp"

namespace wsigrade::mil {

// Instance class columns: {benign, GG3, GG4, GG5}.
constexpr int kNumClasses = 4;
constexpr std::array<int, 4> kClassValues{0, 3, 4, 5};

// l x 4 row-stochastic matrix of per-patch class probabilities.
struct InstanceProbs {
    int count = 0;
    std::vector<double> values;  // count x 4, row-major

    double at(int row, int cls) const { return values[static_cast<size_t>(row) * kNumClasses + cls]; }
    void validate() const;
};

// Bag-level probabilities / targets over GG classes j in {3,4,5}.
using BagProbs = std::array<double, 3>;
using BagTarget = std::array<int, 3>;

// Deterministic top-k selection per class column: value descending, row index
// ascending on ties. Returns the selected row indices per class.
std::array<std::vector<int>, 3> topk_rows(const InstanceProbs& probs, int k);

// Eq.-style pooling: per GG class, the mean of the k largest instance
// probabilities in the bag.
BagProbs topk_bag_pool(const InstanceProbs& probs, int k);

// Multilabel BCE over the three bag probabilities, mean across classes.
// Probabilities are clamped to [eps, 1-eps], eps = 1e-7.
double bag_loss(const BagProbs& b, const BagTarget& y);

// dL/dp for the composition bag_loss(topk_bag_pool(p), y); exposed for the
// gradient checks and reused by training.
std::vector<double> bag_loss_pool_backward(const InstanceProbs& probs, int k, const BagTarget& y);

// y_j = 1 iff GG j appears in the slide's (primary, secondary) pair.
// Benign slides are excluded from Module-1 training.
BagTarget bag_target_from_slide(const SlideRecord& slide);

// ---------------------------------------------------------------------------
// Training (instance classifier = encoder backbone + linear head + softmax)
// ---------------------------------------------------------------------------

struct Module1Config {
    nn::EncoderSpec encoder;
    int bag_size = 36;
    int k = 4;
    int epochs = 35;
    int batch_slides = 8;
    double lr = 3e-4;
    bool augment = true;  // random flips / quarter turns per patch per epoch
    uint64_t seed = 7;
};

struct Module1Model {
    nn::EncoderSpec encoder;
    nn::MLPSpec head;  // embed_dim -> 4
    nn::ParamSet<float> params;

    nlohmann::json spec_json() const;
};

struct Module1Result {
    Module1Model model;
    std::vector<double> train_loss;      // per epoch
    std::vector<double> val_score;       // mean of accuracy and macro F1
    int best_epoch = -1;                 // index into val_score, -1 without validation
};

// Templated one-bag loss/gradient core so tests can run it in double.
// `bag_images` follow select_bag order; duplicates should repeat pointers.
template <class T>
struct BagStep {
    T loss;
    InstanceProbs probs;
};

template <class T>
BagStep<T> bag_forward_backward(const nn::EncoderSpec& encoder, const nn::MLPSpec& head,
                                const nn::ParamSet<T>& params,
                                const std::vector<const Image*>& bag_images,
                                const std::vector<int>& bag_to_unique, int unique_count,
                                const BagTarget& target, int k, T grad_scale,
                                nn::ParamSet<T>* grads);

Module1Result train_module1(const std::vector<SlideRecord>& train_slides,
                            const std::vector<SlideRecord>& val_slides,
                            const Module1Config& config, PatchStore& store);

// Argmax class with its probability as the confidence; ties resolve to the
// lowest class index (benign < GG3 < GG4 < GG5).
std::vector<PatchRecord> pseudo_label(const Module1Model& model,
                                      const std::vector<PatchRecord>& patches, PatchStore& store);

// Bag-level multilabel prediction quality, used for model selection.
struct BagEval {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double score() const { return 0.5 * (accuracy + macro_f1); }
};
BagEval evaluate_bags(const Module1Model& model, const std::vector<SlideRecord>& slides,
                      PatchStore& store, int bag_size, int k);

// ---------------------------------------------------------------------------
// Balanced dataset construction
// ---------------------------------------------------------------------------

struct BalancedDataset {
    std::vector<PatchRecord> patches;
    std::array<size_t, 4> per_class_counts{};  // order of kClassValues
    std::vector<std::string> warnings;
};

// Per class: sort by tissue fraction descending and keep the top `per_class`
// (capped at availability with a warning).
BalancedDataset build_balanced_dataset(const std::vector<PatchRecord>& labeled, int per_class,
                                       double min_confidence = 0.0);

}  // namespace wsigrade::mil
