#pragma once

#include <array>
#include <string>
#include <vector>

#include "wsigrade/core.hpp"
#include "wsigrade/manifest.hpp"
#include "wsigrade/nn.hpp"

namespace wsigrade::grader {

// Gated-free attention pooling: a_i = softmax_i( w^T tanh(V e_i + b_v) ).
// V carries a bias, w does not.
struct GraderSpec {
    nn::EncoderSpec encoder;
    int attention_dim = 64;
    bool ordinal = true;  // false: one-hot head with 6-way cross entropy

    int output_dim() const { return ordinal ? 5 : kNumIsupGrades; }

    nlohmann::json to_json() const {
        return nlohmann::json{{"kind", "isup_grader"},
                              {"encoder", encoder.to_json()},
                              {"attention_dim", attention_dim},
                              {"ordinal", ordinal}};
    }
    static GraderSpec from_json(const nlohmann::json& j) {
        GraderSpec s;
        s.encoder = nn::EncoderSpec::from_json(j.at("encoder"));
        s.attention_dim = j.at("attention_dim");
        s.ordinal = j.at("ordinal");
        return s;
    }
};

// Standalone attention operator on an l x E embedding matrix; weights are
// strictly positive and sum to one.
std::vector<double> attention_weights(const std::vector<double>& v_weight,  // A x E row-major
                                      const std::vector<double>& v_bias,    // A
                                      const std::vector<double>& w_vector,  // A
                                      const std::vector<double>& embeddings,  // l x E row-major
                                      int l, int embed_dim, int attention_dim);

// Mean binary cross entropy between the five sigmoid outputs and the ordinal
// target bits; outputs clamped to [1e-7, 1-1e-7].
double or_loss(const std::array<double, 5>& sigmoid_outputs, const OrdinalTarget& target);

struct GraderOutput {
    std::vector<double> scores;     // raw pre-sigmoid outputs (5, or 6 one-hot)
    std::vector<double> probs;      // sigmoid (ordinal) or softmax (one-hot)
    std::vector<double> attention;  // one weight per bag entry
};

// Full head on a bag of embeddings; exposed for tests and inference.
template <class T>
GraderOutput grade_forward(const GraderSpec& spec, const nn::ParamSet<T>& params,
                           const nn::Array<T>& embeddings);

// One-slide loss + gradients through the head and (optionally) the backbone.
// `bag_to_unique` maps bag entries onto rows of the distinct-patch batch.
template <class T>
T grader_forward_backward(const GraderSpec& spec, const nn::ParamSet<T>& params,
                          const std::vector<const Image*>& unique_images,
                          const std::vector<int>& bag_to_unique, int isup_grade, T grad_scale,
                          nn::ParamSet<T>* grads, bool train_backbone, GraderOutput* output);

// ---------------------------------------------------------------------------

struct FinetuneConfig {
    GraderSpec spec;
    int bag_size = 36;
    int epochs = 30;
    int batch_slides = 8;
    double lr = 3e-4;
    bool finetune_backbone = true;
    bool augment = true;
    uint64_t seed = 7;
};

struct GraderModel {
    GraderSpec spec;
    nn::ParamSet<float> params;
};

struct FinetuneResult {
    GraderModel model;
    std::vector<double> train_loss;
    std::vector<double> val_kappa;
    int best_epoch = -1;
};

// `init_backbone` (when non-null) seeds "backbone.*" from a pre-trained
// parameter set; otherwise the backbone starts randomly initialized.
FinetuneResult finetune(const std::vector<SlideRecord>& train_slides,
                        const std::vector<SlideRecord>& val_slides, const FinetuneConfig& config,
                        PatchStore& store, const nn::ParamSet<float>* init_backbone);

struct SlidePrediction {
    std::string slide_id;
    int isup = 0;
    std::vector<double> probs;
    std::vector<double> attention;            // per bag entry
    std::vector<int> bag_patch_indices;       // patch.index per bag entry
    std::vector<std::pair<int, double>> patch_attention;  // per distinct patch, summed, sorted desc
    double malignancy = 0.0;                  // P(grade >= 1)
};

SlidePrediction predict_slide(const GraderModel& model, const SlideRecord& slide,
                              PatchStore& store, int bag_size = 36);

void save_model(const std::string& path, const GraderModel& model,
                const nlohmann::json& extra = nlohmann::json::object());
GraderModel load_model(const std::string& path);

}  // namespace wsigrade::grader
