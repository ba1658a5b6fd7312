#pragma once

#include <string>
#include <vector>

#include "wsigrade/core.hpp"
#include "wsigrade/manifest.hpp"
#include "wsigrade/nn.hpp"
#include "wsigrade/stain.hpp"

namespace wsigrade::ssl {

// Teacher and student share the backbone architecture; the heads are
// asymmetric: the student stacks a second MLP on top of the first, the
// teacher carries the first head only and never receives gradients.
struct SslSpecs {
    nn::EncoderSpec encoder;
    nn::MLPSpec fhead;
    nn::MLPSpec shead;

    static SslSpecs defaults(const nn::EncoderSpec& encoder) {
        SslSpecs s;
        s.encoder = encoder;
        s.fhead = nn::MLPSpec{{encoder.embed_dim, 256, 128}};
        s.shead = nn::MLPSpec{{128, 128, 128}};
        return s;
    }

    int projection_dim() const { return shead.output_dim(); }

    nlohmann::json to_json() const {
        return nlohmann::json{{"kind", "ssl_teacher_student"},
                              {"encoder", encoder.to_json()},
                              {"fhead", fhead.to_json()},
                              {"shead", shead.to_json()}};
    }
};

template <class T>
struct TeacherStudentState {
    SslSpecs specs;
    nn::ParamSet<T> student;  // backbone.* + fhead.* + shead.*
    nn::ParamSet<T> teacher;  // backbone.* + fhead.*
    double momentum = 0.99;
    double lambda = 0.02;
};

template <class T>
TeacherStudentState<T> init_teacher_student(const SslSpecs& specs, Rng& rng, double momentum = 0.99,
                                            double lambda = 0.02);

// shead(fhead(backbone(x)))
template <class T>
nn::Array<T> student_predict(const TeacherStudentState<T>& state, const nn::Array<T>& input);
// fhead(backbone(x)) with the teacher's parameters; no gradients ever flow
// through this path.
template <class T>
nn::Array<T> teacher_predict(const TeacherStudentState<T>& state, const nn::Array<T>& input);

// Rows scaled to unit L2 norm (epsilon 1e-12); returns the original norms.
template <class T>
std::vector<T> l2_normalize_rows(nn::Array<T>& m);

// Symmetric crossed-MSE distillation loss over L2-normalized predictions:
//   ( MSE(n(s(a)), n(t(b))) + MSE(n(s(b)), n(t(a))) ) / 2
// When `grads` is given, d(scale * loss)/d(student params) is accumulated.
template <class T>
T loss_aug(const TeacherStudentState<T>& state, const nn::Array<T>& view_a,
           const nn::Array<T>& view_b, T scale = T(1), nn::ParamSet<T>* grads = nullptr);

// loss_aug(d1, d2) + lambda * loss_aug(sd1, sd2)
template <class T>
struct SslLosses {
    T total;
    T aug1;
    T aug2;
};

template <class T>
SslLosses<T> total_loss(const TeacherStudentState<T>& state, const nn::Array<T>& d1,
                        const nn::Array<T>& d2, const nn::Array<T>& sd1, const nn::Array<T>& sd2,
                        nn::ParamSet<T>* grads = nullptr);

// One optimization step: backpropagate the total loss into the student, Adam
// step, then EMA-update every shared teacher structure.
template <class T>
SslLosses<T> pretrain_step(TeacherStudentState<T>& state, nn::Optimizer<T>& optimizer,
                           const nn::Array<T>& d1, const nn::Array<T>& d2, const nn::Array<T>& sd1,
                           const nn::Array<T>& sd2);

// ---------------------------------------------------------------------------
// Pre-training driver
// ---------------------------------------------------------------------------

struct PretrainConfig {
    SslSpecs specs;
    double lambda = 0.02;
    double momentum = 0.99;
    int epochs = 50;
    int batch = 40;
    double lr = 3e-4;
    double val_fraction = 0.1;
    uint64_t seed = 7;
    stain::AugmentationConfig augment;
};

struct PretrainResult {
    TeacherStudentState<float> state;  // best-validation snapshot
    std::vector<double> train_loss;    // epoch means of the total loss
    std::vector<double> val_loss;
    int best_epoch = -1;
};

PretrainResult pretrain(const std::vector<PatchRecord>& corpus, const PretrainConfig& config,
                        PatchStore& store);

// Checkpoint helpers: student and teacher stored side by side under
// "student." / "teacher." name prefixes.
void save_state(const std::string& path, const TeacherStudentState<float>& state,
                const nlohmann::json& extra = nlohmann::json::object());
TeacherStudentState<float> load_state(const std::string& path);

}  // namespace wsigrade::ssl
