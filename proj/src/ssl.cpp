#include "wsigrade/ssl.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace wsigrade::ssl {

using nn::Array;
using nn::ParamSet;

template <class T>
TeacherStudentState<T> init_teacher_student(const SslSpecs& specs, Rng& rng, double momentum,
                                            double lambda) {
    TeacherStudentState<T> state;
    state.specs = specs;
    state.momentum = momentum;
    state.lambda = lambda;
    nn::init_encoder_params(specs.encoder, rng, state.student, "backbone.");
    nn::init_mlp_params(specs.fhead, rng, state.student, "fhead.");
    nn::init_mlp_params(specs.shead, rng, state.student, "shead.");
    // the teacher starts as a copy of the shared student structure
    for (size_t i = 0; i < state.student.names.size(); ++i) {
        const auto& name = state.student.names[i];
        if (name.rfind("shead.", 0) == 0) continue;
        state.teacher.add(name, state.student.arrays[i]);
    }
    return state;
}

template <class T>
Array<T> student_predict(const TeacherStudentState<T>& state, const Array<T>& input) {
    Array<T> embed = nn::encoder_forward(state.specs.encoder, state.student, "backbone.", input);
    Array<T> first = nn::mlp_forward(state.specs.fhead, state.student, "fhead.", embed);
    return nn::mlp_forward(state.specs.shead, state.student, "shead.", first);
}

template <class T>
Array<T> teacher_predict(const TeacherStudentState<T>& state, const Array<T>& input) {
    Array<T> embed = nn::encoder_forward(state.specs.encoder, state.teacher, "backbone.", input);
    return nn::mlp_forward(state.specs.fhead, state.teacher, "fhead.", embed);
}

template <class T>
std::vector<T> l2_normalize_rows(Array<T>& m) {
    constexpr double kEps = 1e-12;
    const int rows = m.shape[0], cols = m.shape[1];
    std::vector<T> norms(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        T* row = m.ptr() + static_cast<int64_t>(r) * cols;
        double sq = 0.0;
        for (int c = 0; c < cols; ++c) sq += static_cast<double>(row[c]) * row[c];
        const T norm = static_cast<T>(std::sqrt(sq));
        norms[static_cast<size_t>(r)] = norm;
        const T denom = static_cast<T>(norm + kEps);
        for (int c = 0; c < cols; ++c) row[c] /= denom;
    }
    return norms;
}

namespace {

// dL/dx from dL/dy for y = x / (|x| + eps), using the stored y and |x|
template <class T>
void l2_normalize_backward_row(const T* y, T norm, const T* dy, T* dx, int cols) {
    constexpr double kEps = 1e-12;
    const T denom = static_cast<T>(norm + kEps);
    double dot = 0.0;
    for (int c = 0; c < cols; ++c) dot += static_cast<double>(dy[c]) * y[c];
    if (static_cast<double>(norm) < 1e-30) {
        for (int c = 0; c < cols; ++c) dx[c] = dy[c] / denom;
        return;
    }
    for (int c = 0; c < cols; ++c)
        dx[c] = dy[c] / denom - static_cast<T>(static_cast<double>(y[c]) * dot / norm);
}

template <class T>
struct StudentForward {
    nn::EncoderCache<T> enc_cache;
    nn::MLPCache<T> fhead_cache;
    nn::MLPCache<T> shead_cache;
    Array<T> prediction;  // normalized in place by the caller
    std::vector<T> norms;
};

template <class T>
StudentForward<T> student_forward_cached(const TeacherStudentState<T>& state,
                                         const Array<T>& input, bool with_cache) {
    StudentForward<T> out;
    Array<T> embed = nn::encoder_forward(state.specs.encoder, state.student, "backbone.", input,
                                         with_cache ? &out.enc_cache : nullptr);
    Array<T> first = nn::mlp_forward(state.specs.fhead, state.student, "fhead.", embed,
                                     with_cache ? &out.fhead_cache : nullptr);
    out.prediction = nn::mlp_forward(state.specs.shead, state.student, "shead.", first,
                                     with_cache ? &out.shead_cache : nullptr);
    out.norms = l2_normalize_rows(out.prediction);
    return out;
}

template <class T>
void student_backward(const TeacherStudentState<T>& state, const StudentForward<T>& fwd,
                      const Array<T>& dprediction, ParamSet<T>& grads) {
    Array<T> dfirst({dprediction.shape[0], state.specs.shead.input_dim()});
    dfirst.fill(T(0));
    nn::mlp_backward(state.specs.shead, state.student, "shead.", fwd.shead_cache, dprediction,
                     grads, &dfirst);
    Array<T> dembed({dprediction.shape[0], state.specs.encoder.embed_dim});
    dembed.fill(T(0));
    nn::mlp_backward(state.specs.fhead, state.student, "fhead.", fwd.fhead_cache, dfirst, grads,
                     &dembed);
    nn::encoder_backward(state.specs.encoder, state.student, "backbone.", fwd.enc_cache, dembed,
                         grads);
}

// mean over all elements of (a - b)^2
template <class T>
T mse(const Array<T>& a, const Array<T>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return static_cast<T>(acc / static_cast<double>(a.data.size()));
}

}  // namespace

template <class T>
T loss_aug(const TeacherStudentState<T>& state, const Array<T>& view_a, const Array<T>& view_b,
           T scale, ParamSet<T>* grads) {
    if (view_a.shape != view_b.shape) throw ShapeError("loss_aug: view shapes differ");
    const bool with_grads = grads != nullptr;

    StudentForward<T> sa = student_forward_cached(state, view_a, with_grads);
    StudentForward<T> sb = student_forward_cached(state, view_b, with_grads);
    Array<T> ta = teacher_predict(state, view_a);
    Array<T> tb = teacher_predict(state, view_b);
    l2_normalize_rows(ta);
    l2_normalize_rows(tb);

    const T term_ab = mse(sa.prediction, tb);
    const T term_ba = mse(sb.prediction, ta);
    const T loss = (term_ab + term_ba) / T(2);
    if (!with_grads) return loss;

    const int rows = sa.prediction.shape[0];
    const int cols = sa.prediction.shape[1];
    const double count = static_cast<double>(rows) * cols;
    auto backprop = [&](const StudentForward<T>& fwd, const Array<T>& target) {
        Array<T> dnorm({rows, cols});
        for (size_t i = 0; i < dnorm.data.size(); ++i)
            dnorm.data[i] = static_cast<T>(2.0 *
                                           (static_cast<double>(fwd.prediction.data[i]) -
                                            static_cast<double>(target.data[i])) /
                                           count * static_cast<double>(scale) / 2.0);
        Array<T> dpred({rows, cols});
        for (int r = 0; r < rows; ++r)
            l2_normalize_backward_row(fwd.prediction.ptr() + static_cast<int64_t>(r) * cols,
                                      fwd.norms[static_cast<size_t>(r)],
                                      dnorm.ptr() + static_cast<int64_t>(r) * cols,
                                      dpred.ptr() + static_cast<int64_t>(r) * cols, cols);
        student_backward(state, fwd, dpred, *grads);
    };
    backprop(sa, tb);
    backprop(sb, ta);
    return loss;
}

template <class T>
SslLosses<T> total_loss(const TeacherStudentState<T>& state, const Array<T>& d1, const Array<T>& d2,
                        const Array<T>& sd1, const Array<T>& sd2, ParamSet<T>* grads) {
    SslLosses<T> losses{};
    losses.aug1 = loss_aug(state, d1, d2, T(1), grads);
    losses.aug2 = loss_aug(state, sd1, sd2, static_cast<T>(state.lambda), grads);
    losses.total = losses.aug1 + static_cast<T>(state.lambda) * losses.aug2;
    return losses;
}

template <class T>
SslLosses<T> pretrain_step(TeacherStudentState<T>& state, nn::Optimizer<T>& optimizer,
                           const Array<T>& d1, const Array<T>& d2, const Array<T>& sd1,
                           const Array<T>& sd2) {
    ParamSet<T> grads = state.student.zeros_like();
    const SslLosses<T> losses = total_loss(state, d1, d2, sd1, sd2, &grads);
    nn::adam_step(optimizer, state.student, grads);
    nn::ema_update(state.teacher, state.student, state.momentum);
    return losses;
}

// explicit instantiations
template TeacherStudentState<float> init_teacher_student<float>(const SslSpecs&, Rng&, double,
                                                                double);
template TeacherStudentState<double> init_teacher_student<double>(const SslSpecs&, Rng&, double,
                                                                  double);
template Array<float> student_predict<float>(const TeacherStudentState<float>&, const Array<float>&);
template Array<double> student_predict<double>(const TeacherStudentState<double>&,
                                               const Array<double>&);
template Array<float> teacher_predict<float>(const TeacherStudentState<float>&, const Array<float>&);
template Array<double> teacher_predict<double>(const TeacherStudentState<double>&,
                                               const Array<double>&);
template std::vector<float> l2_normalize_rows<float>(Array<float>&);
template std::vector<double> l2_normalize_rows<double>(Array<double>&);
template float loss_aug<float>(const TeacherStudentState<float>&, const Array<float>&,
                               const Array<float>&, float, ParamSet<float>*);
template double loss_aug<double>(const TeacherStudentState<double>&, const Array<double>&,
                                 const Array<double>&, double, ParamSet<double>*);
template SslLosses<float> total_loss<float>(const TeacherStudentState<float>&, const Array<float>&,
                                            const Array<float>&, const Array<float>&,
                                            const Array<float>&, ParamSet<float>*);
template SslLosses<double> total_loss<double>(const TeacherStudentState<double>&,
                                              const Array<double>&, const Array<double>&,
                                              const Array<double>&, const Array<double>&,
                                              ParamSet<double>*);
template SslLosses<float> pretrain_step<float>(TeacherStudentState<float>&, nn::Optimizer<float>&,
                                               const Array<float>&, const Array<float>&,
                                               const Array<float>&, const Array<float>&);
template SslLosses<double> pretrain_step<double>(TeacherStudentState<double>&,
                                                 nn::Optimizer<double>&, const Array<double>&,
                                                 const Array<double>&, const Array<double>&,
                                                 const Array<double>&);

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

namespace {

struct ViewBatch {
    Array<float> d1, d2, sd1, sd2;
};

ViewBatch make_views(const std::vector<const PatchRecord*>& records, PatchStore& store,
                     const stain::AugmentationConfig& aug, const Rng& base,
                     const std::vector<uint64_t>& salts) {
    std::vector<Image> d1, d2, sd1, sd2;
    d1.reserve(records.size());
    d2.reserve(records.size());
    sd1.reserve(records.size());
    sd2.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        const Image& img = store.get(*records[i]);
        Rng rng = base.derive(salts[i]);
        d1.push_back(stain::aug1_view(img, rng, aug.aug1));
        d2.push_back(stain::aug1_view(img, rng, aug.aug1));
        sd1.push_back(stain::stain_augment(img, stain::sample_stain_params(rng, aug)));
        sd2.push_back(stain::stain_augment(img, stain::sample_stain_params(rng, aug)));
    }
    auto pointers = [](const std::vector<Image>& imgs) {
        std::vector<const Image*> p;
        p.reserve(imgs.size());
        for (const auto& im : imgs) p.push_back(&im);
        return p;
    };
    ViewBatch batch;
    batch.d1 = nn::to_input_batch<float>(pointers(d1));
    batch.d2 = nn::to_input_batch<float>(pointers(d2));
    batch.sd1 = nn::to_input_batch<float>(pointers(sd1));
    batch.sd2 = nn::to_input_batch<float>(pointers(sd2));
    return batch;
}

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
}

}  // namespace

PretrainResult pretrain(const std::vector<PatchRecord>& corpus, const PretrainConfig& config,
                        PatchStore& store) {
    if (corpus.empty()) throw ParamError("pretrain: empty corpus");
    if (config.batch < 1) throw ParamError("pretrain: batch must be >= 1");

    Rng rng(config.seed);
    Rng init_rng = rng.derive(string_salt("init"));
    PretrainResult result;
    result.state = init_teacher_student<float>(config.specs, init_rng, config.momentum,
                                               config.lambda);

    // deterministic validation split
    std::vector<size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng = rng.derive(string_salt("valsplit"));
    shuffle_indices(order, split_rng);
    const size_t val_count =
        std::min(corpus.size() > 1 ? corpus.size() - 1 : size_t{0},
                 static_cast<size_t>(std::llround(config.val_fraction * corpus.size())));
    std::vector<size_t> val_idx(order.begin(), order.begin() + val_count);
    std::vector<size_t> train_idx(order.begin() + val_count, order.end());
    if (train_idx.empty()) throw ParamError("pretrain: corpus too small for the validation split");

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(train_idx.size()) + config.batch - 1) / config.batch;
    nn::Schedule schedule{config.lr, 0.0, steps_per_epoch * config.epochs};
    auto optimizer = nn::Optimizer<float>::for_params(result.state.student, schedule);

    TeacherStudentState<float> best_state = result.state;
    double best_val = std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng epoch_rng = rng.derive(string_salt("epoch"), static_cast<uint64_t>(epoch));
        shuffle_indices(train_idx, epoch_rng);
        const Rng view_rng = rng.derive(string_salt("views"), static_cast<uint64_t>(epoch));

        double epoch_loss = 0.0;
        int64_t batches = 0;
        for (size_t start = 0; start < train_idx.size(); start += config.batch) {
            const size_t end = std::min(train_idx.size(), start + config.batch);
            std::vector<const PatchRecord*> records;
            std::vector<uint64_t> salts;
            for (size_t i = start; i < end; ++i) {
                records.push_back(&corpus[train_idx[i]]);
                salts.push_back(static_cast<uint64_t>(train_idx[i]));
            }
            const ViewBatch views = make_views(records, store, config.augment, view_rng, salts);
            const SslLosses<float> losses =
                pretrain_step(result.state, optimizer, views.d1, views.d2, views.sd1, views.sd2);
            epoch_loss += static_cast<double>(losses.total);
            ++batches;
        }
        result.train_loss.push_back(epoch_loss / static_cast<double>(batches));

        if (!val_idx.empty()) {
            const Rng val_rng = rng.derive(string_salt("valviews"), static_cast<uint64_t>(epoch));
            double val_loss = 0.0;
            int64_t val_batches = 0;
            for (size_t start = 0; start < val_idx.size(); start += config.batch) {
                const size_t end = std::min(val_idx.size(), start + config.batch);
                std::vector<const PatchRecord*> records;
                std::vector<uint64_t> salts;
                for (size_t i = start; i < end; ++i) {
                    records.push_back(&corpus[val_idx[i]]);
                    salts.push_back(static_cast<uint64_t>(val_idx[i]));
                }
                const ViewBatch views = make_views(records, store, config.augment, val_rng, salts);
                const SslLosses<float> losses =
                    total_loss<float>(result.state, views.d1, views.d2, views.sd1, views.sd2);
                val_loss += static_cast<double>(losses.total);
                ++val_batches;
            }
            val_loss /= static_cast<double>(val_batches);
            result.val_loss.push_back(val_loss);
            if (val_loss < best_val) {
                best_val = val_loss;
                best_state = result.state;
                result.best_epoch = epoch;
            }
        }
    }
    if (result.best_epoch >= 0) result.state = std::move(best_state);
    return result;
}

void save_state(const std::string& path, const TeacherStudentState<float>& state,
                const nlohmann::json& extra) {
    nn::ParamSet<float> merged;
    for (size_t i = 0; i < state.student.names.size(); ++i)
        merged.add("student." + state.student.names[i], state.student.arrays[i]);
    for (size_t i = 0; i < state.teacher.names.size(); ++i)
        merged.add("teacher." + state.teacher.names[i], state.teacher.arrays[i]);
    nlohmann::json spec = state.specs.to_json();
    nlohmann::json meta = extra;
    meta["lambda"] = state.lambda;
    meta["momentum"] = state.momentum;
    nn::save_checkpoint(path, spec, merged, meta);
}

TeacherStudentState<float> load_state(const std::string& path) {
    nn::Checkpoint ckpt = nn::load_checkpoint(path);
    if (ckpt.spec.value("kind", "") != "ssl_teacher_student")
        throw IoError("not a teacher-student checkpoint: " + path);
    TeacherStudentState<float> state;
    state.specs.encoder = nn::EncoderSpec::from_json(ckpt.spec.at("encoder"));
    state.specs.fhead = nn::MLPSpec::from_json(ckpt.spec.at("fhead"));
    state.specs.shead = nn::MLPSpec::from_json(ckpt.spec.at("shead"));
    state.lambda = ckpt.extra.value("lambda", 0.02);
    state.momentum = ckpt.extra.value("momentum", 0.99);
    for (size_t i = 0; i < ckpt.params.names.size(); ++i) {
        const auto& name = ckpt.params.names[i];
        if (name.rfind("student.", 0) == 0)
            state.student.add(name.substr(8), ckpt.params.arrays[i]);
        else if (name.rfind("teacher.", 0) == 0)
            state.teacher.add(name.substr(8), ckpt.params.arrays[i]);
        else
            throw IoError("unexpected parameter '" + name + "' in " + path);
    }
    return state;
}

}  // namespace wsigrade::ssl
