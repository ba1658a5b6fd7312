#include "wsigrade/grader.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "wsigrade/metrics.hpp"
#include "wsigrade/tiling.hpp"

namespace wsigrade::grader {

using nn::Array;
using nn::ParamSet;

namespace {
constexpr double kEps = 1e-7;
}

std::vector<double> attention_weights(const std::vector<double>& v_weight,
                                      const std::vector<double>& v_bias,
                                      const std::vector<double>& w_vector,
                                      const std::vector<double>& embeddings, int l, int embed_dim,
                                      int attention_dim) {
    if (l < 1) throw ParamError("attention over an empty bag");
    if (v_weight.size() != static_cast<size_t>(attention_dim) * embed_dim ||
        v_bias.size() != static_cast<size_t>(attention_dim) ||
        w_vector.size() != static_cast<size_t>(attention_dim) ||
        embeddings.size() != static_cast<size_t>(l) * embed_dim)
        throw ShapeError("attention_weights: inconsistent shapes");

    std::vector<double> logits(static_cast<size_t>(l));
    for (int i = 0; i < l; ++i) {
        double logit = 0.0;
        for (int a = 0; a < attention_dim; ++a) {
            double pre = v_bias[static_cast<size_t>(a)];
            for (int e = 0; e < embed_dim; ++e)
                pre += v_weight[static_cast<size_t>(a) * embed_dim + e] *
                       embeddings[static_cast<size_t>(i) * embed_dim + e];
            logit += w_vector[static_cast<size_t>(a)] * std::tanh(pre);
        }
        logits[static_cast<size_t>(i)] = logit;
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    std::vector<double> weights(static_cast<size_t>(l));
    for (int i = 0; i < l; ++i) {
        weights[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
        sum += weights[static_cast<size_t>(i)];
    }
    for (double& w : weights) w /= sum;
    return weights;
}

double or_loss(const std::array<double, 5>& sigmoid_outputs, const OrdinalTarget& target) {
    double loss = 0.0;
    for (int j = 0; j < 5; ++j) {
        const double p = std::clamp(sigmoid_outputs[static_cast<size_t>(j)], kEps, 1.0 - kEps);
        loss += target.bits[static_cast<size_t>(j)] ? -std::log(p) : -std::log(1.0 - p);
    }
    return loss / 5.0;
}

// ---------------------------------------------------------------------------
// Head forward/backward over an l x E embedding matrix
// ---------------------------------------------------------------------------

namespace {

template <class T>
struct HeadCache {
    Array<T> embeddings;   // l x E
    Array<T> pre_tanh;     // l x A
    Array<T> tanh_out;     // l x A
    std::vector<T> attention;  // l
    Array<T> pooled;       // 1 x E
    Array<T> scores;       // 1 x out
};

template <class T>
void head_forward(const GraderSpec& spec, const ParamSet<T>& params, const Array<T>& embeddings,
                  HeadCache<T>& cache) {
    const int l = embeddings.shape[0];
    const int e_dim = spec.encoder.embed_dim;
    const int a_dim = spec.attention_dim;
    cache.embeddings = embeddings;
    cache.pre_tanh = nn::linear_forward(embeddings, params.at("attn.v.w"), params.at("attn.v.b"));
    cache.tanh_out = cache.pre_tanh;
    for (T& v : cache.tanh_out.data) v = std::tanh(v);

    const auto& w = params.at("attn.w");
    std::vector<T> logits(static_cast<size_t>(l), T(0));
    for (int i = 0; i < l; ++i)
        for (int a = 0; a < a_dim; ++a)
            logits[static_cast<size_t>(i)] +=
                w.data[static_cast<size_t>(a)] *
                cache.tanh_out.data[static_cast<size_t>(i) * a_dim + a];
    T mx = logits[0];
    for (T v : logits) mx = std::max(mx, v);
    T sum = T(0);
    cache.attention.assign(static_cast<size_t>(l), T(0));
    for (int i = 0; i < l; ++i) {
        cache.attention[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
        sum += cache.attention[static_cast<size_t>(i)];
    }
    for (T& a : cache.attention) a /= sum;

    cache.pooled = Array<T>({1, e_dim});
    for (int i = 0; i < l; ++i)
        for (int e = 0; e < e_dim; ++e)
            cache.pooled.data[static_cast<size_t>(e)] +=
                cache.attention[static_cast<size_t>(i)] *
                embeddings.data[static_cast<size_t>(i) * e_dim + e];

    cache.scores = nn::linear_forward(cache.pooled, params.at("fc.w"), params.at("fc.b"));
}

// dscores -> gradients of head parameters and of the embeddings
template <class T>
void head_backward(const GraderSpec& spec, const ParamSet<T>& params, const HeadCache<T>& cache,
                   const Array<T>& dscores, ParamSet<T>& grads, Array<T>& dembeddings) {
    const int l = cache.embeddings.shape[0];
    const int e_dim = spec.encoder.embed_dim;
    const int a_dim = spec.attention_dim;

    Array<T> dpooled({1, e_dim});
    nn::linear_backward(cache.pooled, params.at("fc.w"), dscores, grads.at("fc.w"),
                        grads.at("fc.b"), &dpooled);

    // z = sum_i a_i e_i
    std::vector<T> dattention(static_cast<size_t>(l), T(0));
    for (int i = 0; i < l; ++i) {
        T acc = T(0);
        for (int e = 0; e < e_dim; ++e) {
            const T g = dpooled.data[static_cast<size_t>(e)];
            acc += g * cache.embeddings.data[static_cast<size_t>(i) * e_dim + e];
            dembeddings.data[static_cast<size_t>(i) * e_dim + e] +=
                cache.attention[static_cast<size_t>(i)] * g;
        }
        dattention[static_cast<size_t>(i)] = acc;
    }

    // softmax backward over the bag
    T dot = T(0);
    for (int i = 0; i < l; ++i) dot += cache.attention[static_cast<size_t>(i)] * dattention[static_cast<size_t>(i)];
    std::vector<T> dlogits(static_cast<size_t>(l));
    for (int i = 0; i < l; ++i)
        dlogits[static_cast<size_t>(i)] =
            cache.attention[static_cast<size_t>(i)] * (dattention[static_cast<size_t>(i)] - dot);

    // logits_i = w . tanh_out_i
    auto& dw = grads.at("attn.w");
    Array<T> dtanh({l, a_dim});
    const auto& w = params.at("attn.w");
    for (int i = 0; i < l; ++i)
        for (int a = 0; a < a_dim; ++a) {
            dw.data[static_cast<size_t>(a)] +=
                dlogits[static_cast<size_t>(i)] *
                cache.tanh_out.data[static_cast<size_t>(i) * a_dim + a];
            dtanh.data[static_cast<size_t>(i) * a_dim + a] =
                dlogits[static_cast<size_t>(i)] * w.data[static_cast<size_t>(a)];
        }
    // through tanh
    for (size_t idx = 0; idx < dtanh.data.size(); ++idx) {
        const T t = cache.tanh_out.data[idx];
        dtanh.data[idx] *= (T(1) - t * t);
    }
    nn::linear_backward(cache.embeddings, params.at("attn.v.w"), dtanh, grads.at("attn.v.w"),
                        grads.at("attn.v.b"), &dembeddings);
}

template <class T>
GraderOutput output_from_cache(const GraderSpec& spec, const HeadCache<T>& cache) {
    GraderOutput out;
    const int odim = spec.output_dim();
    out.scores.resize(static_cast<size_t>(odim));
    out.probs.resize(static_cast<size_t>(odim));
    for (int j = 0; j < odim; ++j)
        out.scores[static_cast<size_t>(j)] = static_cast<double>(cache.scores.data[static_cast<size_t>(j)]);
    if (spec.ordinal) {
        for (int j = 0; j < odim; ++j)
            out.probs[static_cast<size_t>(j)] = 1.0 / (1.0 + std::exp(-out.scores[static_cast<size_t>(j)]));
    } else {
        double mx = out.scores[0];
        for (double v : out.scores) mx = std::max(mx, v);
        double sum = 0.0;
        for (int j = 0; j < odim; ++j) {
            out.probs[static_cast<size_t>(j)] = std::exp(out.scores[static_cast<size_t>(j)] - mx);
            sum += out.probs[static_cast<size_t>(j)];
        }
        for (double& p : out.probs) p /= sum;
    }
    out.attention.assign(cache.attention.begin(), cache.attention.end());
    return out;
}

}  // namespace

template <class T>
GraderOutput grade_forward(const GraderSpec& spec, const ParamSet<T>& params,
                           const Array<T>& embeddings) {
    if (embeddings.shape.size() != 2 || embeddings.shape[1] != spec.encoder.embed_dim)
        throw ShapeError("grade_forward: embeddings must be l x embed_dim");
    HeadCache<T> cache;
    head_forward(spec, params, embeddings, cache);
    return output_from_cache(spec, cache);
}

template GraderOutput grade_forward<float>(const GraderSpec&, const ParamSet<float>&,
                                           const Array<float>&);
template GraderOutput grade_forward<double>(const GraderSpec&, const ParamSet<double>&,
                                            const Array<double>&);

template <class T>
T grader_forward_backward(const GraderSpec& spec, const ParamSet<T>& params,
                          const std::vector<const Image*>& unique_images,
                          const std::vector<int>& bag_to_unique, int isup_grade, T grad_scale,
                          ParamSet<T>* grads, bool train_backbone, GraderOutput* output) {
    const int l = static_cast<int>(bag_to_unique.size());
    const int unique_count = static_cast<int>(unique_images.size());
    const int e_dim = spec.encoder.embed_dim;
    validate_isup(isup_grade);

    nn::EncoderCache<T> enc_cache;
    Array<T> input = nn::to_input_batch<T>(unique_images);
    Array<T> unique_embed = nn::encoder_forward(spec.encoder, params, "backbone.", input,
                                                grads && train_backbone ? &enc_cache : nullptr);

    Array<T> embeddings({l, e_dim});
    for (int i = 0; i < l; ++i)
        std::copy_n(unique_embed.ptr() + static_cast<int64_t>(bag_to_unique[i]) * e_dim, e_dim,
                    embeddings.ptr() + static_cast<int64_t>(i) * e_dim);

    HeadCache<T> cache;
    head_forward(spec, params, embeddings, cache);

    const int odim = spec.output_dim();
    T loss;
    Array<T> dscores({1, odim});
    if (spec.ordinal) {
        const OrdinalTarget target = encode_ordinal(isup_grade);
        std::array<double, 5> probs{};
        for (int j = 0; j < 5; ++j)
            probs[static_cast<size_t>(j)] =
                1.0 / (1.0 + std::exp(-static_cast<double>(cache.scores.data[static_cast<size_t>(j)])));
        loss = static_cast<T>(or_loss(probs, target));
        for (int j = 0; j < 5; ++j)
            dscores.data[static_cast<size_t>(j)] = static_cast<T>(
                (probs[static_cast<size_t>(j)] - target.bits[static_cast<size_t>(j)]) / 5.0 *
                static_cast<double>(grad_scale));
    } else {
        // 6-way cross entropy against the one-hot grade
        std::vector<double> p(static_cast<size_t>(odim));
        double mx = static_cast<double>(cache.scores.data[0]);
        for (int j = 1; j < odim; ++j)
            mx = std::max(mx, static_cast<double>(cache.scores.data[static_cast<size_t>(j)]));
        double sum = 0.0;
        for (int j = 0; j < odim; ++j) {
            p[static_cast<size_t>(j)] =
                std::exp(static_cast<double>(cache.scores.data[static_cast<size_t>(j)]) - mx);
            sum += p[static_cast<size_t>(j)];
        }
        for (double& v : p) v /= sum;
        loss = static_cast<T>(-std::log(std::max(p[static_cast<size_t>(isup_grade)], kEps)));
        for (int j = 0; j < odim; ++j)
            dscores.data[static_cast<size_t>(j)] = static_cast<T>(
                (p[static_cast<size_t>(j)] - (j == isup_grade ? 1.0 : 0.0)) *
                static_cast<double>(grad_scale));
    }

    if (output) *output = output_from_cache(spec, cache);
    if (!grads) return loss;

    Array<T> dembeddings({l, e_dim});
    head_backward(spec, params, cache, dscores, *grads, dembeddings);
    if (train_backbone) {
        Array<T> dunique({unique_count, e_dim});
        for (int i = 0; i < l; ++i)
            for (int e = 0; e < e_dim; ++e)
                dunique.data[static_cast<size_t>(bag_to_unique[i]) * e_dim + e] +=
                    dembeddings.data[static_cast<size_t>(i) * e_dim + e];
        nn::encoder_backward(spec.encoder, params, "backbone.", enc_cache, dunique, *grads);
    }
    return loss;
}

template float grader_forward_backward<float>(const GraderSpec&, const ParamSet<float>&,
                                              const std::vector<const Image*>&,
                                              const std::vector<int>&, int, float,
                                              ParamSet<float>*, bool, GraderOutput*);
template double grader_forward_backward<double>(const GraderSpec&, const ParamSet<double>&,
                                                const std::vector<const Image*>&,
                                                const std::vector<int>&, int, double,
                                                ParamSet<double>*, bool, GraderOutput*);

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

namespace {

struct PreparedBag {
    std::vector<int> bag_to_unique;
    std::vector<int> unique_patch_index;
};

PreparedBag prepare_bag(const SlideRecord& slide, int bag_size) {
    PreparedBag out;
    const auto bag = tiling::select_bag(slide.patches, bag_size);
    std::map<int, int> index_to_unique;
    for (const auto& p : bag) {
        auto [it, inserted] = index_to_unique.try_emplace(p.index, -1);
        if (inserted) {
            it->second = static_cast<int>(out.unique_patch_index.size());
            out.unique_patch_index.push_back(p.index);
        }
        out.bag_to_unique.push_back(it->second);
    }
    return out;
}

std::vector<Image> fetch_unique_images(const PreparedBag& prepared, const SlideRecord& slide,
                                       PatchStore& store, bool augment, Rng* rng) {
    std::vector<Image> images;
    images.reserve(prepared.unique_patch_index.size());
    std::map<int, const PatchRecord*> by_index;
    for (const auto& p : slide.patches) by_index[p.index] = &p;
    for (int patch_index : prepared.unique_patch_index) {
        Image img = store.get(*by_index.at(patch_index));
        if (augment && rng) {
            Rng local = rng->derive(string_salt(slide.slide_id), static_cast<uint64_t>(patch_index));
            if (local.bernoulli(0.5)) img = flip_horizontal(img);
            if (local.bernoulli(0.5)) img = flip_vertical(img);
            img = rotate90(img, local.uniform_int(0, 3));
        }
        images.push_back(std::move(img));
    }
    return images;
}

std::vector<const Image*> image_pointers(const std::vector<Image>& images) {
    std::vector<const Image*> ptrs;
    ptrs.reserve(images.size());
    for (const auto& img : images) ptrs.push_back(&img);
    return ptrs;
}

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
}

int decode_output(const GraderSpec& spec, const GraderOutput& out) {
    if (spec.ordinal) {
        std::array<double, 5> probs{};
        for (int j = 0; j < 5; ++j)
            probs[static_cast<size_t>(j)] = std::clamp(out.probs[static_cast<size_t>(j)], 0.0, 1.0);
        return decode_ordinal(probs, 0.5);
    }
    int best = 0;
    for (int j = 1; j < kNumIsupGrades; ++j)
        if (out.probs[static_cast<size_t>(j)] > out.probs[static_cast<size_t>(best)]) best = j;
    return best;
}

}  // namespace

FinetuneResult finetune(const std::vector<SlideRecord>& train_slides,
                        const std::vector<SlideRecord>& val_slides, const FinetuneConfig& config,
                        PatchStore& store, const nn::ParamSet<float>* init_backbone) {
    if (train_slides.empty()) throw ParamError("finetune: empty training corpus");

    Rng rng(config.seed);
    Rng init_rng = rng.derive(string_salt("init"));
    FinetuneResult result;
    result.model.spec = config.spec;

    auto& params = result.model.params;
    nn::init_encoder_params<float>(config.spec.encoder, init_rng, params, "backbone.");
    if (init_backbone) {
        for (size_t i = 0; i < params.names.size(); ++i) {
            const int src = init_backbone->find(params.names[i]);
            if (src < 0)
                throw ShapeError("pre-trained backbone lacks parameter " + params.names[i]);
            if (init_backbone->arrays[static_cast<size_t>(src)].shape != params.arrays[i].shape)
                throw ShapeError("pre-trained backbone shape mismatch at " + params.names[i]);
            params.arrays[i] = init_backbone->arrays[static_cast<size_t>(src)];
        }
    }
    {
        const int e_dim = config.spec.encoder.embed_dim;
        const int a_dim = config.spec.attention_dim;
        Array<float> vw({a_dim, e_dim});
        const double v_scale = std::sqrt(2.0 / static_cast<double>(e_dim));
        for (float& v : vw.data) v = static_cast<float>(init_rng.normal() * v_scale);
        params.add("attn.v.w", std::move(vw));
        params.add("attn.v.b", Array<float>({a_dim}));
        Array<float> w({a_dim});
        const double w_scale = std::sqrt(1.0 / static_cast<double>(a_dim));
        for (float& v : w.data) v = static_cast<float>(init_rng.normal() * w_scale);
        params.add("attn.w", std::move(w));
        Array<float> fcw({config.spec.output_dim(), e_dim});
        const double fc_scale = std::sqrt(1.0 / static_cast<double>(e_dim));
        for (float& v : fcw.data) v = static_cast<float>(init_rng.normal() * fc_scale);
        params.add("fc.w", std::move(fcw));
        params.add("fc.b", Array<float>({config.spec.output_dim()}));
    }

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(train_slides.size()) + config.batch_slides - 1) /
        config.batch_slides;
    nn::Schedule schedule{config.lr, 0.0, steps_per_epoch * config.epochs};
    auto optimizer = nn::Optimizer<float>::for_params(params, schedule);

    nn::ParamSet<float> best_params;
    double best_kappa = -std::numeric_limits<double>::infinity();

    std::vector<size_t> order(train_slides.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng epoch_rng = rng.derive(string_salt("epoch"), static_cast<uint64_t>(epoch));
        shuffle_indices(order, epoch_rng);
        double epoch_loss = 0.0;
        int64_t slides_seen = 0;
        for (size_t start = 0; start < order.size(); start += config.batch_slides) {
            const size_t end = std::min(order.size(), start + config.batch_slides);
            nn::ParamSet<float> grads = params.zeros_like();
            const float scale = 1.0f / static_cast<float>(end - start);
            for (size_t s = start; s < end; ++s) {
                const SlideRecord& slide = train_slides[order[s]];
                const PreparedBag prepared = prepare_bag(slide, config.bag_size);
                const auto images =
                    fetch_unique_images(prepared, slide, store, config.augment, &epoch_rng);
                const float loss = grader_forward_backward<float>(
                    config.spec, params, image_pointers(images), prepared.bag_to_unique,
                    slide.isup, scale, &grads, config.finetune_backbone, nullptr);
                epoch_loss += static_cast<double>(loss);
                ++slides_seen;
            }
            nn::adam_step(optimizer, params, grads);
        }
        result.train_loss.push_back(epoch_loss / static_cast<double>(slides_seen));

        if (!val_slides.empty()) {
            std::vector<int> truth, predicted;
            for (const auto& slide : val_slides) {
                const SlidePrediction pred = predict_slide(result.model, slide, store,
                                                           config.bag_size);
                truth.push_back(slide.isup);
                predicted.push_back(pred.isup);
            }
            double kappa;
            try {
                kappa = metrics::quadratic_kappa(metrics::grading_report(truth, predicted).cm);
            } catch (const ParamError&) {
                kappa = -1.0;  // degenerate constant predictions early in training
            }
            result.val_kappa.push_back(kappa);
            if (kappa > best_kappa) {
                best_kappa = kappa;
                best_params = params;
                result.best_epoch = epoch;
            }
        }
    }
    if (result.best_epoch >= 0) result.model.params = std::move(best_params);
    return result;
}

SlidePrediction predict_slide(const GraderModel& model, const SlideRecord& slide,
                              PatchStore& store, int bag_size) {
    const PreparedBag prepared = prepare_bag(slide, bag_size);
    const auto images = fetch_unique_images(prepared, slide, store, false, nullptr);

    GraderOutput output;
    grader_forward_backward<float>(model.spec, model.params, image_pointers(images),
                                   prepared.bag_to_unique, /*isup=*/0, 1.0f, nullptr, false,
                                   &output);

    SlidePrediction pred;
    pred.slide_id = slide.slide_id;
    pred.probs = output.probs;
    pred.attention = output.attention;
    for (int u : prepared.bag_to_unique)
        pred.bag_patch_indices.push_back(prepared.unique_patch_index[static_cast<size_t>(u)]);
    pred.isup = decode_output(model.spec, output);
    pred.malignancy = model.spec.ordinal ? output.probs[0] : 1.0 - output.probs[0];

    // summed attention per distinct patch, ranked for the explainability report
    std::map<int, double> summed;
    for (size_t i = 0; i < output.attention.size(); ++i)
        summed[pred.bag_patch_indices[i]] += output.attention[i];
    pred.patch_attention.assign(summed.begin(), summed.end());
    std::sort(pred.patch_attention.begin(), pred.patch_attention.end(),
              [](const auto& a, const auto& b) {
                  if (a.second != b.second) return a.second > b.second;
                  return a.first < b.first;
              });
    return pred;
}

void save_model(const std::string& path, const GraderModel& model, const nlohmann::json& extra) {
    nn::save_checkpoint(path, model.spec.to_json(), model.params, extra);
}

GraderModel load_model(const std::string& path) {
    nn::Checkpoint ckpt = nn::load_checkpoint(path);
    if (ckpt.spec.value("kind", "") != "isup_grader")
        throw IoError("not a grader checkpoint: " + path);
    GraderModel model;
    model.spec = GraderSpec::from_json(ckpt.spec);
    model.params = std::move(ckpt.params);
    return model;
}

}  // namespace wsigrade::grader
