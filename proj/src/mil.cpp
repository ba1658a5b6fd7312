#include "wsigrade/mil.hpp"

#include <cmath>
#include <map>

namespace wsigrade::mil {

namespace {
constexpr double kEps = 1e-7;
}

void InstanceProbs::validate() const {
    if (count < 1 || values.size() != static_cast<size_t>(count) * kNumClasses)
        throw ShapeError("InstanceProbs: bad shape");
    for (int r = 0; r < count; ++r) {
        double sum = 0.0;
        for (int c = 0; c < kNumClasses; ++c) {
            const double p = at(r, c);
            if (p < 0.0 || p > 1.0)
                throw InvalidProbabilityError("instance probability outside [0,1]");
            sum += p;
        }
        if (std::fabs(sum - 1.0) > 1e-6)
            throw InvalidProbabilityError("instance probability row does not sum to 1");
    }
}

std::array<std::vector<int>, 3> topk_rows(const InstanceProbs& probs, int k) {
    if (k < 1) throw ParamError("top-k pooling needs k >= 1");
    if (k > probs.count)
        throw ParamError("top-k pooling with k=" + std::to_string(k) + " over a bag of " +
                         std::to_string(probs.count));
    std::array<std::vector<int>, 3> selected;
    std::vector<int> order(static_cast<size_t>(probs.count));
    for (int j = 0; j < 3; ++j) {
        const int cls = j + 1;  // columns 1..3 hold GG3..GG5
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            const double pa = probs.at(a, cls), pb = probs.at(b, cls);
            if (pa != pb) return pa > pb;
            return a < b;
        });
        selected[j].assign(order.begin(), order.begin() + k);
    }
    return selected;
}

BagProbs topk_bag_pool(const InstanceProbs& probs, int k) {
    const auto selected = topk_rows(probs, k);
    BagProbs bag{};
    for (int j = 0; j < 3; ++j) {
        double sum = 0.0;
        for (int row : selected[j]) sum += probs.at(row, j + 1);
        bag[j] = sum / static_cast<double>(k);
    }
    return bag;
}

double bag_loss(const BagProbs& b, const BagTarget& y) {
    double loss = 0.0;
    for (int j = 0; j < 3; ++j) {
        const double p = std::clamp(b[j], kEps, 1.0 - kEps);
        loss += y[j] ? -std::log(p) : -std::log(1.0 - p);
    }
    return loss / 3.0;
}

std::vector<double> bag_loss_pool_backward(const InstanceProbs& probs, int k, const BagTarget& y) {
    const auto selected = topk_rows(probs, k);
    std::vector<double> dprobs(probs.values.size(), 0.0);
    for (int j = 0; j < 3; ++j) {
        double sum = 0.0;
        for (int row : selected[j]) sum += probs.at(row, j + 1);
        const double b = std::clamp(sum / k, kEps, 1.0 - kEps);
        // d bag_loss / d b_j, then spread over the k selected entries
        const double db = (b - static_cast<double>(y[j])) / (b * (1.0 - b)) / 3.0;
        for (int row : selected[j])
            dprobs[static_cast<size_t>(row) * kNumClasses + j + 1] += db / k;
    }
    return dprobs;
}

BagTarget bag_target_from_slide(const SlideRecord& slide) {
    if (slide.isup < 1)
        throw ExcludedSlideError("slide " + slide.slide_id +
                                 " is benign; Module 1 trains on cancerous slides only");
    BagTarget y{};
    for (int j = 0; j < 3; ++j) {
        const int gg = j + 3;
        y[j] = (to_int(slide.primary_gg) == gg || to_int(slide.secondary_gg) == gg) ? 1 : 0;
    }
    return y;
}

nlohmann::json Module1Model::spec_json() const {
    return nlohmann::json{{"kind", "mil_instance_classifier"},
                          {"encoder", encoder.to_json()},
                          {"head", head.to_json()}};
}

// ---------------------------------------------------------------------------

template <class T>
BagStep<T> bag_forward_backward(const nn::EncoderSpec& encoder, const nn::MLPSpec& head,
                                const nn::ParamSet<T>& params,
                                const std::vector<const Image*>& bag_images,
                                const std::vector<int>& bag_to_unique, int unique_count,
                                const BagTarget& target, int k, T grad_scale,
                                nn::ParamSet<T>* grads) {
    const int l = static_cast<int>(bag_to_unique.size());
    if (l < 1) throw EmptySlideError("empty bag");
    if (static_cast<int>(bag_images.size()) != unique_count)
        throw ShapeError("bag_forward_backward: unique image count mismatch");

    // forward through the encoder once per distinct patch
    nn::EncoderCache<T> enc_cache;
    nn::MLPCache<T> head_cache;
    nn::Array<T> input = nn::to_input_batch<T>(bag_images);
    nn::Array<T> embed =
        nn::encoder_forward(encoder, params, "backbone.", input, grads ? &enc_cache : nullptr);
    nn::Array<T> logits =
        nn::mlp_forward(head, params, "inst_head.", embed, grads ? &head_cache : nullptr);
    nn::Array<T> unique_probs = logits;
    nn::softmax_rows(unique_probs, unique_count, kNumClasses);

    BagStep<T> step;
    step.probs.count = l;
    step.probs.values.resize(static_cast<size_t>(l) * kNumClasses);
    for (int i = 0; i < l; ++i)
        for (int c = 0; c < kNumClasses; ++c)
            step.probs.values[static_cast<size_t>(i) * kNumClasses + c] = static_cast<double>(
                unique_probs.data[static_cast<size_t>(bag_to_unique[i]) * kNumClasses + c]);

    const BagProbs bag = topk_bag_pool(step.probs, k);
    step.loss = static_cast<T>(bag_loss(bag, target));

    if (!grads) return step;

    const std::vector<double> dprob_rows = bag_loss_pool_backward(step.probs, k, target);
    // fold duplicate bag entries back onto their distinct patch, then through
    // the softmax
    nn::Array<T> dlogits({unique_count, kNumClasses});
    {
        std::vector<double> dunique(static_cast<size_t>(unique_count) * kNumClasses, 0.0);
        for (int i = 0; i < l; ++i)
            for (int c = 0; c < kNumClasses; ++c)
                dunique[static_cast<size_t>(bag_to_unique[i]) * kNumClasses + c] +=
                    dprob_rows[static_cast<size_t>(i) * kNumClasses + c];
        std::vector<double> row_probs(kNumClasses), row_dlogits(kNumClasses);
        for (int u = 0; u < unique_count; ++u) {
            std::vector<double> dp(kNumClasses);
            for (int c = 0; c < kNumClasses; ++c) {
                row_probs[static_cast<size_t>(c)] =
                    static_cast<double>(unique_probs.data[static_cast<size_t>(u) * kNumClasses + c]);
                dp[static_cast<size_t>(c)] = dunique[static_cast<size_t>(u) * kNumClasses + c];
            }
            nn::softmax_backward_row(row_probs.data(), dp.data(), row_dlogits.data(), kNumClasses);
            for (int c = 0; c < kNumClasses; ++c)
                dlogits.data[static_cast<size_t>(u) * kNumClasses + c] =
                    static_cast<T>(row_dlogits[static_cast<size_t>(c)] * grad_scale);
        }
    }
    nn::Array<T> dembed({unique_count, encoder.embed_dim});
    nn::mlp_backward(head, params, "inst_head.", head_cache, dlogits, *grads, &dembed);
    nn::encoder_backward(encoder, params, "backbone.", enc_cache, dembed, *grads);
    return step;
}

template BagStep<float> bag_forward_backward<float>(const nn::EncoderSpec&, const nn::MLPSpec&,
                                                    const nn::ParamSet<float>&,
                                                    const std::vector<const Image*>&,
                                                    const std::vector<int>&, int, const BagTarget&,
                                                    int, float, nn::ParamSet<float>*);
template BagStep<double> bag_forward_backward<double>(const nn::EncoderSpec&, const nn::MLPSpec&,
                                                      const nn::ParamSet<double>&,
                                                      const std::vector<const Image*>&,
                                                      const std::vector<int>&, int,
                                                      const BagTarget&, int, double,
                                                      nn::ParamSet<double>*);

namespace {

struct PreparedBag {
    std::vector<PatchRecord> bag;       // select_bag order
    std::vector<int> bag_to_unique;
    std::vector<int> unique_patch_index;  // patch.index per distinct entry
};

PreparedBag prepare_bag(const SlideRecord& slide, int bag_size) {
    PreparedBag out;
    out.bag = tiling::select_bag(slide.patches, bag_size);
    std::map<int, int> index_to_unique;
    for (const auto& p : out.bag) {
        auto [it, inserted] = index_to_unique.try_emplace(p.index, -1);
        if (inserted) {
            it->second = static_cast<int>(out.unique_patch_index.size());
            out.unique_patch_index.push_back(p.index);
        }
        out.bag_to_unique.push_back(it->second);
    }
    return out;
}

// fetch distinct bag patches, optionally with a random dihedral transform
std::vector<Image> fetch_unique_images(const PreparedBag& prepared, const SlideRecord& slide,
                                       PatchStore& store, bool augment, Rng* rng) {
    std::vector<Image> images;
    images.reserve(prepared.unique_patch_index.size());
    std::map<int, const PatchRecord*> by_index;
    for (const auto& p : slide.patches) by_index[p.index] = &p;
    for (int patch_index : prepared.unique_patch_index) {
        const PatchRecord* rec = by_index.at(patch_index);
        Image img = store.get(*rec);
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

}  // namespace

BagEval evaluate_bags(const Module1Model& model, const std::vector<SlideRecord>& slides,
                      PatchStore& store, int bag_size, int k) {
    int64_t correct = 0, total = 0;
    std::array<int64_t, 3> tp{}, fp{}, fn{};
    for (const auto& slide : slides) {
        if (slide.isup < 1) continue;
        const PreparedBag prepared = prepare_bag(slide, bag_size);
        const auto images = fetch_unique_images(prepared, slide, store, false, nullptr);
        BagStep<float> step = bag_forward_backward<float>(
            model.encoder, model.head, model.params, image_pointers(images),
            prepared.bag_to_unique, static_cast<int>(images.size()),
            bag_target_from_slide(slide), k, 1.0f, nullptr);
        const BagProbs bag = topk_bag_pool(step.probs, k);
        const BagTarget y = bag_target_from_slide(slide);
        for (int j = 0; j < 3; ++j) {
            const bool pred = bag[j] > 0.5;
            const bool truth = y[j] == 1;
            correct += pred == truth;
            ++total;
            if (pred && truth) ++tp[j];
            if (pred && !truth) ++fp[j];
            if (!pred && truth) ++fn[j];
        }
    }
    BagEval eval;
    if (total == 0) return eval;
    eval.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    double f1_sum = 0.0;
    for (int j = 0; j < 3; ++j) {
        const double denom = static_cast<double>(2 * tp[j] + fp[j] + fn[j]);
        f1_sum += denom > 0 ? 2.0 * static_cast<double>(tp[j]) / denom : 0.0;
    }
    eval.macro_f1 = f1_sum / 3.0;
    return eval;
}

Module1Result train_module1(const std::vector<SlideRecord>& train_slides,
                            const std::vector<SlideRecord>& val_slides,
                            const Module1Config& config, PatchStore& store) {
    std::vector<const SlideRecord*> cancerous;
    for (const auto& s : train_slides)
        if (s.isup >= 1) cancerous.push_back(&s);
    if (cancerous.empty()) throw ParamError("Module 1 needs at least one cancerous slide");
    if (config.k > config.bag_size) throw ParamError("top-k exceeds the bag size");

    Rng rng(config.seed);
    Module1Result result;
    result.model.encoder = config.encoder;
    result.model.head = nn::MLPSpec{{config.encoder.embed_dim, kNumClasses}};
    Rng init_rng = rng.derive(string_salt("init"));
    nn::init_encoder_params(config.encoder, init_rng, result.model.params, "backbone.");
    nn::init_mlp_params(result.model.head, init_rng, result.model.params, "inst_head.");

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(cancerous.size()) + config.batch_slides - 1) / config.batch_slides;
    nn::Schedule schedule{config.lr, 0.0, steps_per_epoch * config.epochs};
    auto optimizer = nn::Optimizer<float>::for_params(result.model.params, schedule);

    nn::ParamSet<float> best_params;
    double best_score = -1.0;

    std::vector<size_t> order(cancerous.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng epoch_rng = rng.derive(string_salt("epoch"), static_cast<uint64_t>(epoch));
        shuffle_indices(order, epoch_rng);
        double epoch_loss = 0.0;
        int64_t bags = 0;
        for (size_t start = 0; start < order.size(); start += config.batch_slides) {
            const size_t end = std::min(order.size(), start + config.batch_slides);
            nn::ParamSet<float> grads = result.model.params.zeros_like();
            const float scale = 1.0f / static_cast<float>(end - start);
            for (size_t s = start; s < end; ++s) {
                const SlideRecord& slide = *cancerous[order[s]];
                const PreparedBag prepared = prepare_bag(slide, config.bag_size);
                const auto images =
                    fetch_unique_images(prepared, slide, store, config.augment, &epoch_rng);
                BagStep<float> step = bag_forward_backward<float>(
                    config.encoder, result.model.head, result.model.params,
                    image_pointers(images), prepared.bag_to_unique,
                    static_cast<int>(images.size()), bag_target_from_slide(slide), config.k,
                    scale, &grads);
                epoch_loss += static_cast<double>(step.loss);
                ++bags;
            }
            nn::adam_step(optimizer, result.model.params, grads);
        }
        result.train_loss.push_back(epoch_loss / static_cast<double>(bags));

        if (!val_slides.empty()) {
            const BagEval eval =
                evaluate_bags(result.model, val_slides, store, config.bag_size, config.k);
            result.val_score.push_back(eval.score());
            if (eval.score() > best_score) {
                best_score = eval.score();
                best_params = result.model.params;
                result.best_epoch = epoch;
            }
        }
    }
    if (result.best_epoch >= 0) result.model.params = std::move(best_params);
    return result;
}

std::vector<PatchRecord> pseudo_label(const Module1Model& model,
                                      const std::vector<PatchRecord>& patches, PatchStore& store) {
    std::vector<PatchRecord> out = patches;
    constexpr size_t kBatch = 64;
    for (size_t start = 0; start < out.size(); start += kBatch) {
        const size_t end = std::min(out.size(), start + kBatch);
        std::vector<const Image*> images;
        images.reserve(end - start);
        for (size_t i = start; i < end; ++i) images.push_back(&store.get(out[i]));
        nn::Array<float> input = nn::to_input_batch<float>(images);
        nn::Array<float> embed = nn::encoder_forward(model.encoder, model.params, "backbone.", input);
        nn::Array<float> probs = nn::mlp_forward(model.head, model.params, "inst_head.", embed);
        nn::softmax_rows(probs, static_cast<int>(end - start), kNumClasses);
        for (size_t i = start; i < end; ++i) {
            const float* row = probs.ptr() + (i - start) * kNumClasses;
            int best = 0;
            for (int c = 1; c < kNumClasses; ++c)
                if (row[c] > row[best]) best = c;  // strict: ties keep the lowest class
            out[i].pseudo_label = gleason_from_int(kClassValues[static_cast<size_t>(best)]);
            out[i].pseudo_confidence = static_cast<double>(row[best]);
        }
    }
    return out;
}

BalancedDataset build_balanced_dataset(const std::vector<PatchRecord>& labeled, int per_class,
                                       double min_confidence) {
    if (per_class < 1) throw ParamError("per_class must be >= 1");
    BalancedDataset out;
    for (size_t cls = 0; cls < kClassValues.size(); ++cls) {
        const int gg = kClassValues[cls];
        std::vector<const PatchRecord*> members;
        for (const auto& p : labeled) {
            if (!p.pseudo_label || to_int(*p.pseudo_label) != gg) continue;
            if (p.pseudo_confidence && *p.pseudo_confidence < min_confidence) continue;
            members.push_back(&p);
        }
        if (members.empty()) {
            out.warnings.push_back("class GG" + std::to_string(gg) + " has no labeled patches");
            continue;
        }
        std::sort(members.begin(), members.end(), [](const PatchRecord* a, const PatchRecord* b) {
            if (a->tissue_fraction != b->tissue_fraction)
                return a->tissue_fraction > b->tissue_fraction;
            if (a->slide_id != b->slide_id) return a->slide_id < b->slide_id;
            return a->index < b->index;
        });
        if (members.size() < static_cast<size_t>(per_class))
            out.warnings.push_back("class GG" + std::to_string(gg) + " has only " +
                                   std::to_string(members.size()) + " patches (requested " +
                                   std::to_string(per_class) + ")");
        const size_t take = std::min(members.size(), static_cast<size_t>(per_class));
        for (size_t i = 0; i < take; ++i) out.patches.push_back(*members[i]);
        out.per_class_counts[cls] = take;
    }
    return out;
}

}  // namespace wsigrade::mil
