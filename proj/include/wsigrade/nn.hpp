#pragma once

#include <cmath>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "wsigrade/common.hpp"
#include "wsigrade/image.hpp"

namespace wsigrade::nn {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Flat n-d array + named parameter collection
// ---------------------------------------------------------------------------

template <class T>
struct Array {
    std::vector<int> shape;
    std::vector<T> data;

    Array() = default;
    explicit Array(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), T(0));
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <class T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Array<T>> arrays;

    Array<T>& add(const std::string& name, Array<T> array) {
        if (has(name)) throw ParamError("duplicate parameter name: " + name);
        names.push_back(name);
        arrays.push_back(std::move(array));
        return arrays.back();
    }

    bool has(const std::string& name) const {
        return find(name) >= 0;
    }

    int find(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        return -1;
    }

    Array<T>& at(const std::string& name) {
        const int i = find(name);
        if (i < 0) throw ParamError("unknown parameter: " + name);
        return arrays[static_cast<size_t>(i)];
    }
    const Array<T>& at(const std::string& name) const {
        const int i = find(name);
        if (i < 0) throw ParamError("unknown parameter: " + name);
        return arrays[static_cast<size_t>(i)];
    }

    ParamSet zeros_like() const {
        ParamSet out;
        out.names = names;
        out.arrays.reserve(arrays.size());
        for (const auto& a : arrays) out.arrays.push_back(Array<T>(a.shape));
        return out;
    }

    bool same_shapes(const ParamSet& other) const {
        if (names != other.names) return false;
        for (size_t i = 0; i < arrays.size(); ++i)
            if (arrays[i].shape != other.arrays[i].shape) return false;
        return true;
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& a : arrays) n += a.size();
        return n;
    }
};

template <class To, class From>
ParamSet<To> cast_params(const ParamSet<From>& in) {
    ParamSet<To> out;
    out.names = in.names;
    out.arrays.reserve(in.arrays.size());
    for (const auto& a : in.arrays) {
        Array<To> b;
        b.shape = a.shape;
        b.data.assign(a.data.begin(), a.data.end());
        out.arrays.push_back(std::move(b));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

// Small convolutional encoder: optional average-pool stem, stride-2 conv
// blocks with ReLU, global average pooling, optional linear projection when
// embed_dim differs from the last block width.
struct EncoderSpec {
    int input_size = 256;
    int stem = 4;  // input average-pool factor; 1 disables the stem
    std::vector<int> channels{16, 32, 64, 128};
    int kernel = 3;
    int stride = 2;
    int embed_dim = 128;

    void validate() const {
        if (input_size < 8) throw ParamError("encoder input_size too small");
        if (stem < 1 || input_size % stem != 0) throw ParamError("bad encoder stem factor");
        if (channels.empty()) throw ParamError("encoder needs at least one conv block");
        if (embed_dim < 8) throw ParamError("embed_dim must be >= 8");
        if (kernel % 2 == 0) throw ParamError("encoder kernel must be odd");
    }

    bool has_projection() const { return embed_dim != channels.back(); }

    json to_json() const {
        return json{{"input_size", input_size}, {"stem", stem},      {"channels", channels},
                    {"kernel", kernel},         {"stride", stride},  {"embed_dim", embed_dim}};
    }
    static EncoderSpec from_json(const json& j) {
        EncoderSpec s;
        s.input_size = j.at("input_size");
        s.stem = j.at("stem");
        s.channels = j.at("channels").get<std::vector<int>>();
        s.kernel = j.at("kernel");
        s.stride = j.at("stride");
        s.embed_dim = j.at("embed_dim");
        return s;
    }
};

// ReLU between layers, linear output.
struct MLPSpec {
    std::vector<int> widths;  // including input and output widths

    void validate() const {
        if (widths.size() < 2) throw ParamError("MLP needs input and output widths");
        for (int w : widths)
            if (w < 1) throw ParamError("MLP widths must be positive");
    }
    int input_dim() const { return widths.front(); }
    int output_dim() const { return widths.back(); }

    json to_json() const { return json{{"widths", widths}}; }
    static MLPSpec from_json(const json& j) {
        MLPSpec s;
        s.widths = j.at("widths").get<std::vector<int>>();
        return s;
    }
};

// ---------------------------------------------------------------------------
// Elementwise / matrix helpers
// ---------------------------------------------------------------------------

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using MapC = Eigen::Map<const MatRM<T>>;

template <class T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
void softmax_rows(Array<T>& a, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        T* row = a.ptr() + static_cast<int64_t>(r) * cols;
        T mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        T sum = 0;
        for (int c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (int c = 0; c < cols; ++c) row[c] /= sum;
    }
}

// dL/dlogits from dL/dsoftmax for one row
template <class T>
void softmax_backward_row(const T* probs, const T* dprobs, T* dlogits, int n) {
    T dot = 0;
    for (int i = 0; i < n; ++i) dot += probs[i] * dprobs[i];
    for (int i = 0; i < n; ++i) dlogits[i] = probs[i] * (dprobs[i] - dot);
}

// ---------------------------------------------------------------------------
// Image batch -> float input (B x 3 x S x S), values scaled to [0,1]
// ---------------------------------------------------------------------------

template <class T>
Array<T> to_input_batch(const std::vector<const Image*>& images) {
    if (images.empty()) throw ParamError("empty image batch");
    const int h = images[0]->height, w = images[0]->width;
    Array<T> out({static_cast<int>(images.size()), 3, h, w});
    T* dst = out.ptr();
    for (const Image* img : images) {
        if (img->height != h || img->width != w) throw ShapeError("mixed image sizes in batch");
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    *dst++ = static_cast<T>(img->at(y, x, c)) / T(255);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace detail {

// X: Cin x H x W -> cols: (Cin*K*K) x (Ho*Wo), zero padding
template <class T>
void im2col(const T* x, int cin, int h, int w, int k, int stride, int pad, T* cols, int ho,
            int wo) {
    const int64_t plane = static_cast<int64_t>(h) * w;
    int64_t r = 0;
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++r) {
                T* dst = cols + r * (static_cast<int64_t>(ho) * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                     ? x[ci * plane + static_cast<int64_t>(iy) * w + ix]
                                     : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, int cin, int h, int w, int k, int stride, int pad, T* dx, int ho,
                int wo) {
    const int64_t plane = static_cast<int64_t>(h) * w;
    int64_t r = 0;
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++r) {
                const T* src = cols + r * (static_cast<int64_t>(ho) * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                            dx[ci * plane + static_cast<int64_t>(iy) * w + ix] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

inline int conv_out_size(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// B x Cin x H x W -> B x Cout x Ho x Wo
template <class T>
Array<T> conv2d_forward(const Array<T>& x, const Array<T>& weight, const Array<T>& bias,
                        int stride, int pad) {
    if (x.shape.size() != 4 || weight.shape.size() != 4)
        throw ShapeError("conv2d expects 4-d input and weights");
    const int b = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int cout = weight.shape[0], k = weight.shape[2];
    if (weight.shape[1] != cin) throw ShapeError("conv2d channel mismatch");
    const int ho = detail::conv_out_size(h, k, stride, pad);
    const int wo = detail::conv_out_size(w, k, stride, pad);
    const int64_t ckk = static_cast<int64_t>(cin) * k * k;
    const int64_t hw = static_cast<int64_t>(ho) * wo;

    Array<T> y({b, cout, ho, wo});
    std::vector<T> cols(static_cast<size_t>(ckk * hw));
    MapC<T> wm(weight.ptr(), cout, ckk);
    for (int bi = 0; bi < b; ++bi) {
        detail::im2col(x.ptr() + static_cast<int64_t>(bi) * cin * h * w, cin, h, w, k, stride, pad,
                       cols.data(), ho, wo);
        MapC<T> cm(cols.data(), ckk, hw);
        MapM<T> ym(y.ptr() + static_cast<int64_t>(bi) * cout * hw, cout, hw);
        ym.noalias() = wm * cm;
        for (int co = 0; co < cout; ++co) ym.row(co).array() += bias.data[static_cast<size_t>(co)];
    }
    return y;
}

template <class T>
void conv2d_backward(const Array<T>& x, const Array<T>& weight, const Array<T>& dy, int stride,
                     int pad, Array<T>& dweight, Array<T>& dbias, Array<T>* dx) {
    const int b = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int cout = weight.shape[0], k = weight.shape[2];
    const int ho = dy.shape[2], wo = dy.shape[3];
    const int64_t ckk = static_cast<int64_t>(cin) * k * k;
    const int64_t hw = static_cast<int64_t>(ho) * wo;

    std::vector<T> cols(static_cast<size_t>(ckk * hw));
    std::vector<T> dcols(static_cast<size_t>(ckk * hw));
    MapC<T> wm(weight.ptr(), cout, ckk);
    MapM<T> dwm(dweight.ptr(), cout, ckk);
    for (int bi = 0; bi < b; ++bi) {
        detail::im2col(x.ptr() + static_cast<int64_t>(bi) * cin * h * w, cin, h, w, k, stride, pad,
                       cols.data(), ho, wo);
        MapC<T> cm(cols.data(), ckk, hw);
        MapC<T> dym(dy.ptr() + static_cast<int64_t>(bi) * cout * hw, cout, hw);
        dwm.noalias() += dym * cm.transpose();
        for (int co = 0; co < cout; ++co) dbias.data[static_cast<size_t>(co)] += dym.row(co).sum();
        if (dx) {
            MapM<T> dcm(dcols.data(), ckk, hw);
            dcm.noalias() = wm.transpose() * dym;
            detail::col2im_add(dcols.data(), cin, h, w, k, stride, pad,
                               dx->ptr() + static_cast<int64_t>(bi) * cin * h * w, ho, wo);
        }
    }
}

// non-overlapping k x k average pooling
template <class T>
Array<T> avgpool_forward(const Array<T>& x, int k) {
    const int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    if (h % k != 0 || w % k != 0) throw ShapeError("avgpool input not divisible by factor");
    const int ho = h / k, wo = w / k;
    Array<T> y({b, c, ho, wo});
    const T inv = T(1) / static_cast<T>(k * k);
    for (int bc = 0; bc < b * c; ++bc) {
        const T* xp = x.ptr() + static_cast<int64_t>(bc) * h * w;
        T* yp = y.ptr() + static_cast<int64_t>(bc) * ho * wo;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                T acc = 0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx)
                        acc += xp[static_cast<int64_t>(oy * k + dy) * w + ox * k + dx];
                yp[static_cast<int64_t>(oy) * wo + ox] = acc * inv;
            }
    }
    return y;
}

template <class T>
Array<T> avgpool_backward(const Array<T>& dy, int k, int h, int w) {
    const int b = dy.shape[0], c = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3];
    Array<T> dx({b, c, h, w});
    const T inv = T(1) / static_cast<T>(k * k);
    for (int bc = 0; bc < b * c; ++bc) {
        const T* dyp = dy.ptr() + static_cast<int64_t>(bc) * ho * wo;
        T* dxp = dx.ptr() + static_cast<int64_t>(bc) * h * w;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                const T g = dyp[static_cast<int64_t>(oy) * wo + ox] * inv;
                for (int dy2 = 0; dy2 < k; ++dy2)
                    for (int dx2 = 0; dx2 < k; ++dx2)
                        dxp[static_cast<int64_t>(oy * k + dy2) * w + ox * k + dx2] = g;
            }
    }
    return dx;
}

template <class T>
Array<T> global_avgpool_forward(const Array<T>& x) {
    const int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    Array<T> y({b, c});
    const T inv = T(1) / static_cast<T>(h * w);
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const T* xp = x.ptr() + (static_cast<int64_t>(bi) * c + ci) * h * w;
            T acc = 0;
            for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) acc += xp[i];
            y.ptr()[static_cast<int64_t>(bi) * c + ci] = acc * inv;
        }
    return y;
}

template <class T>
Array<T> global_avgpool_backward(const Array<T>& dy, int h, int w) {
    const int b = dy.shape[0], c = dy.shape[1];
    Array<T> dx({b, c, h, w});
    const T inv = T(1) / static_cast<T>(h * w);
    for (int64_t bc = 0; bc < static_cast<int64_t>(b) * c; ++bc) {
        const T g = dy.ptr()[bc] * inv;
        T* dxp = dx.ptr() + bc * h * w;
        for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) dxp[i] = g;
    }
    return dx;
}

template <class T>
void relu_inplace(Array<T>& a) {
    for (T& v : a.data)
        if (v < T(0)) v = T(0);
}

// dZ = dY * 1[Y > 0], using the post-activation values
template <class T>
void relu_backward_inplace(Array<T>& dy, const Array<T>& y) {
    for (size_t i = 0; i < dy.data.size(); ++i)
        if (y.data[i] <= T(0)) dy.data[i] = T(0);
}

// X: B x In, W: Out x In, b: Out -> Y: B x Out
template <class T>
Array<T> linear_forward(const Array<T>& x, const Array<T>& weight, const Array<T>& bias) {
    const int b = x.shape[0], in = x.shape[1];
    const int out = weight.shape[0];
    if (weight.shape[1] != in) throw ShapeError("linear dimension mismatch");
    Array<T> y({b, out});
    MapC<T> xm(x.ptr(), b, in);
    MapC<T> wm(weight.ptr(), out, in);
    MapM<T> ym(y.ptr(), b, out);
    ym.noalias() = xm * wm.transpose();
    MapC<T> bm(bias.ptr(), 1, out);
    ym.rowwise() += bm.row(0);
    return y;
}

template <class T>
void linear_backward(const Array<T>& x, const Array<T>& weight, const Array<T>& dy,
                     Array<T>& dweight, Array<T>& dbias, Array<T>* dx) {
    const int b = x.shape[0], in = x.shape[1];
    const int out = weight.shape[0];
    MapC<T> xm(x.ptr(), b, in);
    MapC<T> wm(weight.ptr(), out, in);
    MapC<T> dym(dy.ptr(), b, out);
    MapM<T> dwm(dweight.ptr(), out, in);
    dwm.noalias() += dym.transpose() * xm;
    MapM<T> dbm(dbias.ptr(), 1, out);
    dbm.row(0) += dym.colwise().sum();
    if (dx) {
        MapM<T> dxm(dx->ptr(), b, in);
        dxm.noalias() += dym * wm;
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <class T>
struct EncoderCache {
    Array<T> input;                 // B x 3 x S x S
    Array<T> stem_out;              // after the average-pool stem (or = input copy)
    std::vector<Array<T>> block_out;  // post-ReLU activation per conv block
    Array<T> gap_out;               // B x C_last
};

template <class T>
void init_encoder_params(const EncoderSpec& spec, Rng& rng, ParamSet<T>& params,
                         const std::string& prefix) {
    spec.validate();
    int cin = 3;
    for (size_t i = 0; i < spec.channels.size(); ++i) {
        const int cout = spec.channels[i];
        Array<T> w({cout, cin, spec.kernel, spec.kernel});
        const double scale = std::sqrt(2.0 / (static_cast<double>(cin) * spec.kernel * spec.kernel));
        for (T& v : w.data) v = static_cast<T>(rng.normal() * scale);
        params.add(prefix + "conv" + std::to_string(i) + ".w", std::move(w));
        params.add(prefix + "conv" + std::to_string(i) + ".b", Array<T>({cout}));
        cin = cout;
    }
    if (spec.has_projection()) {
        Array<T> w({spec.embed_dim, spec.channels.back()});
        const double scale = std::sqrt(2.0 / static_cast<double>(spec.channels.back()));
        for (T& v : w.data) v = static_cast<T>(rng.normal() * scale);
        params.add(prefix + "proj.w", std::move(w));
        params.add(prefix + "proj.b", Array<T>({spec.embed_dim}));
    }
}

template <class T>
Array<T> encoder_forward(const EncoderSpec& spec, const ParamSet<T>& params,
                         const std::string& prefix, const Array<T>& input,
                         EncoderCache<T>* cache = nullptr) {
    if (input.shape.size() != 4 || input.shape[1] != 3 || input.shape[2] != spec.input_size ||
        input.shape[3] != spec.input_size)
        throw ShapeError("encoder input must be B x 3 x " + std::to_string(spec.input_size) +
                         " x " + std::to_string(spec.input_size));

    Array<T> x = spec.stem > 1 ? avgpool_forward(input, spec.stem) : input;
    if (cache) {
        cache->input = input;
        cache->stem_out = x;
        cache->block_out.clear();
    }
    const int pad = spec.kernel / 2;
    for (size_t i = 0; i < spec.channels.size(); ++i) {
        const auto& w = params.at(prefix + "conv" + std::to_string(i) + ".w");
        const auto& b = params.at(prefix + "conv" + std::to_string(i) + ".b");
        x = conv2d_forward(x, w, b, spec.stride, pad);
        relu_inplace(x);
        if (cache) cache->block_out.push_back(x);
    }
    Array<T> embed = global_avgpool_forward(x);
    if (cache) cache->gap_out = embed;
    if (spec.has_projection())
        embed = linear_forward(embed, params.at(prefix + "proj.w"), params.at(prefix + "proj.b"));
    return embed;
}

template <class T>
void encoder_backward(const EncoderSpec& spec, const ParamSet<T>& params,
                      const std::string& prefix, const EncoderCache<T>& cache,
                      const Array<T>& dembed, ParamSet<T>& grads, Array<T>* dinput = nullptr) {
    const int pad = spec.kernel / 2;
    Array<T> dgap;
    if (spec.has_projection()) {
        dgap = Array<T>({cache.gap_out.shape[0], cache.gap_out.shape[1]});
        linear_backward(cache.gap_out, params.at(prefix + "proj.w"), dembed,
                        grads.at(prefix + "proj.w"), grads.at(prefix + "proj.b"), &dgap);
    } else {
        dgap = dembed;
    }

    const auto& last = cache.block_out.back();
    Array<T> dx = global_avgpool_backward(dgap, last.shape[2], last.shape[3]);
    for (int i = static_cast<int>(spec.channels.size()) - 1; i >= 0; --i) {
        relu_backward_inplace(dx, cache.block_out[static_cast<size_t>(i)]);
        const Array<T>& block_input =
            i == 0 ? cache.stem_out : cache.block_out[static_cast<size_t>(i - 1)];
        const auto& w = params.at(prefix + "conv" + std::to_string(i) + ".w");
        Array<T> dprev({block_input.shape[0], block_input.shape[1], block_input.shape[2],
                        block_input.shape[3]});
        const bool need_dprev = i > 0 || (dinput != nullptr && spec.stem > 1) || dinput != nullptr;
        conv2d_backward(block_input, w, dx, spec.stride, pad,
                        grads.at(prefix + "conv" + std::to_string(i) + ".w"),
                        grads.at(prefix + "conv" + std::to_string(i) + ".b"),
                        need_dprev ? &dprev : nullptr);
        dx = std::move(dprev);
    }
    if (dinput) {
        if (spec.stem > 1)
            *dinput = avgpool_backward(dx, spec.stem, spec.input_size, spec.input_size);
        else
            *dinput = std::move(dx);
    }
}

// Embedding of a patch batch (Eq.-style bag embedding entry point).
template <class T>
Array<T> forward_embed(const EncoderSpec& spec, const ParamSet<T>& params,
                       const std::string& prefix, const std::vector<const Image*>& patches) {
    return encoder_forward(spec, params, prefix, to_input_batch<T>(patches));
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

template <class T>
struct MLPCache {
    std::vector<Array<T>> layer_in;  // input to each linear layer
    Array<T> output;
};

template <class T>
void init_mlp_params(const MLPSpec& spec, Rng& rng, ParamSet<T>& params,
                     const std::string& prefix) {
    spec.validate();
    for (size_t i = 0; i + 1 < spec.widths.size(); ++i) {
        const int in = spec.widths[i], out = spec.widths[i + 1];
        Array<T> w({out, in});
        const double scale = std::sqrt(2.0 / static_cast<double>(in));
        for (T& v : w.data) v = static_cast<T>(rng.normal() * scale);
        params.add(prefix + "fc" + std::to_string(i) + ".w", std::move(w));
        params.add(prefix + "fc" + std::to_string(i) + ".b", Array<T>({out}));
    }
}

template <class T>
Array<T> mlp_forward(const MLPSpec& spec, const ParamSet<T>& params, const std::string& prefix,
                     const Array<T>& input, MLPCache<T>* cache = nullptr) {
    if (input.shape.size() != 2 || input.shape[1] != spec.input_dim())
        throw ShapeError("MLP input width mismatch");
    if (cache) cache->layer_in.clear();
    Array<T> x = input;
    const size_t layers = spec.widths.size() - 1;
    for (size_t i = 0; i < layers; ++i) {
        if (cache) cache->layer_in.push_back(x);
        x = linear_forward(x, params.at(prefix + "fc" + std::to_string(i) + ".w"),
                           params.at(prefix + "fc" + std::to_string(i) + ".b"));
        if (i + 1 < layers) relu_inplace(x);
    }
    if (cache) cache->output = x;
    return x;
}

template <class T>
void mlp_backward(const MLPSpec& spec, const ParamSet<T>& params, const std::string& prefix,
                  const MLPCache<T>& cache, const Array<T>& doutput, ParamSet<T>& grads,
                  Array<T>* dinput = nullptr) {
    const size_t layers = spec.widths.size() - 1;
    Array<T> dy = doutput;
    for (int i = static_cast<int>(layers) - 1; i >= 0; --i) {
        if (static_cast<size_t>(i) + 1 < layers) {
            // recover the post-ReLU activation: it is the input of layer i+1
            relu_backward_inplace(dy, cache.layer_in[static_cast<size_t>(i + 1)]);
        }
        const auto& x = cache.layer_in[static_cast<size_t>(i)];
        Array<T> dx({x.shape[0], x.shape[1]});
        const bool need_dx = i > 0 || dinput != nullptr;
        linear_backward(x, params.at(prefix + "fc" + std::to_string(i) + ".w"), dy,
                        grads.at(prefix + "fc" + std::to_string(i) + ".w"),
                        grads.at(prefix + "fc" + std::to_string(i) + ".b"),
                        need_dx ? &dx : nullptr);
        dy = std::move(dx);
    }
    if (dinput) *dinput = std::move(dy);
}

// ---------------------------------------------------------------------------
// Optimizer: Adam + cosine annealing
// ---------------------------------------------------------------------------

struct Schedule {
    double base_lr = 3e-4;
    double eta_min = 0.0;
    int64_t t_max = 1;

    double lr_at(int64_t step) const {
        if (t_max <= 0) return base_lr;
        if (step >= t_max) return eta_min;
        const double cosine =
            std::cos(3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(t_max));
        return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + cosine);
    }

    json to_json() const {
        return json{{"base_lr", base_lr}, {"eta_min", eta_min}, {"t_max", t_max}};
    }
    static Schedule from_json(const json& j) {
        Schedule s;
        s.base_lr = j.at("base_lr");
        s.eta_min = j.at("eta_min");
        s.t_max = j.at("t_max");
        return s;
    }
};

template <class T>
struct Optimizer {
    Schedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    ParamSet<T> m;
    ParamSet<T> v;

    static Optimizer for_params(const ParamSet<T>& params, const Schedule& schedule) {
        Optimizer opt;
        opt.schedule = schedule;
        opt.m = params.zeros_like();
        opt.v = params.zeros_like();
        return opt;
    }

    double current_lr() const { return schedule.lr_at(step); }
};

template <class T>
void adam_step(Optimizer<T>& opt, ParamSet<T>& params, const ParamSet<T>& grads) {
    if (!params.same_shapes(grads)) throw ShapeError("adam_step: gradient shapes do not match");
    if (!params.same_shapes(opt.m)) throw ShapeError("adam_step: optimizer state shape mismatch");
    for (size_t a = 0; a < grads.arrays.size(); ++a)
        for (const T g : grads.arrays[a].data)
            if (!std::isfinite(static_cast<double>(g)))
                throw NumericError("non-finite gradient in parameter '" + grads.names[a] + "'");

    const double lr = opt.schedule.lr_at(opt.step);
    const double t = static_cast<double>(opt.step + 1);
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);
    for (size_t a = 0; a < params.arrays.size(); ++a) {
        T* p = params.arrays[a].ptr();
        T* m = opt.m.arrays[a].ptr();
        T* v = opt.v.arrays[a].ptr();
        const T* g = grads.arrays[a].ptr();
        const int64_t n = params.arrays[a].size();
        for (int64_t i = 0; i < n; ++i) {
            m[i] = static_cast<T>(opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i]);
            v[i] = static_cast<T>(opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i]);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + opt.eps));
        }
    }
    ++opt.step;
}

// teacher' = momentum * teacher + (1 - momentum) * student, over the
// teacher's parameter names (the student may carry extra entries, e.g. its
// second head).
template <class T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double momentum) {
    if (momentum < 0.0 || momentum > 1.0) throw ParamError("EMA momentum must lie in [0,1]");
    for (size_t a = 0; a < teacher.arrays.size(); ++a) {
        const int si = student.find(teacher.names[a]);
        if (si < 0) throw ShapeError("ema_update: student lacks parameter " + teacher.names[a]);
        const auto& s = student.arrays[static_cast<size_t>(si)];
        auto& t = teacher.arrays[a];
        if (s.shape != t.shape) throw ShapeError("ema_update: shape mismatch at " + teacher.names[a]);
        const T mom = static_cast<T>(momentum);
        for (int64_t i = 0; i < t.size(); ++i)
            t.data[static_cast<size_t>(i)] = mom * t.data[static_cast<size_t>(i)] +
                                             (T(1) - mom) * s.data[static_cast<size_t>(i)];
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container: JSON header + raw little-endian float32 arrays
// ---------------------------------------------------------------------------

struct Checkpoint {
    json spec;
    ParamSet<float> params;
    json extra;
};

void save_checkpoint(const std::string& path, const json& spec, const ParamSet<float>& params,
                     const json& extra = json::object());
Checkpoint load_checkpoint(const std::string& path);
// throws IoError when the stored spec differs from `expected_spec`
Checkpoint load_checkpoint(const std::string& path, const json& expected_spec);

}  // namespace wsigrade::nn
