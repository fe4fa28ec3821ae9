#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vg/error.hpp"
#include "vg/rng.hpp"
#include "vg/tensor.hpp"

namespace vg {

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

// ---------------------------------------------------------------------------
// Sinusoidal positional encodings
// ---------------------------------------------------------------------------

// Interleaved sin/cos at geometrically spaced frequencies (base 10000):
// component 2p = sin(pos / 10000^(2p/dim)), 2p+1 the matching cos.
template <typename T>
std::vector<T> sinusoidal_encoding(double position, int dim) {
    if (dim % 2 != 0) throw ConfigError("sinusoidal_encoding: dim must be even, got " + std::to_string(dim));
    std::vector<T> out(static_cast<std::size_t>(dim));
    for (int p = 0; p < dim / 2; ++p) {
        const double freq = std::pow(10000.0, -2.0 * p / dim);
        out[static_cast<std::size_t>(2 * p)] = static_cast<T>(std::sin(position * freq));
        out[static_cast<std::size_t>(2 * p + 1)] = static_cast<T>(std::cos(position * freq));
    }
    return out;
}

// [L, C] table of absolute 1-D positions 0..L-1.
template <typename T>
Tensor<T> sinusoidal_rows_1d(int length, int channels) {
    std::vector<T> v;
    v.reserve(static_cast<std::size_t>(length) * channels);
    for (int p = 0; p < length; ++p) {
        auto row = sinusoidal_encoding<T>(p, channels);
        v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor<T>::leaf({length, channels}, std::move(v));
}

// [H*W, C] table of absolute 2-D positions, row-major cells; the first C/2
// channels encode x, the last C/2 encode y.
template <typename T>
Tensor<T> sinusoidal_grid_2d(int height, int width, int channels) {
    if (channels % 4 != 0)
        throw ConfigError("sinusoidal_grid_2d: channels must be divisible by 4, got " + std::to_string(channels));
    std::vector<T> v;
    v.reserve(static_cast<std::size_t>(height) * width * channels);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            auto ex = sinusoidal_encoding<T>(x, channels / 2);
            auto ey = sinusoidal_encoding<T>(y, channels / 2);
            v.insert(v.end(), ex.begin(), ex.end());
            v.insert(v.end(), ey.begin(), ey.end());
        }
    return Tensor<T>::leaf({height * width, channels}, std::move(v));
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> xavier_uniform(std::size_t n, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
    return v;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng)
        : weight(Tensor<T>::leaf({out, in}, xavier_uniform<T>(static_cast<std::size_t>(out) * in, in, out, rng), true)),
          bias(Tensor<T>::zeros({out}, true)) {}

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& x) const {
        return add_rows(tp, matmul_nt(tp, x, weight), bias);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;

    LayerNormParams() = default;
    explicit LayerNormParams(int dim)
        : gamma(Tensor<T>::leaf({dim}, std::vector<T>(static_cast<std::size_t>(dim), T(1)), true)),
          beta(Tensor<T>::zeros({dim}, true)) {}

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& x) const { return layer_norm(tp, x, gamma, beta, T(1e-5)); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

// linear -> relu -> linear
template <typename T>
struct FFN {
    Linear<T> fc1, fc2;

    FFN() = default;
    FFN(int d_model, int hidden, Rng& rng) : fc1(d_model, hidden, rng), fc2(hidden, d_model, rng) {}

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& x) const {
        return fc2.forward(tp, relu(tp, fc1.forward(tp, x)));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

// Three linear layers with ReLU between them; emits 4 raw box logits. The
// caller applies the sigmoid.
template <typename T>
struct MLP3 {
    Linear<T> l1, l2, l3;

    MLP3() = default;
    MLP3(int in, int hidden, Rng& rng) : l1(in, hidden, rng), l2(hidden, hidden, rng), l3(hidden, 4, rng) {}

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& x) const {
        return l3.forward(tp, relu(tp, l2.forward(tp, relu(tp, l1.forward(tp, x)))));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        l1.collect(prefix + ".l1", out);
        l2.collect(prefix + ".l2", out);
        l3.collect(prefix + ".l3", out);
    }
};

// ---------------------------------------------------------------------------
// Relative position encodings over a 2-D grid
// ---------------------------------------------------------------------------

// Sinusoidal encodings of every possible cell offset (dx, dy), plus the
// per-(query,key) index map. A pure function of (H, W, C): entry for offset
// (dx, dy) concatenates a C/2-dim encoding of dx with a C/2-dim encoding of
// dy, matching the absolute 2-D convention.
template <typename T>
struct RelativeEncodingTable {
    int height = 0, width = 0, channels = 0;
    Tensor<T> table;           // [(2H-1)*(2W-1), C]
    std::vector<int> offsets;  // [HW*HW], row in `table` for (query i, key j)

    static RelativeEncodingTable build(int height, int width, int channels) {
        if (channels % 4 != 0)
            throw ConfigError("RelativeEncodingTable: channels must be divisible by 4, got " +
                              std::to_string(channels));
        RelativeEncodingTable r;
        r.height = height;
        r.width = width;
        r.channels = channels;
        const int span_x = 2 * width - 1, span_y = 2 * height - 1;
        std::vector<T> v;
        v.reserve(static_cast<std::size_t>(span_x) * span_y * channels);
        for (int dy = -(height - 1); dy <= height - 1; ++dy)
            for (int dx = -(width - 1); dx <= width - 1; ++dx) {
                auto ex = sinusoidal_encoding<T>(dx, channels / 2);
                auto ey = sinusoidal_encoding<T>(dy, channels / 2);
                v.insert(v.end(), ex.begin(), ex.end());
                v.insert(v.end(), ey.begin(), ey.end());
            }
        r.table = Tensor<T>::leaf({span_y * span_x, channels}, std::move(v));
        const int n = height * width;
        r.offsets.resize(static_cast<std::size_t>(n) * n);
        for (int i = 0; i < n; ++i) {
            const int yi = i / width, xi = i % width;
            for (int j = 0; j < n; ++j) {
                const int yj = j / width, xj = j % width;
                const int dy = yi - yj, dx = xi - xj;
                r.offsets[static_cast<std::size_t>(i) * n + j] = (dy + height - 1) * span_x + (dx + width - 1);
            }
        }
        return r;
    }

    void zero() {
        auto* d = table.mutable_data();
        std::fill(d, d + table.size(), T(0));
    }
};

// logits[h,i,j] = dot(Q[h,i,:], relk[offsets[i*L+j], h*dk : (h+1)*dk]); the
// relative-position term of the guided attention, fused so the offset gather
// never materializes an [L,L,C] tensor.
template <typename T>
Tensor<T> rel_attention_logits(Tape<T>& tp, const Tensor<T>& q, const Tensor<T>& relk,
                               const std::vector<int>& offsets) {
    if (q.rank() != 3 || relk.rank() != 2) throw DimError("rel_attention_logits: bad ranks");
    const int heads = q.dim(0), L = q.dim(1), dk = q.dim(2);
    if (relk.dim(1) != heads * dk)
        throw DimError("rel_attention_logits: relk " + shape_str(relk.shape()) + " vs heads*dk " +
                       std::to_string(heads * dk));
    if (offsets.size() != static_cast<std::size_t>(L) * L)
        throw ContractError("rel_attention_logits: offset map does not cover LxL pairs");
    const int C = heads * dk;
    auto out = tp.make({heads, L, L}, q.requires_grad() || relk.requires_grad());
    T* o = out.node()->store.data();
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < L; ++i) {
            const T* qr = q.data() + (static_cast<std::size_t>(h) * L + i) * dk;
            for (int j = 0; j < L; ++j) {
                const T* rr = relk.data() + static_cast<std::size_t>(offsets[static_cast<std::size_t>(i) * L + j]) * C + h * dk;
                T s = 0;
                for (int t = 0; t < dk; ++t) s += qr[t] * rr[t];
                o[(static_cast<std::size_t>(h) * L + i) * L + j] = s;
            }
        }
    if (out.requires_grad()) {
        auto qn = q.node(), rn = relk.node(), on = out.node();
        const auto* offs = &offsets;
        tp.record({qn, rn}, [qn, rn, on, offs, heads, L, dk, C] {
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < L; ++i) {
                    const std::size_t qoff = (static_cast<std::size_t>(h) * L + i) * dk;
                    for (int j = 0; j < L; ++j) {
                        const T g = on->grad[(static_cast<std::size_t>(h) * L + i) * L + j];
                        const std::size_t roff =
                            static_cast<std::size_t>((*offs)[static_cast<std::size_t>(i) * L + j]) * C + h * dk;
                        for (int t = 0; t < dk; ++t) {
                            if (qn->requires_grad) qn->grad[qoff + t] += g * rn->data[roff + t];
                            if (rn->requires_grad) rn->grad[roff + t] += g * qn->data[qoff + t];
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionResult {
    Tensor<T> output;   // [Lq, C]
    Tensor<T> weights;  // [heads, Lq, Lk], rows sum to 1
};

template <typename T>
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(int d_model, int heads, Rng& rng)
        : d_model_(d_model),
          heads_(heads),
          wq(d_model, d_model, rng),
          wk(d_model, d_model, rng),
          wv(d_model, d_model, rng),
          wo(d_model, d_model, rng) {
        if (heads <= 0 || d_model % heads != 0)
            throw ConfigError("MultiHeadAttention: d_model " + std::to_string(d_model) +
                              " not divisible by heads " + std::to_string(heads));
    }

    AttentionResult<T> forward(Tape<T>& tp, const Tensor<T>& q_in, const Tensor<T>& k_in,
                               const Tensor<T>& v_in) const {
        return run(tp, q_in, k_in, v_in, nullptr);
    }

    // Eq-style relative variant: logits get Q(i)^T (W_k^T R(i-j)) added, with
    // the same key projection applied to the relative encodings (no bias).
    AttentionResult<T> forward_relative(Tape<T>& tp, const Tensor<T>& q_in, const Tensor<T>& k_in,
                                        const Tensor<T>& v_in, const RelativeEncodingTable<T>& rel) const {
        if (q_in.dim(0) != rel.height * rel.width || k_in.dim(0) != rel.height * rel.width)
            throw ContractError("forward_relative: sequence is not the " + std::to_string(rel.height) + "x" +
                                std::to_string(rel.width) + " spatial grid of the encoding table");
        return run(tp, q_in, k_in, v_in, &rel);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        wq.collect(prefix + ".w_q", out);
        wk.collect(prefix + ".w_k", out);
        wv.collect(prefix + ".w_v", out);
        wo.collect(prefix + ".w_o", out);
    }

    int heads() const { return heads_; }
    int d_model() const { return d_model_; }

    Linear<T> wq, wk, wv, wo;

private:
    AttentionResult<T> run(Tape<T>& tp, const Tensor<T>& q_in, const Tensor<T>& k_in,
                           const Tensor<T>& v_in, const RelativeEncodingTable<T>* rel) const {
        if (q_in.dim(1) != d_model_ || k_in.dim(1) != d_model_ || v_in.dim(1) != d_model_)
            throw DimError("attention: channel dims " + shape_str(q_in.shape()) + "/" + shape_str(k_in.shape()) +
                           "/" + shape_str(v_in.shape()) + " vs d_model " + std::to_string(d_model_));
        if (k_in.dim(0) != v_in.dim(0))
            throw DimError("attention: key/value lengths " + shape_str(k_in.shape()) + " vs " +
                           shape_str(v_in.shape()));
        const int dk = d_model_ / heads_;
        auto q = split_heads(tp, wq.forward(tp, q_in), heads_);
        auto k = split_heads(tp, wk.forward(tp, k_in), heads_);
        auto v = split_heads(tp, wv.forward(tp, v_in), heads_);
        auto logits = bmm_nt(tp, q, k);
        if (rel) {
            auto relk = matmul_nt(tp, rel->table, wk.weight);
            logits = add(tp, logits, rel_attention_logits(tp, q, relk, rel->offsets));
        }
        logits = scale(tp, logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
        auto weights = softmax(tp, logits, -1);
        auto out = wo.forward(tp, merge_heads(tp, bmm(tp, weights, v)));
        return {out, weights};
    }

    int d_model_ = 0;
    int heads_ = 0;
};

// ---------------------------------------------------------------------------
// Transformer encoder layer (post-norm)
// ---------------------------------------------------------------------------

// Self-attention + LN, then FFN + LN. Positional encodings are expected to
// be applied to x by the caller.
template <typename T>
struct EncoderLayer {
    MultiHeadAttention<T> attn;
    FFN<T> ffn;
    LayerNormParams<T> ln1, ln2;

    EncoderLayer() = default;
    EncoderLayer(int d_model, int heads, int ffn_hidden, Rng& rng)
        : attn(d_model, heads, rng), ffn(d_model, ffn_hidden, rng), ln1(d_model), ln2(d_model) {}

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& x) const {
        auto h1 = ln1.forward(tp, add(tp, x, attn.forward(tp, x, x, x).output));
        return ln2.forward(tp, add(tp, h1, ffn.forward(tp, h1)));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        attn.collect(prefix + ".attn", out);
        ffn.collect(prefix + ".ffn", out);
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
    }
};

}  // namespace vg
