#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vg/boxes.hpp"
#include "vg/encoders.hpp"
#include "vg/nn.hpp"

namespace vg {

struct ModelConfig {
    int channels = 64;
    int heads = 4;
    int ffn_hidden = 256;
    int stages = 6;
    bool use_verification = true;
    bool use_context = true;
    bool multi_stage = true;
    int visual_layers = 2;
    int text_layers = 2;
    int patch_size = 8;
    int image_size = 64;
    int max_text_len = 16;
    bool share_box_head = true;
    int vocab_size = 0;

    int effective_stages() const { return multi_stage ? stages : 1; }

    void validate() const {
        if (stages < 1) throw ConfigError("stages must be >= 1, got " + std::to_string(stages));
        if (channels <= 0 || heads <= 0 || channels % heads != 0)
            throw ConfigError("channels " + std::to_string(channels) + " not divisible by heads " +
                              std::to_string(heads));
        if (patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch " +
                              std::to_string(patch_size));
        if (visual_layers < 0 || text_layers < 0) throw ConfigError("encoder depths must be >= 0");
        if (vocab_size < 3) throw ConfigError("vocab size must cover the reserved tokens");
    }

    // Tiny 64-bit-friendly configuration for gradient checking: C=8, 2 heads,
    // 2 stages, a 2x2 feature map.
    static ModelConfig micro(int vocab) {
        ModelConfig c;
        c.channels = 8;
        c.heads = 2;
        c.ffn_hidden = 16;
        c.stages = 2;
        c.visual_layers = 1;
        c.text_layers = 1;
        c.patch_size = 8;
        c.image_size = 16;
        c.max_text_len = 8;
        c.vocab_size = vocab;
        return c;
    }
};

// ---------------------------------------------------------------------------
// Visual-linguistic verification
// ---------------------------------------------------------------------------

// Gaussian kernel on cosine distance: alpha * exp(-(1 - cos)^2 / (2 sigma^2)).
// sigma is clamped to >= 1e-3 before use so a collapsing sigma cannot blow up
// the division.
template <typename T>
Tensor<T> verification_kernel(Tape<T>& tp, const Tensor<T>& cos, const Tensor<T>& alpha,
                              const Tensor<T>& sigma) {
    auto delta = add_scalar(tp, scale(tp, cos, T(-1)), T(1));
    auto sig = clamp_min(tp, sigma, T(1e-3));
    auto denom = scale(tp, mul(tp, sig, sig), T(2));
    auto kernel = exp_(tp, scale(tp, div(tp, mul(tp, delta, delta), denom), T(-1)));
    return mul(tp, kernel, alpha);
}

// Gathers per-cell semantics from the text via cross-attention, projects both
// maps into a joint space, and scores every cell with a Gaussian kernel on
// the cosine distance: S = alpha * exp(-(1 - cos)^2 / (2 sigma^2)).
template <typename T>
struct VerificationModule {
    MultiHeadAttention<T> cross_attention;
    Linear<T> proj_v, proj_s;
    Tensor<T> alpha;  // learnable scalar, init 1.0
    Tensor<T> sigma;  // learnable scalar, init 0.5; clamped >= 1e-3 in use

    VerificationModule() = default;
    VerificationModule(int channels, int heads, Rng& rng)
        : cross_attention(channels, heads, rng),
          proj_v(channels, channels, rng),
          proj_s(channels, channels, rng),
          alpha(Tensor<T>::scalar(T(1.0), true)),
          sigma(Tensor<T>::scalar(T(0.5), true)) {}

    struct Result {
        Tensor<T> scores;        // [HW], in (0, alpha] while alpha > 0
        Tensor<T> semantic_map;  // [HW, C]
        Tensor<T> attn;          // [heads, HW, L]
    };

    // text_keys = F_l with 1-D positions added; values stay raw F_l.
    Result forward(Tape<T>& tp, const Tensor<T>& f_v, const Tensor<T>& f_l, const Tensor<T>& text_keys) const {
        auto gathered = cross_attention.forward(tp, f_v, text_keys, f_l);
        auto pv = l2_normalize(tp, proj_v.forward(tp, f_v), -1);
        auto ps = l2_normalize(tp, proj_s.forward(tp, gathered.output), -1);
        auto cos = rowwise_dot(tp, pv, ps);
        return {verification_kernel(tp, cos, alpha, sigma), gathered.output, gathered.weights};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        cross_attention.collect(prefix + ".cross_attention", out);
        proj_v.collect(prefix + ".proj_v", out);
        proj_s.collect(prefix + ".proj_s", out);
        out.push_back({prefix + ".alpha", alpha});
        out.push_back({prefix + ".sigma", sigma});
    }
};

// ---------------------------------------------------------------------------
// Language-guided context encoder
// ---------------------------------------------------------------------------

// First gathers a linguistic counterpart F_c for every cell, then runs
// self-attention over the visual cells with queries/keys formed from
// F_v + F_c and relative-position logits; values are the raw visual
// features.
template <typename T>
struct ContextEncoder {
    MultiHeadAttention<T> text_attention;
    MultiHeadAttention<T> guided_attention;
    RelativeEncodingTable<T> rel;

    ContextEncoder() = default;
    ContextEncoder(int channels, int heads, int grid_h, int grid_w, Rng& rng)
        : text_attention(channels, heads, rng),
          guided_attention(channels, heads, rng),
          rel(RelativeEncodingTable<T>::build(grid_h, grid_w, channels)) {}

    struct Result {
        Tensor<T> context;        // F_vc, [HW, C]
        Tensor<T> text_features;  // F_c, [HW, C]
        Tensor<T> attn;           // [heads, HW, HW]
    };

    Result forward(Tape<T>& tp, const Tensor<T>& f_v, const Tensor<T>& f_l) const {
        auto fc = text_attention.forward(tp, f_v, f_l, f_l).output;
        auto qk = add(tp, f_v, fc);
        auto guided = guided_attention.forward_relative(tp, qk, qk, f_v, rel);
        return {guided.output, fc, guided.weights};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        text_attention.collect(prefix + ".text_attention", out);
        guided_attention.collect(prefix + ".guided_attention", out);
    }
};

// ---------------------------------------------------------------------------
// Feature modulation
// ---------------------------------------------------------------------------

// F_hat = (F_v + F_vc) . S, with either term optional: context off drops the
// sum, verification off drops the scores (all-ones), both off is identity.
template <typename T>
Tensor<T> modulate(Tape<T>& tp, const Tensor<T>& f_v, const Tensor<T>* f_vc, const Tensor<T>* scores) {
    auto base = f_vc ? add(tp, f_v, *f_vc) : f_v;
    return scores ? scale_rows(tp, base, *scores) : base;
}

// ---------------------------------------------------------------------------
// Decoder stage
// ---------------------------------------------------------------------------

// One cross-modal reasoning round: the query reads the text, the gathered
// linguistic vector then attends the discriminative map (keys) to gather raw
// visual features (values), and the query is updated through the
// residual/LN/FFN block.
template <typename T>
struct DecoderStage {
    MultiHeadAttention<T> text_attention;
    MultiHeadAttention<T> visual_attention;
    FFN<T> ffn;
    LayerNormParams<T> ln1, ln2;

    DecoderStage() = default;
    DecoderStage(int channels, int heads, int ffn_hidden, Rng& rng)
        : text_attention(channels, heads, rng),
          visual_attention(channels, heads, rng),
          ffn(channels, ffn_hidden, rng),
          ln1(channels),
          ln2(channels) {}

    struct Result {
        Tensor<T> query;        // t_q^{i+1}, [1, C]
        Tensor<T> t_l;          // gathered linguistic representation, [1, C]
        Tensor<T> t_v;          // gathered visual feature, [1, C]
        Tensor<T> visual_attn;  // [heads, 1, HW]
        Tensor<T> text_attn;    // [heads, 1, L]
    };

    Result forward(Tape<T>& tp, const Tensor<T>& t_q, const Tensor<T>& f_l, const Tensor<T>& text_keys,
                   const Tensor<T>& f_hat, const Tensor<T>& f_v) const {
        auto text = text_attention.forward(tp, t_q, text_keys, f_l);
        auto visual = visual_attention.forward(tp, text.output, f_hat, f_v);
        auto t1 = ln1.forward(tp, add(tp, t_q, visual.output));
        auto t2 = ln2.forward(tp, add(tp, t1, ffn.forward(tp, t1)));
        return {t2, text.output, visual.output, visual.weights, text.weights};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        text_attention.collect(prefix + ".text_attention", out);
        visual_attention.collect(prefix + ".visual_attention", out);
        ffn.collect(prefix + ".ffn", out);
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
    }
};

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

template <typename T>
struct StagePredictions {
    std::vector<Tensor<T>> box_params;   // N tensors [1,4], sigmoid applied
    std::vector<Box> boxes;              // the same N boxes as plain values
    Tensor<T> score_map;                 // [HW]; undefined when verification off
    Tensor<T> context_attn;              // [heads, HW, HW]; undefined when context off
    std::vector<Tensor<T>> visual_attn;  // N tensors [heads, 1, HW]
    int grid_h = 0, grid_w = 0;
};

template <typename T>
class GroundingModel {
public:
    GroundingModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const int C = cfg_.channels;
        visual_encoder = VisualEncoder<T>(cfg_.image_size, cfg_.patch_size, C, cfg_.heads, cfg_.ffn_hidden,
                                          cfg_.visual_layers, rng);
        text_encoder = TextEncoder<T>(cfg_.vocab_size, C, cfg_.heads, cfg_.ffn_hidden, cfg_.text_layers,
                                      cfg_.max_text_len, rng);
        if (cfg_.use_verification) verification = std::make_unique<VerificationModule<T>>(C, cfg_.heads, rng);
        if (cfg_.use_context)
            context = std::make_unique<ContextEncoder<T>>(C, cfg_.heads, visual_encoder.grid(),
                                                          visual_encoder.grid(), rng);
        stages.reserve(static_cast<std::size_t>(cfg_.effective_stages()));
        for (int i = 0; i < cfg_.effective_stages(); ++i) stages.emplace_back(C, cfg_.heads, cfg_.ffn_hidden, rng);
        const int n_heads = cfg_.share_box_head ? 1 : cfg_.effective_stages();
        box_heads.reserve(static_cast<std::size_t>(n_heads));
        for (int i = 0; i < n_heads; ++i) box_heads.emplace_back(C, C, rng);
        target_query = Tensor<T>::leaf({1, C}, xavier_uniform<T>(static_cast<std::size_t>(C), C, 1, rng), true);
    }

    StagePredictions<T> forward(Tape<T>& tp, const std::vector<T>& image, const std::vector<int>& tokens) const {
        auto fmap = visual_encoder.forward(tp, image);
        auto text = text_encoder.forward(tp, tokens);
        auto text_keys = add(tp, text.values, sinusoidal_rows_1d<T>(text.length, cfg_.channels));

        StagePredictions<T> out;
        out.grid_h = fmap.height;
        out.grid_w = fmap.width;

        const Tensor<T>* scores = nullptr;
        const Tensor<T>* ctx_features = nullptr;
        typename VerificationModule<T>::Result ver;
        typename ContextEncoder<T>::Result ctx;
        if (verification) {
            ver = verification->forward(tp, fmap.values, text.values, text_keys);
            out.score_map = ver.scores;
            scores = &out.score_map;
        }
        if (context) {
            ctx = context->forward(tp, fmap.values, text.values);
            out.context_attn = ctx.attn;
            ctx_features = &ctx.context;
        }
        auto f_hat = modulate(tp, fmap.values, ctx_features, scores);

        auto query = target_query;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            auto res = stages[i].forward(tp, query, text.values, text_keys, f_hat, fmap.values);
            query = res.query;
            const auto& head = box_heads[cfg_.share_box_head ? 0 : i];
            auto box = sigmoid(tp, head.forward(tp, query));
            out.box_params.push_back(box);
            out.boxes.push_back(Box{static_cast<double>(box.value(0)), static_cast<double>(box.value(1)),
                                    static_cast<double>(box.value(2)), static_cast<double>(box.value(3))});
            out.visual_attn.push_back(res.visual_attn);
        }
        return out;
    }

    ParamList<T> parameters() const {
        ParamList<T> out;
        visual_encoder.collect("visual_encoder", out);
        text_encoder.collect("text_encoder", out);
        if (verification) verification->collect("verification", out);
        if (context) context->collect("context", out);
        for (std::size_t i = 0; i < stages.size(); ++i)
            stages[i].collect("decoder.stage" + std::to_string(i), out);
        if (cfg_.share_box_head) {
            box_heads[0].collect("box_head", out);
        } else {
            for (std::size_t i = 0; i < box_heads.size(); ++i)
                box_heads[i].collect("box_head" + std::to_string(i), out);
        }
        out.push_back({"target_query", target_query});
        return out;
    }

    // Rebind every parameter to view `master`'s values; gradients stay
    // private, which is what concurrent per-sample tapes need.
    void bind_to(const GroundingModel& master) {
        auto mine = parameters();
        auto theirs = master.parameters();
        if (mine.size() != theirs.size()) throw ContractError("bind_to: replica/master parameter mismatch");
        for (std::size_t i = 0; i < mine.size(); ++i) {
            if (mine[i].name != theirs[i].name) throw ContractError("bind_to: parameter order mismatch");
            mine[i].tensor.bind_values(theirs[i].tensor);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    int grid() const { return visual_encoder.grid(); }

    VisualEncoder<T> visual_encoder;
    TextEncoder<T> text_encoder;
    std::unique_ptr<VerificationModule<T>> verification;
    std::unique_ptr<ContextEncoder<T>> context;
    std::vector<DecoderStage<T>> stages;
    std::vector<MLP3<T>> box_heads;
    Tensor<T> target_query;

private:
    ModelConfig cfg_;
};

}  // namespace vg
