#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "params.hpp"
#include "tensor.hpp"

namespace ssmt {

// Additive mask value for disallowed attention positions. Large enough that
// exp underflows to exactly zero after max subtraction, small enough to keep
// every intermediate finite.
inline constexpr double kMaskedScore = -1e9;

struct Linear {
    Tensor w;  // d_in x d_out
    Tensor b;  // d_out

    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& prefix, int d_in, int d_out, Rng& rng)
        : w(reg.xavier_uniform(prefix + ".w", {d_in, d_out}, d_in, d_out, rng)),
          b(reg.constant_init(prefix + ".b", {d_out}, 0.0)) {}

    Tensor operator()(const Tensor& x) const { return add_rows(matmul(x, w), b); }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(ParamRegistry& reg, const std::string& prefix, int d, double eps_)
        : gain(reg.constant_init(prefix + ".gain", {d}, 1.0)),
          bias(reg.constant_init(prefix + ".bias", {d}, 0.0)),
          eps(eps_) {}

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

// Lower-triangular-pass additive mask for autoregressive self-attention.
inline Tensor causal_mask(int t) {
    std::vector<double> m(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j) m[static_cast<size_t>(i) * t + j] = kMaskedScore;
    return Tensor::from_data({t, t}, std::move(m));
}

struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int n_heads = 1;
    int d_model = 0;
    int d_head = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamRegistry& reg, const std::string& prefix, int d, int heads, Rng& rng)
        : wq(reg, prefix + ".wq", d, d, rng),
          wk(reg, prefix + ".wk", d, d, rng),
          wv(reg, prefix + ".wv", d, d, rng),
          wo(reg, prefix + ".wo", d, d, rng),
          n_heads(heads),
          d_model(d),
          d_head(d / heads) {
        if (heads < 1 || d % heads != 0) {
            throw std::invalid_argument("attention heads must divide model dim: d=" +
                                        std::to_string(d) + " heads=" + std::to_string(heads));
        }
    }

    // q_in: lq x d, kv_in: lkv x d, mask: optional lq x lkv additive scores.
    // When attn_capture is non-null, each head's post-softmax weight matrix is
    // appended to it.
    Tensor operator()(const Tensor& q_in, const Tensor& kv_in, const Tensor& mask,
                      std::vector<Tensor>* attn_capture = nullptr) const {
        if (q_in.dim(1) != d_model || kv_in.dim(1) != d_model) {
            throw std::invalid_argument("attention input width must equal model dim " +
                                        std::to_string(d_model) + ", got " +
                                        shape_str(q_in.shape()) + " and " +
                                        shape_str(kv_in.shape()));
        }
        const Tensor q = wq(q_in);
        const Tensor k = wk(kv_in);
        const Tensor v = wv(kv_in);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
        std::vector<Tensor> heads;
        heads.reserve(static_cast<size_t>(n_heads));
        for (int h = 0; h < n_heads; ++h) {
            const int c0 = h * d_head, c1 = (h + 1) * d_head;
            Tensor scores = scale(
                matmul(slice_cols(q, c0, c1), transpose(slice_cols(k, c0, c1))), inv_sqrt);
            if (mask.defined()) scores = add(scores, mask);
            Tensor weights = softmax(scores, 1);
            if (attn_capture) attn_capture->push_back(weights);
            heads.push_back(matmul(weights, slice_cols(v, c0, c1)));
        }
        return wo(concat_cols(heads));
    }
};

struct FeedForward {
    Linear lin1, lin2;

    FeedForward() = default;
    FeedForward(ParamRegistry& reg, const std::string& prefix, int d, int hidden, Rng& rng)
        : lin1(reg, prefix + ".lin1", d, hidden, rng), lin2(reg, prefix + ".lin2", hidden, d, rng) {}

    Tensor operator()(const Tensor& x) const { return lin2(relu(lin1(x))); }
};

// Post-norm residual encoder block: self-attention then feed-forward.
struct EncoderBlock {
    MultiHeadAttention attn;
    FeedForward ffn;
    LayerNorm ln1, ln2;

    EncoderBlock() = default;
    EncoderBlock(ParamRegistry& reg, const std::string& prefix, int d, int heads, int ffn_dim,
                 double ln_eps, Rng& rng)
        : attn(reg, prefix + ".self_attn", d, heads, rng),
          ffn(reg, prefix + ".ffn", d, ffn_dim, rng),
          ln1(reg, prefix + ".ln1", d, ln_eps),
          ln2(reg, prefix + ".ln2", d, ln_eps) {}

    Tensor operator()(const Tensor& x) const {
        Tensor h = ln1(add(x, attn(x, x, Tensor())));
        return ln2(add(h, ffn(h)));
    }
};

// Post-norm decoder block: causal self-attention, cross-attention over the
// memory rows, feed-forward.
struct DecoderBlock {
    MultiHeadAttention self_attn;
    MultiHeadAttention cross_attn;
    FeedForward ffn;
    LayerNorm ln1, ln2, ln3;

    DecoderBlock() = default;
    DecoderBlock(ParamRegistry& reg, const std::string& prefix, int d, int heads, int ffn_dim,
                 double ln_eps, Rng& rng)
        : self_attn(reg, prefix + ".self_attn", d, heads, rng),
          cross_attn(reg, prefix + ".cross_attn", d, heads, rng),
          ffn(reg, prefix + ".ffn", d, ffn_dim, rng),
          ln1(reg, prefix + ".ln1", d, ln_eps),
          ln2(reg, prefix + ".ln2", d, ln_eps),
          ln3(reg, prefix + ".ln3", d, ln_eps) {}

    Tensor operator()(const Tensor& x, const Tensor& memory, const Tensor& self_mask) const {
        Tensor h = ln1(add(x, self_attn(x, x, self_mask)));
        h = ln2(add(h, cross_attn(h, memory, Tensor())));
        return ln3(add(h, ffn(h)));
    }
};

}  // namespace ssmt
