#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "attention.hpp"
#include "params.hpp"
#include "tensor.hpp"

namespace ssmt {

enum class Modality { text, speech };

inline const char* modality_name(Modality m) { return m == Modality::text ? "text" : "speech"; }

// Per-position encoder outputs for one modality: l x d, used as attention
// keys/values downstream.
struct ContextualFeatures {
    Tensor values;
    Modality modality = Modality::text;
    int length() const { return values.dim(0); }
};

// Interleaved sinusoidal positions: even columns sin, odd columns cos, both
// driven by pos / 10000^(2i/d).
inline Tensor positional_encoding(int length, int d) {
    if (length < 0 || d < 1) {
        throw std::invalid_argument("positional_encoding: bad dimensions l=" +
                                    std::to_string(length) + " d=" + std::to_string(d));
    }
    std::vector<double> pe(static_cast<size_t>(length) * d);
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; 2 * i < d; ++i) {
            const double rate = std::pow(10000.0, -2.0 * i / d);
            pe[static_cast<size_t>(pos) * d + 2 * i] = std::sin(pos * rate);
            if (2 * i + 1 < d) pe[static_cast<size_t>(pos) * d + 2 * i + 1] = std::cos(pos * rate);
        }
    }
    return Tensor::from_data({length, d}, std::move(pe));
}

// Scaled embedding lookup plus positional signal: row i = table[id_i]*sqrt(d) + PE(i).
inline Tensor embed_text(const std::vector<int>& ids, const Tensor& table) {
    if (ids.empty()) throw std::invalid_argument("embed_text: empty token sequence");
    const int d = table.dim(1);
    Tensor scaled = scale(embedding_rows(table, ids), std::sqrt(static_cast<double>(d)));
    return add(scaled, positional_encoding(static_cast<int>(ids.size()), d));
}

struct ConvLayer {
    Tensor kernels;  // c_out x c_in x k
    Tensor bias;     // c_out
    int stride = 1;
    int padding = 0;

    ConvLayer() = default;
    ConvLayer(ParamRegistry& reg, const std::string& prefix, int c_in, int c_out, int k,
              int stride_, int padding_, Rng& rng)
        : kernels(reg.xavier_uniform(prefix + ".kernels", {c_out, c_in, k}, c_in * k, c_out * k,
                                     rng)),
          bias(reg.constant_init(prefix + ".bias", {c_out}, 0.0)),
          stride(stride_),
          padding(padding_) {}

    Tensor operator()(const Tensor& x) const {
        return add_rows(conv1d_strided(x, kernels, stride, padding), bias);
    }
};

// Trainable stand-in for a pretrained speech feature extractor: two stride-2
// convolutions with GELU, so l_feat = ceil(l_raw / 4).
struct FrameEncoder {
    ConvLayer conv0, conv1;

    FrameEncoder() = default;
    FrameEncoder(ParamRegistry& reg, const std::string& prefix, int f_raw, int hidden, int d_feat,
                 Rng& rng)
        : conv0(reg, prefix + ".conv0", f_raw, hidden, 5, 2, 2, rng),
          conv1(reg, prefix + ".conv1", hidden, d_feat, 5, 2, 2, rng) {}

    Tensor operator()(const Tensor& frames) const {
        if (frames.ndim() != 2 || frames.dim(0) < 1) {
            throw std::invalid_argument("frame encoder input must be a nonempty l x f matrix, got " +
                                        shape_str(frames.shape()));
        }
        return gelu(conv1(gelu(conv0(frames))));
    }
};

// Length reduction into the shared encoder width: two more stride-2
// convolutions, so l' = ceil(l / 4) and channels end at the model dim.
struct DownsampleCnn {
    ConvLayer conv0, conv1;

    DownsampleCnn() = default;
    DownsampleCnn(ParamRegistry& reg, const std::string& prefix, int d_feat, int hidden, int d,
                  Rng& rng)
        : conv0(reg, prefix + ".conv0", d_feat, hidden, 5, 2, 2, rng),
          conv1(reg, prefix + ".conv1", hidden, d, 5, 2, 2, rng) {}

    Tensor operator()(const Tensor& features) const {
        if (features.ndim() != 2 || features.dim(0) < 1) {
            throw std::invalid_argument("downsample input must be a nonempty l x c matrix, got " +
                                        shape_str(features.shape()));
        }
        return gelu(conv1(gelu(conv0(features))));
    }
};

// The modality-shared contextual encoder. One parameter set serves both
// branches; inputs are expected to carry positional information already.
struct SharedEncoder {
    std::vector<EncoderBlock> blocks;
    int max_positions = 1024;

    SharedEncoder() = default;
    SharedEncoder(ParamRegistry& reg, const std::string& prefix, int n_layers, int d, int heads,
                  int ffn_dim, double ln_eps, int max_positions_, Rng& rng)
        : max_positions(max_positions_) {
        blocks.reserve(static_cast<size_t>(n_layers));
        for (int i = 0; i < n_layers; ++i) {
            blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), d, heads, ffn_dim,
                                ln_eps, rng);
        }
    }

    ContextualFeatures operator()(const Tensor& x, Modality modality) const {
        if (x.dim(0) > max_positions) {
            throw std::invalid_argument("sequence length " + std::to_string(x.dim(0)) +
                                        " exceeds max positions " +
                                        std::to_string(max_positions));
        }
        Tensor h = x;
        for (const auto& block : blocks) h = block(h);
        return ContextualFeatures{h, modality};
    }
};

}  // namespace ssmt
