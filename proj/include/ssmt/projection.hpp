#pragma once

#include <string>
#include <vector>

#include "attention.hpp"
#include "encoder.hpp"
#include "params.hpp"
#include "tensor.hpp"

namespace ssmt {

// Fixed-length representation shared by both modalities: m x d.
struct SemanticMemory {
    Tensor values;
    Modality modality = Modality::text;
    int slots() const { return values.dim(0); }
};

// One projection layer: the running memory cross-attends to the contextual
// features (keys/values recomputed from the same features at every layer),
// then passes through a feed-forward sublayer; post-norm residuals on both.
struct ProjectionLayer {
    MultiHeadAttention cross_attn;
    FeedForward ffn;
    LayerNorm ln1, ln2;

    ProjectionLayer() = default;
    ProjectionLayer(ParamRegistry& reg, const std::string& prefix, int d, int heads, int ffn_dim,
                    double ln_eps, Rng& rng)
        : cross_attn(reg, prefix + ".cross_attn", d, heads, rng),
          ffn(reg, prefix + ".ffn", d, ffn_dim, rng),
          ln1(reg, prefix + ".ln1", d, ln_eps),
          ln2(reg, prefix + ".ln2", d, ln_eps) {}

    Tensor operator()(const Tensor& memory_in, const Tensor& context,
                      std::vector<Tensor>* attn_capture = nullptr) const {
        Tensor h = ln1(add(memory_in, cross_attn(memory_in, context, Tensor(), attn_capture)));
        return ln2(add(h, ffn(h)));
    }
};

// The full projection stack: m trainable queries iteratively refined against
// the contextual features, emitting an m x d memory regardless of input
// length.
struct SemanticProjection {
    Tensor queries;  // m x d, the trainable initial memory
    std::vector<ProjectionLayer> layers;

    SemanticProjection() = default;
    SemanticProjection(ParamRegistry& reg, const std::string& prefix, int m, int d, int n_layers,
                       int heads, int ffn_dim, double ln_eps, Rng& rng)
        : queries(reg.normal_init(prefix + ".queries", {m, d},
                                  1.0 / std::sqrt(static_cast<double>(d)), rng)) {
        if (m < 1 || n_layers < 1) {
            throw std::invalid_argument("projection needs m >= 1 and n_layers >= 1");
        }
        layers.reserve(static_cast<size_t>(n_layers));
        for (int i = 0; i < n_layers; ++i) {
            layers.emplace_back(reg, prefix + ".layer" + std::to_string(i), d, heads, ffn_dim,
                                ln_eps, rng);
        }
    }

    // final_attn, when non-null, receives the last layer's per-head attention
    // weight matrices (each m x l).
    SemanticMemory operator()(const ContextualFeatures& context,
                              std::vector<Tensor>* final_attn = nullptr) const {
        if (context.values.dim(1) != queries.dim(1)) {
            throw std::invalid_argument("context width " + shape_str(context.values.shape()) +
                                        " does not match memory width " +
                                        shape_str(queries.shape()));
        }
        Tensor memory = queries;
        for (size_t i = 0; i < layers.size(); ++i) {
            std::vector<Tensor>* capture = (final_attn && i + 1 == layers.size()) ? final_attn
                                                                                  : nullptr;
            memory = layers[i](memory, context.values, capture);
        }
        return SemanticMemory{memory, context.modality};
    }
};

}  // namespace ssmt
