#pragma once

#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

#include "attention.hpp"
#include "decoder.hpp"
#include "encoder.hpp"
#include "params.hpp"
#include "projection.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ssmt {

struct ModelConfig {
    int vocab_size = 32;
    int d_model = 64;
    int n_heads = 4;
    int enc_layers = 2;
    int dec_layers = 2;
    int proj_layers = 3;
    int ffn_dim = 128;
    int memory_slots = 8;
    int feature_dim = 8;    // raw frame width
    int frame_hidden = 32;  // frame encoder hidden channels
    int d_feat = 32;        // frame encoder output channels
    int cnn_hidden = 64;    // downsampler hidden channels
    int max_positions = 1024;
    double ln_eps = 1e-5;
    uint64_t init_seed = 1;

    void validate() const {
        if (vocab_size < 8) throw std::invalid_argument("vocab_size must be >= 8");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
            throw std::invalid_argument("n_heads must divide d_model");
        }
        if (enc_layers < 1 || dec_layers < 1 || proj_layers < 1 || ffn_dim < 1 ||
            memory_slots < 1 || feature_dim < 1 || frame_hidden < 1 || d_feat < 1 ||
            cnn_hidden < 1 || max_positions < 1) {
            throw std::invalid_argument("model dimensions must be positive");
        }
        if (ln_eps <= 0) throw std::invalid_argument("ln_eps must be positive");
    }
};

// The complete bi-modal translation model: a text branch and a speech branch
// meet in a shared contextual encoder, a fixed-length semantic projection
// bridges to the decoder, and the embedding table is tied between the text
// encoder input and the decoder input/output.
struct Model {
    ModelConfig cfg;
    ParamRegistry params;

    Tensor embed_table;  // vocab x d, shared by text encoder and decoder
    FrameEncoder frame_encoder;
    DownsampleCnn downsampler;
    SharedEncoder encoder;
    SemanticProjection projection;
    Decoder decoder;

    explicit Model(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        Rng rng(cfg.init_seed);
        embed_table = params.normal_init("embed.table", {cfg.vocab_size, cfg.d_model},
                                         1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
        frame_encoder = FrameEncoder(params, "speech.frames", cfg.feature_dim, cfg.frame_hidden,
                                     cfg.d_feat, rng);
        downsampler = DownsampleCnn(params, "speech.down", cfg.d_feat, cfg.cnn_hidden,
                                    cfg.d_model, rng);
        encoder = SharedEncoder(params, "encoder", cfg.enc_layers, cfg.d_model, cfg.n_heads,
                                cfg.ffn_dim, cfg.ln_eps, cfg.max_positions, rng);
        projection = SemanticProjection(params, "projection", cfg.memory_slots, cfg.d_model,
                                        cfg.proj_layers, cfg.n_heads, cfg.ffn_dim, cfg.ln_eps,
                                        rng);
        decoder = Decoder(params, "decoder", cfg.dec_layers, cfg.d_model, cfg.n_heads,
                          cfg.ffn_dim, cfg.ln_eps, cfg.max_positions, rng);
    }

    ContextualFeatures encode_text(const std::vector<int>& ids) const {
        return encoder(embed_text(ids, embed_table), Modality::text);
    }

    // frames: l_raw x feature_dim input data (not trainable). Positional
    // signal is added after downsampling, right before the shared encoder.
    ContextualFeatures encode_speech(const Tensor& frames) const {
        if (frames.ndim() != 2 || frames.dim(1) != cfg.feature_dim) {
            throw std::invalid_argument("speech input must be l x " +
                                        std::to_string(cfg.feature_dim) + ", got " +
                                        shape_str(frames.shape()));
        }
        Tensor h = downsampler(frame_encoder(frames));
        h = add(h, positional_encoding(h.dim(0), cfg.d_model));
        return encoder(h, Modality::speech);
    }

    SemanticMemory project(const ContextualFeatures& context,
                           std::vector<Tensor>* final_attn = nullptr) const {
        return projection(context, final_attn);
    }

    Tensor decode_train(const SemanticMemory& memory, const std::vector<int>& target) const {
        return decoder.decode_train(memory, target, embed_table);
    }

    // Teacher-forced logits for a text source / target pair.
    Tensor forward_mt(const std::vector<int>& source, const std::vector<int>& target) const {
        return decode_train(project(encode_text(source)), target);
    }

    // Teacher-forced logits for a speech source / target pair.
    Tensor forward_st(const Tensor& frames, const std::vector<int>& target) const {
        return decode_train(project(encode_speech(frames)), target);
    }

    // Next-token distribution closure and search bounds for generation.
    StepFn step_fn(const SemanticMemory& memory) const {
        return [this, memory](const std::vector<int>& prefix) {
            NoGradGuard ng;
            Tensor logits = decode_train(memory, prefix);
            Tensor logp = log_softmax(logits, 1);
            const int v = cfg.vocab_size;
            const int last = logits.dim(0) - 1;
            std::vector<double> out(static_cast<size_t>(v));
            for (int j = 0; j < v; ++j) out[static_cast<size_t>(j)] = logp.at(last, j);
            return out;
        };
    }

    SearchSpec search_spec(int max_len, double alpha = 0.0) const {
        SearchSpec spec;
        spec.vocab_size = cfg.vocab_size;
        spec.max_len = max_len;
        spec.length_norm_alpha = alpha;
        return spec;
    }
};

// Parameter-group freezing by name prefix ("projection", "decoder"). The tied
// embedding table belongs to both encoder and decoder and is never frozen via
// the decoder group.
struct FreezeSet {
    std::unordered_set<std::string> prefixes;

    bool frozen(const std::string& name) const {
        for (const auto& p : prefixes) {
            if (name.size() > p.size() && name.compare(0, p.size(), p) == 0 &&
                name[p.size()] == '.') {
                return true;
            }
        }
        return false;
    }
};

}  // namespace ssmt
