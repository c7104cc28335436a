#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "attention.hpp"
#include "encoder.hpp"
#include "projection.hpp"
#include "tensor.hpp"

namespace ssmt {

struct Hypothesis {
    std::vector<int> ids;  // begins with BOS; ends with EOS unless cut at max_len
    double score = 0.0;    // sum of per-token log-probs
    bool finished = false;
};

// Autoregressive transformer decoder over the fixed-size memory. The output
// projection reuses the embedding table (weight tying), so the table is
// passed in rather than owned.
struct Decoder {
    std::vector<DecoderBlock> blocks;
    int max_positions = 1024;

    Decoder() = default;
    Decoder(ParamRegistry& reg, const std::string& prefix, int n_layers, int d, int heads,
            int ffn_dim, double ln_eps, int max_positions_, Rng& rng)
        : max_positions(max_positions_) {
        blocks.reserve(static_cast<size_t>(n_layers));
        for (int i = 0; i < n_layers; ++i) {
            blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), d, heads, ffn_dim,
                                ln_eps, rng);
        }
    }

    // Teacher-forced logits: one V-wide row per input position, predicting the
    // following token. target must begin with BOS.
    Tensor decode_train(const SemanticMemory& memory, const std::vector<int>& target,
                        const Tensor& embed_table) const {
        if (target.empty()) throw std::invalid_argument("decode_train: empty target");
        if (static_cast<int>(target.size()) > max_positions) {
            throw std::invalid_argument("target length " + std::to_string(target.size()) +
                                        " exceeds max positions " +
                                        std::to_string(max_positions));
        }
        Tensor h = embed_text(target, embed_table);
        const Tensor mask = causal_mask(static_cast<int>(target.size()));
        for (const auto& block : blocks) h = block(h, memory.values, mask);
        return matmul(h, transpose(embed_table));
    }
};

// Next-token log-probabilities given a prefix: the step interface generation
// runs on, so search code is testable against hand-built distributions.
using StepFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

struct SearchSpec {
    int vocab_size = 0;
    int bos_id = 1;
    int eos_id = 2;
    int max_len = 64;              // generated tokens, excluding BOS
    double length_norm_alpha = 0;  // 0 = pure log-prob sum
};

namespace detail {

inline double normalized_score(const Hypothesis& h, double alpha) {
    if (alpha == 0.0) return h.score;
    const double gen_len = static_cast<double>(h.ids.size() - 1);
    return h.score / std::pow(gen_len, alpha);
}

// Deterministic ordering: higher normalized score first, exact ties broken
// toward the lexicographically smaller id sequence.
inline bool better(const Hypothesis& a, const Hypothesis& b, double alpha) {
    const double sa = normalized_score(a, alpha), sb = normalized_score(b, alpha);
    if (sa != sb) return sa > sb;
    return a.ids < b.ids;
}

}  // namespace detail

inline Hypothesis beam_search(const StepFn& step, const SearchSpec& spec, int beam) {
    if (beam < 1) throw std::invalid_argument("beam size must be >= 1");
    if (spec.max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    if (spec.vocab_size < 1) throw std::invalid_argument("vocab_size must be >= 1");
    std::vector<Hypothesis> frontier{Hypothesis{{spec.bos_id}, 0.0, false}};
    for (int t = 0; t < spec.max_len; ++t) {
        bool any_live = false;
        std::vector<Hypothesis> candidates;
        for (const auto& hyp : frontier) {
            if (hyp.finished) {
                candidates.push_back(hyp);
                continue;
            }
            any_live = true;
            const std::vector<double> logp = step(hyp.ids);
            if (static_cast<int>(logp.size()) != spec.vocab_size) {
                throw std::invalid_argument("step function returned " +
                                            std::to_string(logp.size()) +
                                            " log-probs for vocab of " +
                                            std::to_string(spec.vocab_size));
            }
            for (int tok = 0; tok < spec.vocab_size; ++tok) {
                Hypothesis next;
                next.ids = hyp.ids;
                next.ids.push_back(tok);
                next.score = hyp.score + logp[static_cast<size_t>(tok)];
                next.finished = (tok == spec.eos_id);
                candidates.push_back(std::move(next));
            }
        }
        if (!any_live) break;
        const size_t keep = std::min(candidates.size(), static_cast<size_t>(beam));
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(keep),
                          candidates.end(), [&](const Hypothesis& a, const Hypothesis& b) {
                              return detail::better(a, b, spec.length_norm_alpha);
                          });
        candidates.resize(keep);
        frontier = std::move(candidates);
    }
    for (auto& hyp : frontier) hyp.finished = true;  // length-capped survivors compete as-is
    Hypothesis best = frontier.front();
    for (size_t i = 1; i < frontier.size(); ++i) {
        if (detail::better(frontier[i], best, spec.length_norm_alpha)) best = frontier[i];
    }
    return best;
}

// Argmax decoding; ties resolved toward the lowest token id.
inline std::vector<int> greedy_decode(const StepFn& step, const SearchSpec& spec) {
    std::vector<int> ids{spec.bos_id};
    for (int t = 0; t < spec.max_len; ++t) {
        const std::vector<double> logp = step(ids);
        int best = 0;
        for (int tok = 1; tok < spec.vocab_size; ++tok) {
            if (logp[static_cast<size_t>(tok)] > logp[static_cast<size_t>(best)]) best = tok;
        }
        ids.push_back(best);
        if (best == spec.eos_id) break;
    }
    return ids;
}

}  // namespace ssmt
