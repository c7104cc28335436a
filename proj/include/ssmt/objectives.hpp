#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace ssmt {

struct LossWeights {
    double st = 1.0;
    double mt = 1.0;
    double ctr = 1.0;

    void validate() const {
        for (double v : {st, mt, ctr}) {
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw std::invalid_argument("loss weights must be finite and nonnegative");
            }
        }
    }
};

struct LossReport {
    double total = 0.0;
    double st = 0.0;
    double mt = 0.0;
    double ctr = 0.0;
    long st_tokens = 0;
    long mt_tokens = 0;
    long pairs = 0;
};

// Fills in the weighted total from the component values, fixed accumulation
// order (st, mt, ctr). Non-finite components propagate into the total; the
// training loop decides what to do about divergence.
inline LossReport total_loss(LossReport components, const LossWeights& weights) {
    weights.validate();
    components.total =
        weights.st * components.st + weights.mt * components.mt + weights.ctr * components.ctr;
    return components;
}

// Decoder input/gold alignment: the decoder reads BOS followed by the target
// tokens and is scored on the target tokens followed by EOS.
inline std::vector<int> decoder_input(const std::vector<int>& target) {
    std::vector<int> in;
    in.reserve(target.size() + 1);
    in.push_back(kBosId);
    in.insert(in.end(), target.begin(), target.end());
    return in;
}

inline std::vector<int> decoder_gold(const std::vector<int>& target) {
    std::vector<int> gold = target;
    gold.push_back(kEosId);
    return gold;
}

namespace detail {

// Sum over non-pad positions of the label-smoothed cross-entropy, plus the
// number of positions counted. The smoothed target distribution mixes
// (1-eps) on the gold id with eps spread uniformly over the vocabulary.
inline std::pair<Tensor, long> smoothed_nll_sum(const Tensor& logits,
                                                const std::vector<int>& gold, int pad_id,
                                                double eps) {
    if (logits.ndim() != 2 || static_cast<size_t>(logits.dim(0)) != gold.size()) {
        throw std::invalid_argument("nll: logits rows " + shape_str(logits.shape()) +
                                    " must match gold length " + std::to_string(gold.size()));
    }
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("label smoothing must be in [0,1)");
    const int t = logits.dim(0), v = logits.dim(1);
    std::vector<double> weights(static_cast<size_t>(t) * v, 0.0);
    long count = 0;
    for (int i = 0; i < t; ++i) {
        const int g = gold[static_cast<size_t>(i)];
        if (g == pad_id) continue;
        if (g < 0 || g >= v) {
            throw std::invalid_argument("gold id " + std::to_string(g) +
                                        " outside vocabulary of size " + std::to_string(v));
        }
        ++count;
        for (int j = 0; j < v; ++j) weights[static_cast<size_t>(i) * v + j] = eps / v;
        weights[static_cast<size_t>(i) * v + g] += 1.0 - eps;
    }
    Tensor target_dist = Tensor::from_data({t, v}, std::move(weights));
    Tensor sum_ce = neg(sum(mul(log_softmax(logits, 1), target_dist)));
    return {sum_ce, count};
}

}  // namespace detail

// Mean label-smoothed negative log-likelihood over non-pad positions.
inline Tensor nll_loss(const Tensor& logits, const std::vector<int>& gold, int pad_id = kPadId,
                       double label_smoothing = 0.1) {
    auto [sum_ce, count] = detail::smoothed_nll_sum(logits, gold, pad_id, label_smoothing);
    if (count == 0) {
        throw std::invalid_argument("nll over a target with no non-pad tokens is undefined");
    }
    return scale(sum_ce, 1.0 / static_cast<double>(count));
}

// Symmetric softmax-over-cosine alignment loss between the two memories of
// one speech/transcript pair. Row i of the text memory should best match row
// i of the speech memory and vice versa; the other m-1 slots act as
// negatives.
inline Tensor contrastive_loss(const SemanticMemory& text, const SemanticMemory& speech,
                               double tau) {
    if (tau < 0.0) throw std::invalid_argument("contrastive temperature must be >= 0");
    if (text.values.shape() != speech.values.shape()) {
        throw std::invalid_argument("memory shape mismatch: " + shape_str(text.values.shape()) +
                                    " vs " + shape_str(speech.values.shape()));
    }
    Tensor cos = matmul(l2_normalize_rows(text.values), transpose(l2_normalize_rows(speech.values)));
    Tensor scores = scale(cos, tau);
    return neg(add(diag_sum(log_softmax(scores, 1)), diag_sum(log_softmax(scores, 0))));
}

// Token-weighted mean NLL across a batch through the speech path.
inline Tensor st_loss(const Model& model, const Batch& batch, double label_smoothing = 0.1) {
    if (!batch.is_st || batch.size() == 0) {
        throw std::invalid_argument("st_loss needs a nonempty speech batch");
    }
    Tensor acc;
    long tokens = 0;
    for (int i = 0; i < batch.size(); ++i) {
        const std::vector<int> target = batch.target(i);
        Tensor logits = model.forward_st(batch.frames[static_cast<size_t>(i)],
                                         decoder_input(target));
        auto [s, c] = detail::smoothed_nll_sum(logits, decoder_gold(target), kPadId,
                                               label_smoothing);
        acc = acc.defined() ? add(acc, s) : s;
        tokens += c;
    }
    return scale(acc, 1.0 / static_cast<double>(tokens));
}

// Token-weighted mean NLL across a batch through the text path. Transcript
// pairs and external pairs flow through this same function.
inline Tensor mt_loss(const Model& model, const Batch& batch, double label_smoothing = 0.1) {
    if (batch.size() == 0) throw std::invalid_argument("mt_loss needs a nonempty batch");
    Tensor acc;
    long tokens = 0;
    for (int i = 0; i < batch.size(); ++i) {
        const std::vector<int> target = batch.target(i);
        Tensor logits = model.forward_mt(batch.source(i), decoder_input(target));
        auto [s, c] = detail::smoothed_nll_sum(logits, decoder_gold(target), kPadId,
                                               label_smoothing);
        acc = acc.defined() ? add(acc, s) : s;
        tokens += c;
    }
    return scale(acc, 1.0 / static_cast<double>(tokens));
}

// All enabled loss components for one update, with the speech encoding shared
// between the translation and contrastive terms. Components with zero weight
// are never computed, so disabling a task cannot perturb the others.
struct MultitaskLosses {
    Tensor st;
    Tensor mt;
    Tensor ctr;
    long st_tokens = 0;
    long mt_tokens = 0;
    long pairs = 0;
};

inline MultitaskLosses multitask_losses(const Model& model, const Batch& st_batch,
                                        const Batch* mt_batch, const LossWeights& weights,
                                        double tau, double label_smoothing = 0.1) {
    weights.validate();
    if (!st_batch.is_st || st_batch.size() == 0) {
        throw std::invalid_argument("multitask step needs a nonempty speech batch");
    }
    MultitaskLosses out;
    Tensor st_sum, ctr_sum;
    for (int i = 0; i < st_batch.size(); ++i) {
        const std::vector<int> target = st_batch.target(i);
        SemanticMemory speech_mem =
            model.project(model.encode_speech(st_batch.frames[static_cast<size_t>(i)]));
        if (weights.st > 0.0) {
            Tensor logits = model.decode_train(speech_mem, decoder_input(target));
            auto [s, c] = detail::smoothed_nll_sum(logits, decoder_gold(target), kPadId,
                                                   label_smoothing);
            st_sum = st_sum.defined() ? add(st_sum, s) : s;
            out.st_tokens += c;
        }
        if (weights.ctr > 0.0) {
            SemanticMemory text_mem = model.project(model.encode_text(st_batch.source(i)));
            Tensor term = contrastive_loss(text_mem, speech_mem, tau);
            ctr_sum = ctr_sum.defined() ? add(ctr_sum, term) : term;
            ++out.pairs;
        }
    }
    if (st_sum.defined()) out.st = scale(st_sum, 1.0 / static_cast<double>(out.st_tokens));
    if (ctr_sum.defined()) out.ctr = scale(ctr_sum, 1.0 / static_cast<double>(out.pairs));
    if (weights.mt > 0.0 && mt_batch) {
        out.mt = mt_loss(model, *mt_batch, label_smoothing);
        for (int i = 0; i < mt_batch->size(); ++i) {
            out.mt_tokens += mt_batch->target_lengths[static_cast<size_t>(i)] + 1;
        }
    }
    return out;
}

// Weighted combination for backward, plus the matching scalar report. The
// tensor total and the report total follow the same accumulation order.
inline std::pair<Tensor, LossReport> combine_losses(const MultitaskLosses& parts,
                                                    const LossWeights& weights) {
    weights.validate();
    Tensor total;
    auto accumulate = [&total](const Tensor& component, double lambda) {
        if (!component.defined() || lambda == 0.0) return;
        Tensor term = scale(component, lambda);
        total = total.defined() ? add(total, term) : term;
    };
    accumulate(parts.st, weights.st);
    accumulate(parts.mt, weights.mt);
    accumulate(parts.ctr, weights.ctr);
    if (!total.defined()) throw std::invalid_argument("no loss component is enabled");

    LossReport report;
    report.st = parts.st.defined() ? parts.st.value() : 0.0;
    report.mt = parts.mt.defined() ? parts.mt.value() : 0.0;
    report.ctr = parts.ctr.defined() ? parts.ctr.value() : 0.0;
    report.st_tokens = parts.st_tokens;
    report.mt_tokens = parts.mt_tokens;
    report.pairs = parts.pairs;
    report = total_loss(report, weights);
    return {total, report};
}

}  // namespace ssmt
