#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bleu.hpp"
#include "corpus.hpp"
#include "model.hpp"
#include "objectives.hpp"
#include "trainer.hpp"

namespace ssmt {

// Shortest exact decimal form, deterministic across runs.
inline std::string fmt_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

// ---------------------------------------------------------------------------
// Cross-modal alignment measurements
// ---------------------------------------------------------------------------

struct AlignmentStats {
    double mean_diagonal_cos = 0.0;      // paired samples
    double mean_off_diagonal_cos = 0.0;  // mismatched samples
    double retrieval_accuracy = 0.0;     // text->speech nearest-neighbor hits

    double margin() const { return mean_diagonal_cos - mean_off_diagonal_cos; }
};

namespace detail {

// Flattens an m x d memory and removes the given per-entry mean. Centering
// matters: every sample's memory shares a large common component (the slot
// queries plus layer-norm structure), so raw cosines sit near 1 for matched
// and mismatched samples alike. The pairing signal lives in the deviations.
inline std::vector<double> centered_memory(const Tensor& memory, const std::vector<double>& mean) {
    std::vector<double> out = memory.data();
    for (size_t k = 0; k < out.size(); ++k) out[k] -= mean[k];
    return out;
}

inline std::vector<double> mean_memory(const std::vector<Tensor>& memories) {
    std::vector<double> mean(memories[0].numel(), 0.0);
    for (const auto& t : memories) {
        const auto& v = t.data();
        for (size_t k = 0; k < mean.size(); ++k) mean[k] += v[k];
    }
    for (double& x : mean) x /= static_cast<double>(memories.size());
    return mean;
}

inline double centered_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t k = 0; k < a.size(); ++k) {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
}

}  // namespace detail

// Pairwise text/speech memory similarities over a paired corpus: how much
// closer each sample's two memories are than mismatched combinations, and
// how often the matched speech memory is the nearest one. Similarity is the
// cosine between mean-centered flattened memories, each modality centered on
// its own mean over the evaluated samples.
inline AlignmentStats alignment_stats(const Model& model,
                                      const std::vector<STTriplet>& samples) {
    if (samples.size() < 2) throw std::invalid_argument("alignment needs >= 2 samples");
    NoGradGuard ng;
    std::vector<Tensor> text_mem, speech_mem;
    for (const auto& t : samples) {
        text_mem.push_back(model.project(model.encode_text(t.z.ids)).values);
        speech_mem.push_back(model.project(model.encode_speech(t.x.frames)).values);
    }
    const std::vector<double> text_mean = detail::mean_memory(text_mem);
    const std::vector<double> speech_mean = detail::mean_memory(speech_mem);
    std::vector<std::vector<double>> text, speech;
    for (const auto& t : text_mem) text.push_back(detail::centered_memory(t, text_mean));
    for (const auto& t : speech_mem) speech.push_back(detail::centered_memory(t, speech_mean));

    const size_t n = samples.size();
    AlignmentStats stats;
    double off_sum = 0.0;
    long hits = 0;
    for (size_t i = 0; i < n; ++i) {
        double best = -2.0;
        size_t best_j = 0;
        for (size_t j = 0; j < n; ++j) {
            const double s = detail::centered_cosine(text[i], speech[j]);
            if (i == j) {
                stats.mean_diagonal_cos += s;
            } else {
                off_sum += s;
            }
            if (s > best) {
                best = s;
                best_j = j;
            }
        }
        hits += best_j == i ? 1 : 0;
    }
    stats.mean_diagonal_cos /= static_cast<double>(n);
    stats.mean_off_diagonal_cos = off_sum / static_cast<double>(n * (n - 1));
    stats.retrieval_accuracy = static_cast<double>(hits) / static_cast<double>(n);
    return stats;
}

// ---------------------------------------------------------------------------
// Memory dumps with joint PCA
// ---------------------------------------------------------------------------

struct MemoryDump {
    std::vector<size_t> sample_ids;       // paired text/speech entries per id
    std::vector<Tensor> text_memories;    // m x d each
    std::vector<Tensor> speech_memories;  // m x d each
    std::vector<std::array<double, 2>> text_coords;    // one per sample*slot, row-major
    std::vector<std::array<double, 2>> speech_coords;  // one per sample*slot, row-major
    std::array<std::vector<double>, 2> components;     // top-2 principal axes
    std::array<double, 2> eigenvalues{};
    std::vector<double> mean;
};

namespace detail {

using SymMat = std::vector<std::vector<double>>;

// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
// eigenvalues with matching eigenvectors as columns.
inline std::pair<std::vector<double>, SymMat> jacobi_eigen(SymMat a) {
    const size_t n = a.size();
    SymMat v(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < n; ++p)
            for (size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-24) break;
        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                if (std::fabs(a[p][q]) < 1e-300) continue;
                const double tau = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (size_t k = 0; k < n; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> eigenvalues(n);
    for (size_t i = 0; i < n; ++i) eigenvalues[i] = a[i][i];
    return {eigenvalues, v};
}

}  // namespace detail

// Memories for up to 100 paired samples plus a joint 2-D PCA over every
// memory row of both modalities. Component signs are fixed by making the
// largest-magnitude loading positive.
inline MemoryDump export_memories(const Model& model, const std::vector<STTriplet>& samples,
                                  int n_samples = 100) {
    if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    if (samples.empty()) throw std::invalid_argument("export_memories needs paired samples");
    NoGradGuard ng;
    const size_t n = std::min({static_cast<size_t>(n_samples), size_t{100}, samples.size()});
    MemoryDump dump;
    for (size_t i = 0; i < n; ++i) {
        dump.sample_ids.push_back(i);
        dump.text_memories.push_back(model.project(model.encode_text(samples[i].z.ids)).values);
        dump.speech_memories.push_back(
            model.project(model.encode_speech(samples[i].x.frames)).values);
    }

    const int m = dump.text_memories[0].dim(0);
    const int d = dump.text_memories[0].dim(1);
    std::vector<const Tensor*> all;
    for (const auto& t : dump.text_memories) all.push_back(&t);
    for (const auto& t : dump.speech_memories) all.push_back(&t);
    const double count = static_cast<double>(all.size() * static_cast<size_t>(m));

    dump.mean.assign(static_cast<size_t>(d), 0.0);
    for (const Tensor* mem : all)
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) dump.mean[static_cast<size_t>(j)] += mem->at(i, j);
    for (double& v : dump.mean) v /= count;

    detail::SymMat cov(static_cast<size_t>(d), std::vector<double>(static_cast<size_t>(d), 0.0));
    for (const Tensor* mem : all) {
        for (int i = 0; i < m; ++i) {
            for (int a = 0; a < d; ++a) {
                const double xa = mem->at(i, a) - dump.mean[static_cast<size_t>(a)];
                for (int b = a; b < d; ++b) {
                    cov[static_cast<size_t>(a)][static_cast<size_t>(b)] +=
                        xa * (mem->at(i, b) - dump.mean[static_cast<size_t>(b)]);
                }
            }
        }
    }
    for (int a = 0; a < d; ++a)
        for (int b = a; b < d; ++b) {
            cov[static_cast<size_t>(a)][static_cast<size_t>(b)] /= count;
            cov[static_cast<size_t>(b)][static_cast<size_t>(a)] =
                cov[static_cast<size_t>(a)][static_cast<size_t>(b)];
        }

    auto [eigenvalues, vectors] = detail::jacobi_eigen(cov);
    std::array<size_t, 2> top{0, 0};
    for (int rank = 0; rank < 2; ++rank) {
        double best = -1e300;
        size_t best_i = 0;
        for (size_t i = 0; i < eigenvalues.size(); ++i) {
            if (rank == 1 && i == top[0]) continue;
            if (eigenvalues[i] > best) {
                best = eigenvalues[i];
                best_i = i;
            }
        }
        top[static_cast<size_t>(rank)] = best_i;
        dump.eigenvalues[static_cast<size_t>(rank)] = best;
        std::vector<double> comp(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) comp[static_cast<size_t>(j)] = vectors[static_cast<size_t>(j)][best_i];
        size_t strongest = 0;
        for (size_t j = 1; j < comp.size(); ++j) {
            if (std::fabs(comp[j]) > std::fabs(comp[strongest])) strongest = j;
        }
        if (comp[strongest] < 0.0) {
            for (double& v : comp) v = -v;
        }
        dump.components[static_cast<size_t>(rank)] = std::move(comp);
    }

    auto project_rows = [&](const std::vector<Tensor>& memories,
                            std::vector<std::array<double, 2>>& coords) {
        for (const Tensor& mem : memories) {
            for (int i = 0; i < m; ++i) {
                std::array<double, 2> c{0.0, 0.0};
                for (int k = 0; k < 2; ++k)
                    for (int j = 0; j < d; ++j) {
                        c[static_cast<size_t>(k)] +=
                            (mem.at(i, j) - dump.mean[static_cast<size_t>(j)]) *
                            dump.components[static_cast<size_t>(k)][static_cast<size_t>(j)];
                    }
                coords.push_back(c);
            }
        }
    };
    project_rows(dump.text_memories, dump.text_coords);
    project_rows(dump.speech_memories, dump.speech_coords);
    return dump;
}

inline std::string memory_dump_to_text(const MemoryDump& dump) {
    const int m = dump.text_memories[0].dim(0);
    const int d = dump.text_memories[0].dim(1);
    std::string out = "sample\tmodality\tslot\tpc1\tpc2";
    for (int j = 0; j < d; ++j) out += "\tv" + std::to_string(j);
    out += '\n';
    auto emit = [&](const char* modality, const std::vector<Tensor>& memories,
                    const std::vector<std::array<double, 2>>& coords) {
        for (size_t s = 0; s < memories.size(); ++s) {
            for (int i = 0; i < m; ++i) {
                const auto& c = coords[s * static_cast<size_t>(m) + static_cast<size_t>(i)];
                out += std::to_string(dump.sample_ids[s]);
                out += '\t';
                out += modality;
                out += '\t' + std::to_string(i);
                out += '\t' + fmt_double(c[0]) + '\t' + fmt_double(c[1]);
                for (int j = 0; j < d; ++j) out += '\t' + fmt_double(memories[s].at(i, j));
                out += '\n';
            }
        }
    };
    emit("text", dump.text_memories, dump.text_coords);
    emit("speech", dump.speech_memories, dump.speech_coords);
    return out;
}

// ---------------------------------------------------------------------------
// Final-layer projection attention
// ---------------------------------------------------------------------------

struct AttentionDump {
    Tensor text_attention;         // m x l_text, head-averaged final layer
    Tensor speech_attention;       // m x l_speech
    std::vector<Tensor> products;  // per slot: l_text x l_speech outer product
};

namespace detail {

inline Tensor head_average(const std::vector<Tensor>& heads) {
    if (heads.empty()) throw std::invalid_argument("no attention captured");
    Tensor acc = heads[0];
    for (size_t h = 1; h < heads.size(); ++h) acc = add(acc, heads[h]);
    return scale(acc, 1.0 / static_cast<double>(heads.size()));
}

}  // namespace detail

// Where each memory slot looks in each modality, and the per-slot products
// pairing text positions with speech positions.
inline AttentionDump export_attention(const Model& model, const STTriplet& sample) {
    NoGradGuard ng;
    AttentionDump dump;
    std::vector<Tensor> text_heads, speech_heads;
    model.project(model.encode_text(sample.z.ids), &text_heads);
    model.project(model.encode_speech(sample.x.frames), &speech_heads);
    dump.text_attention = detail::head_average(text_heads);
    dump.speech_attention = detail::head_average(speech_heads);
    const int m = dump.text_attention.dim(0);
    const int lt = dump.text_attention.dim(1);
    const int ls = dump.speech_attention.dim(1);
    for (int i = 0; i < m; ++i) {
        std::vector<double> prod(static_cast<size_t>(lt) * ls);
        for (int a = 0; a < lt; ++a)
            for (int b = 0; b < ls; ++b) {
                prod[static_cast<size_t>(a) * ls + b] =
                    dump.text_attention.at(i, a) * dump.speech_attention.at(i, b);
            }
        dump.products.push_back(Tensor::from_data({lt, ls}, std::move(prod)));
    }
    return dump;
}

inline std::string attention_dump_to_text(const AttentionDump& dump) {
    std::string out = "modality\tslot\tposition\tweight\n";
    auto emit = [&](const char* modality, const Tensor& attn) {
        for (int i = 0; i < attn.dim(0); ++i)
            for (int j = 0; j < attn.dim(1); ++j) {
                out += modality;
                out += '\t' + std::to_string(i) + '\t' + std::to_string(j) + '\t' +
                       fmt_double(attn.at(i, j)) + '\n';
            }
    };
    emit("text", dump.text_attention);
    emit("speech", dump.speech_attention);
    return out;
}

inline std::string attention_products_to_text(const AttentionDump& dump) {
    std::string out = "slot\ttext_pos\tspeech_pos\tproduct\n";
    for (size_t i = 0; i < dump.products.size(); ++i) {
        const Tensor& p = dump.products[i];
        for (int a = 0; a < p.dim(0); ++a)
            for (int b = 0; b < p.dim(1); ++b) {
                out += std::to_string(i) + '\t' + std::to_string(a) + '\t' + std::to_string(b) +
                       '\t' + fmt_double(p.at(a, b)) + '\n';
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

enum class AblationSuite { freezing, multitask, mt_scaling };

struct AblationConfig {
    CorpusConfig corpus;   // training split sizes; eval triplets drawn on top
    int eval_st = 16;      // extra triplets generated for evaluation
    ModelConfig model;
    TrainConfig pretrain;  // stage pretrain_mt
    TrainConfig finetune;  // stage finetune_multitask
    int eval_max_len = 32;
};

struct AblationResult {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::string to_text() const {
        auto join = [](const std::vector<std::string>& cells) {
            std::string line;
            for (size_t i = 0; i < cells.size(); ++i) {
                if (i) line += '\t';
                line += cells[i];
            }
            return line + '\n';
        };
        std::string out = join(columns);
        for (const auto& row : rows) out += join(row);
        return out;
    }
};

namespace detail {

struct AblationEval {
    double bleu_score = 0.0;
    double token_accuracy = 0.0;
};

inline AblationEval evaluate_cell(const Model& model, const std::vector<STTriplet>& eval_set,
                                  int max_len) {
    NoGradGuard ng;
    std::vector<std::vector<int>> hyps, refs;
    for (const auto& t : eval_set) {
        SemanticMemory mem = model.project(model.encode_speech(t.x.frames));
        std::vector<int> ids = greedy_decode(model.step_fn(mem), model.search_spec(max_len));
        std::vector<int> content(ids.begin() + 1, ids.end());
        if (!content.empty() && content.back() == kEosId) content.pop_back();
        hyps.push_back(std::move(content));
        refs.push_back(t.y.ids);
    }
    AblationEval out;
    out.bleu_score = bleu(hyps, refs).score;
    out.token_accuracy = st_token_accuracy(model, eval_set);
    return out;
}

}  // namespace detail

// Runs the requested grid on a fresh synthetic corpus, one fully seeded
// model per cell, and reports translation quality on a held-out split drawn
// from the same token prototypes.
inline AblationResult run_ablation(AblationSuite suite, const AblationConfig& cfg) {
    CorpusConfig corpus_cfg = cfg.corpus;
    corpus_cfg.n_st += cfg.eval_st;
    SyntheticCorpus corpus = generate_synthetic_corpus(corpus_cfg);
    std::vector<STTriplet> train_st(corpus.st.begin(),
                                    corpus.st.end() - static_cast<long>(cfg.eval_st));
    std::vector<STTriplet> eval_st(corpus.st.end() - static_cast<long>(cfg.eval_st),
                                   corpus.st.end());
    if (train_st.empty() || eval_st.empty()) {
        throw std::invalid_argument("ablation needs nonempty train and eval splits");
    }

    auto run_cell = [&](const TrainConfig& finetune_cfg,
                        const std::vector<MTPair>& pretrain_pairs,
                        const std::vector<MTPair>& external_pairs) {
        Model model(cfg.model);
        if (!pretrain_pairs.empty() && cfg.pretrain.max_updates > 0) {
            pretrain_mt(model, pretrain_pairs, {}, cfg.pretrain);
        }
        finetune_multitask(model, train_st, external_pairs, {}, finetune_cfg);
        return detail::evaluate_cell(model, eval_st, cfg.eval_max_len);
    };

    AblationResult result;
    if (suite == AblationSuite::freezing) {
        result.columns = {"frozen", "bleu", "token_acc"};
        const std::array<std::pair<const char*, std::pair<bool, bool>>, 4> grid{
            {{"none", {false, false}},
             {"projection", {true, false}},
             {"decoder", {false, true}},
             {"both", {true, true}}}};
        for (const auto& [name, flags] : grid) {
            TrainConfig ft = cfg.finetune;
            ft.freeze_projection = flags.first;
            ft.freeze_decoder = flags.second;
            const auto eval = run_cell(ft, corpus.mt, corpus.mt);
            result.rows.push_back(
                {name, fmt_double(eval.bleu_score), fmt_double(eval.token_accuracy)});
        }
    } else if (suite == AblationSuite::multitask) {
        result.columns = {"mt", "ctr", "bleu", "token_acc"};
        const std::array<std::pair<double, double>, 4> grid{
            {{1.0, 1.0}, {1.0, 0.0}, {0.0, 1.0}, {0.0, 0.0}}};
        for (const auto& [mt_w, ctr_w] : grid) {
            TrainConfig ft = cfg.finetune;
            ft.weights.mt = mt_w;
            ft.weights.ctr = ctr_w;
            const auto eval = run_cell(ft, corpus.mt, corpus.mt);
            result.rows.push_back({fmt_double(mt_w), fmt_double(ctr_w),
                                   fmt_double(eval.bleu_score),
                                   fmt_double(eval.token_accuracy)});
        }
    } else {
        result.columns = {"mt_fraction", "bleu", "token_acc"};
        for (const double fraction : {0.0, 0.25, 0.5, 1.0}) {
            const size_t keep =
                static_cast<size_t>(fraction * static_cast<double>(corpus.mt.size()));
            std::vector<MTPair> subset(corpus.mt.begin(),
                                       corpus.mt.begin() + static_cast<long>(keep));
            const auto eval = run_cell(cfg.finetune, subset, subset);
            result.rows.push_back(
                {fmt_double(fraction), fmt_double(eval.bleu_score),
                 fmt_double(eval.token_accuracy)});
        }
    }
    return result;
}

}  // namespace ssmt
