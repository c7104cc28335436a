#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rng.hpp"
#include "serialize.hpp"
#include "tensor.hpp"

namespace ssmt {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kReservedTokens = 4;

struct TokenSequence {
    std::vector<int> ids;

    int length() const { return static_cast<int>(ids.size()); }
    bool operator==(const TokenSequence& o) const { return ids == o.ids; }
};

// Continuous frame matrix standing in for raw audio, values in [-1, 1).
struct FrameSequence {
    Tensor frames;  // l_raw x f_raw

    int length() const { return frames.dim(0); }
    bool operator==(const FrameSequence& o) const {
        return frames.shape() == o.frames.shape() && frames.data() == o.frames.data();
    }
};

struct STTriplet {
    FrameSequence x;   // speech
    TokenSequence z;   // transcript (source language)
    TokenSequence y;   // translation (target language)
};

struct MTPair {
    TokenSequence u;  // source
    TokenSequence v;  // target
};

// Whitespace tokenizer over a fixed table. Ids 0..3 are reserved for
// pad/bos/eos/unk; the table is shared across source/target and ST/MT.
class Vocabulary {
  public:
    Vocabulary() {
        for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add_token(t);
    }

    static Vocabulary synthetic(int size) {
        if (size < kReservedTokens + 1) {
            throw std::invalid_argument("vocabulary size must exceed the reserved ids");
        }
        Vocabulary v;
        for (int i = kReservedTokens; i < size; ++i) v.add_token("w" + std::to_string(i));
        return v;
    }

    int add_token(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        const int id = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(token);
        token_to_id_.emplace(token, id);
        return id;
    }

    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) {
            throw std::invalid_argument("token id " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(size()));
        }
        return id_to_token_[static_cast<size_t>(id)];
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    TokenSequence encode(const std::string& text) const {
        TokenSequence seq;
        std::istringstream is(text);
        std::string tok;
        while (is >> tok) seq.ids.push_back(id(tok));
        return seq;
    }

    // Reserved ids are dropped so decode(encode(text)) == text for
    // in-vocabulary space-separated input.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < kReservedTokens) continue;
            if (!out.empty()) out += ' ';
            out += token(id);
        }
        return out;
    }

    const std::vector<std::string>& tokens() const { return id_to_token_; }

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// ---------------------------------------------------------------------------
// Synthetic bi-modal corpus
// ---------------------------------------------------------------------------

struct CorpusConfig {
    int n_st = 64;
    int n_mt = 256;
    int vocab_size = 32;
    int min_len = 3;
    int max_len = 8;
    int min_frames_per_token = 2;
    int max_frames_per_token = 4;
    int feature_dim = 8;
    double noise_sigma = 0.05;
    uint64_t seed = 1;

    void validate() const {
        if (vocab_size < 8) throw std::invalid_argument("vocab_size must be >= 8");
        if (n_st < 0 || n_mt < 0) throw std::invalid_argument("sample counts must be >= 0");
        if (min_len < 1 || max_len < min_len) throw std::invalid_argument("bad length range");
        if (min_frames_per_token < 1 || max_frames_per_token < min_frames_per_token) {
            throw std::invalid_argument("bad frames-per-token range");
        }
        if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
        if (noise_sigma < 0) throw std::invalid_argument("noise_sigma must be >= 0");
    }

    int content_tokens() const { return vocab_size - kReservedTokens; }
};

struct SyntheticCorpus {
    std::vector<STTriplet> st;
    std::vector<MTPair> mt;
    Vocabulary vocab;
};

// Deterministic target mapping: a half-rotation of the content-token range,
// order preserving, trivially invertible for test oracles.
inline int shift_token(int id, int vocab_size) {
    const int c = vocab_size - kReservedTokens;
    return kReservedTokens + (id - kReservedTokens + c / 2) % c;
}

inline int unshift_token(int id, int vocab_size) {
    const int c = vocab_size - kReservedTokens;
    return kReservedTokens + (id - kReservedTokens + c - c / 2) % c;
}

namespace detail {

// One prototype row per content token, drawn once from the corpus seed.
inline std::vector<std::vector<double>> token_prototypes(const CorpusConfig& cfg) {
    Rng rng = Rng::fork(cfg.seed, 0);
    std::vector<std::vector<double>> protos(static_cast<size_t>(cfg.vocab_size));
    for (int id = kReservedTokens; id < cfg.vocab_size; ++id) {
        auto& p = protos[static_cast<size_t>(id)];
        p.resize(static_cast<size_t>(cfg.feature_dim));
        for (auto& v : p) v = static_cast<double>(static_cast<float>(rng.uniform(-0.8, 0.8)));
    }
    return protos;
}

inline double clamp_frame_value(double v) {
    const double hi = 32767.0 / 32768.0;  // largest value below 1 on the int16 grid
    return std::min(hi, std::max(-1.0, v));
}

inline TokenSequence random_sentence(const CorpusConfig& cfg, Rng& rng) {
    const int len = cfg.min_len + static_cast<int>(rng.below(
                                      static_cast<uint64_t>(cfg.max_len - cfg.min_len + 1)));
    TokenSequence z;
    z.ids.resize(static_cast<size_t>(len));
    for (auto& id : z.ids) {
        id = kReservedTokens + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.content_tokens())));
    }
    return z;
}

inline TokenSequence shifted(const TokenSequence& z, int vocab_size) {
    TokenSequence y;
    y.ids.reserve(z.ids.size());
    for (int id : z.ids) y.ids.push_back(shift_token(id, vocab_size));
    return y;
}

}  // namespace detail

// Tokens are drawn uniformly over the content range; the translation is the
// shifted copy of the transcript; frames repeat each token's prototype 2-4
// times with additive Gaussian noise, clamped to [-1, 1) and quantized to f32
// so sidecar round trips are exact.
inline SyntheticCorpus generate_synthetic_corpus(const CorpusConfig& cfg) {
    cfg.validate();
    SyntheticCorpus out;
    out.vocab = Vocabulary::synthetic(cfg.vocab_size);
    const auto protos = detail::token_prototypes(cfg);

    out.st.reserve(static_cast<size_t>(cfg.n_st));
    for (int i = 0; i < cfg.n_st; ++i) {
        Rng rng = Rng::fork(cfg.seed, 1 + static_cast<uint64_t>(i));
        STTriplet t;
        t.z = detail::random_sentence(cfg, rng);
        t.y = detail::shifted(t.z, cfg.vocab_size);
        std::vector<double> rows;
        for (int id : t.z.ids) {
            const int repeats =
                cfg.min_frames_per_token +
                static_cast<int>(rng.below(static_cast<uint64_t>(
                    cfg.max_frames_per_token - cfg.min_frames_per_token + 1)));
            for (int r = 0; r < repeats; ++r) {
                for (double base : protos[static_cast<size_t>(id)]) {
                    double v = base;
                    if (cfg.noise_sigma > 0) v += rng.normal(0.0, cfg.noise_sigma);
                    rows.push_back(static_cast<double>(
                        static_cast<float>(detail::clamp_frame_value(v))));
                }
            }
        }
        const int l = static_cast<int>(rows.size()) / cfg.feature_dim;
        t.x.frames = Tensor::from_data({l, cfg.feature_dim}, std::move(rows));
        out.st.push_back(std::move(t));
    }

    out.mt.reserve(static_cast<size_t>(cfg.n_mt));
    for (int j = 0; j < cfg.n_mt; ++j) {
        Rng rng = Rng::fork(cfg.seed, (1ull << 32) + static_cast<uint64_t>(j));
        MTPair p;
        p.u = detail::random_sentence(cfg, rng);
        p.v = detail::shifted(p.u, cfg.vocab_size);
        out.mt.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Preprocessing filters
// ---------------------------------------------------------------------------

// Keep a pair iff both sides are at most max_tokens long and the length ratio
// stays inside [lo, hi].
inline bool filter_pair(const TokenSequence& u, const TokenSequence& v, int max_tokens = 250,
                        double ratio_lo = 2.0 / 3.0, double ratio_hi = 3.0 / 2.0) {
    if (u.length() < 1 || v.length() < 1) return false;
    if (u.length() > max_tokens || v.length() > max_tokens) return false;
    const double ratio = static_cast<double>(u.length()) / static_cast<double>(v.length());
    return ratio >= ratio_lo && ratio <= ratio_hi;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// Samples packed under a size cap. Ids are padded to the batch-wide maximum
// with explicit validity masks; true lengths ride along. Frames stay one
// array per sample (ragged lengths).
struct Batch {
    std::vector<size_t> sample_indices;
    std::vector<std::vector<int>> source_ids;
    std::vector<std::vector<int>> target_ids;
    std::vector<std::vector<char>> source_mask;
    std::vector<std::vector<char>> target_mask;
    std::vector<int> source_lengths;
    std::vector<int> target_lengths;
    std::vector<Tensor> frames;  // ST batches only
    bool is_st = false;

    int size() const { return static_cast<int>(sample_indices.size()); }

    std::vector<int> source(int i) const {
        return {source_ids[static_cast<size_t>(i)].begin(),
                source_ids[static_cast<size_t>(i)].begin() + source_lengths[static_cast<size_t>(i)]};
    }
    std::vector<int> target(int i) const {
        return {target_ids[static_cast<size_t>(i)].begin(),
                target_ids[static_cast<size_t>(i)].begin() + target_lengths[static_cast<size_t>(i)]};
    }
};

namespace detail {

inline void pad_into(Batch& b) {
    size_t max_src = 0, max_tgt = 0;
    for (const auto& s : b.source_ids) max_src = std::max(max_src, s.size());
    for (const auto& t : b.target_ids) max_tgt = std::max(max_tgt, t.size());
    for (size_t i = 0; i < b.source_ids.size(); ++i) {
        b.source_lengths.push_back(static_cast<int>(b.source_ids[i].size()));
        b.target_lengths.push_back(static_cast<int>(b.target_ids[i].size()));
        b.source_mask.emplace_back(b.source_ids[i].size(), 1);
        b.target_mask.emplace_back(b.target_ids[i].size(), 1);
        b.source_ids[i].resize(max_src, kPadId);
        b.target_ids[i].resize(max_tgt, kPadId);
        b.source_mask[i].resize(max_src, 0);
        b.target_mask[i].resize(max_tgt, 0);
    }
}

// Length-bucketed greedy packing: sort by cost, fill batches up to the cap,
// then shuffle the batch order with the given seed.
template <typename CostFn>
inline std::vector<std::vector<size_t>> pack_indices(size_t n, const CostFn& cost, long cap,
                                                     uint64_t shuffle_seed) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return cost(a) < cost(b); });
    std::vector<std::vector<size_t>> groups;
    long used = 0;
    for (size_t idx : order) {
        const long c = cost(idx);
        if (c > cap) {
            throw std::invalid_argument("single sample of size " + std::to_string(c) +
                                        " exceeds batch cap " + std::to_string(cap));
        }
        if (groups.empty() || used + c > cap) {
            groups.emplace_back();
            used = 0;
        }
        groups.back().push_back(idx);
        used += c;
    }
    Rng rng = Rng::fork(shuffle_seed, 0x6261746368ull);  // "batch"
    for (size_t i = groups.size(); i > 1; --i) {
        std::swap(groups[i - 1], groups[rng.below(i)]);
    }
    return groups;
}

}  // namespace detail

// cap: maximum total true source tokens per batch.
inline std::vector<Batch> make_batches(const std::vector<MTPair>& corpus, long token_cap,
                                       uint64_t shuffle_seed) {
    if (corpus.empty()) throw std::invalid_argument("cannot batch an empty corpus");
    auto groups = detail::pack_indices(
        corpus.size(), [&](size_t i) { return static_cast<long>(corpus[i].u.ids.size()); },
        token_cap, shuffle_seed);
    std::vector<Batch> batches;
    batches.reserve(groups.size());
    for (const auto& g : groups) {
        Batch b;
        b.is_st = false;
        for (size_t idx : g) {
            b.sample_indices.push_back(idx);
            b.source_ids.push_back(corpus[idx].u.ids);
            b.target_ids.push_back(corpus[idx].v.ids);
        }
        detail::pad_into(b);
        batches.push_back(std::move(b));
    }
    return batches;
}

// cap: maximum total raw frames per batch.
inline std::vector<Batch> make_batches(const std::vector<STTriplet>& corpus, long frame_cap,
                                       uint64_t shuffle_seed) {
    if (corpus.empty()) throw std::invalid_argument("cannot batch an empty corpus");
    auto groups = detail::pack_indices(
        corpus.size(), [&](size_t i) { return static_cast<long>(corpus[i].x.length()); },
        frame_cap, shuffle_seed);
    std::vector<Batch> batches;
    batches.reserve(groups.size());
    for (const auto& g : groups) {
        Batch b;
        b.is_st = true;
        for (size_t idx : g) {
            b.sample_indices.push_back(idx);
            b.source_ids.push_back(corpus[idx].z.ids);
            b.target_ids.push_back(corpus[idx].y.ids);
            b.frames.push_back(corpus[idx].x.frames);
        }
        detail::pad_into(b);
        batches.push_back(std::move(b));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------
//
// MT file: one pair per line, "source<TAB>target", tokens space-separated.
// ST file: one triplet per line, "frame_index<TAB>transcript<TAB>translation";
// frames live in a binary sidecar ("CHFR") indexed by that number.
// Vocabulary file: one token per line, line number = id.

inline void write_vocab(const std::string& path, const Vocabulary& vocab) {
    auto os = io::open_output(path, false);
    for (const auto& t : vocab.tokens()) os << t << "\n";
}

inline Vocabulary read_vocab(const std::string& path) {
    auto is = io::open_input(path, false);
    Vocabulary vocab;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) throw std::runtime_error(path + ": empty token at line " +
                                                   std::to_string(line_no));
        if (line_no <= kReservedTokens) {
            if (line != vocab.token(line_no - 1)) {
                throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                         " must be the reserved token " +
                                         vocab.token(line_no - 1));
            }
            continue;
        }
        vocab.add_token(line);
    }
    return vocab;
}

inline void write_mt_corpus(const std::string& path, const std::vector<MTPair>& pairs,
                            const Vocabulary& vocab) {
    auto os = io::open_output(path, false);
    for (const auto& p : pairs) os << vocab.decode(p.u.ids) << "\t" << vocab.decode(p.v.ids) << "\n";
}

inline std::vector<MTPair> read_mt_corpus(const std::string& path, const Vocabulary& vocab) {
    auto is = io::open_input(path, false);
    std::vector<MTPair> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                     ": expected exactly one tab separator");
        }
        MTPair p;
        p.u = vocab.encode(line.substr(0, tab));
        p.v = vocab.encode(line.substr(tab + 1));
        if (p.u.ids.empty() || p.v.ids.empty()) {
            throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                     ": empty side");
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline void write_frame_sidecar(const std::string& path, const std::vector<STTriplet>& triplets) {
    auto os = io::open_output(path);
    io::write_magic(os, "CHFR");
    io::write_u32(os, 1);  // version
    io::write_u32(os, static_cast<uint32_t>(triplets.size()));
    for (const auto& t : triplets) {
        io::write_u32(os, static_cast<uint32_t>(t.x.frames.dim(0)));
        io::write_u32(os, static_cast<uint32_t>(t.x.frames.dim(1)));
        for (double v : t.x.frames.data()) io::write_f32(os, static_cast<float>(v));
    }
}

inline std::vector<Tensor> read_frame_sidecar(const std::string& path) {
    auto is = io::open_input(path);
    io::expect_magic(is, "CHFR", path);
    const uint32_t version = io::read_u32(is, "sidecar version");
    if (version != 1) {
        throw std::runtime_error(path + ": unsupported sidecar version " +
                                 std::to_string(version));
    }
    const uint32_t count = io::read_u32(is, "sidecar record count");
    std::vector<Tensor> records;
    records.reserve(count);
    for (uint32_t r = 0; r < count; ++r) {
        const uint32_t l = io::read_u32(is, "frame count");
        const uint32_t f = io::read_u32(is, "feature dim");
        std::vector<double> vals(static_cast<size_t>(l) * f);
        for (auto& v : vals) v = static_cast<double>(io::read_f32(is, "frame data"));
        records.push_back(
            Tensor::from_data({static_cast<int>(l), static_cast<int>(f)}, std::move(vals)));
    }
    return records;
}

inline void write_st_corpus(const std::string& text_path, const std::string& sidecar_path,
                            const std::vector<STTriplet>& triplets, const Vocabulary& vocab) {
    write_frame_sidecar(sidecar_path, triplets);
    auto os = io::open_output(text_path, false);
    for (size_t i = 0; i < triplets.size(); ++i) {
        os << i << "\t" << vocab.decode(triplets[i].z.ids) << "\t"
           << vocab.decode(triplets[i].y.ids) << "\n";
    }
}

inline std::vector<STTriplet> read_st_corpus(const std::string& text_path,
                                             const std::string& sidecar_path,
                                             const Vocabulary& vocab) {
    const std::vector<Tensor> frames = read_frame_sidecar(sidecar_path);
    auto is = io::open_input(text_path, false);
    std::vector<STTriplet> triplets;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos ||
            line.find('\t', t2 + 1) != std::string::npos) {
            throw std::runtime_error(text_path + ": line " + std::to_string(line_no) +
                                     ": expected exactly two tab separators");
        }
        size_t frame_index = 0;
        try {
            frame_index = std::stoul(line.substr(0, t1));
        } catch (const std::exception&) {
            throw std::runtime_error(text_path + ": line " + std::to_string(line_no) +
                                     ": bad frame index");
        }
        if (frame_index >= frames.size()) {
            throw std::runtime_error(text_path + ": line " + std::to_string(line_no) +
                                     ": frame index " + std::to_string(frame_index) +
                                     " outside sidecar with " + std::to_string(frames.size()) +
                                     " records");
        }
        STTriplet t;
        t.x.frames = frames[frame_index];
        t.z = vocab.encode(line.substr(t1 + 1, t2 - t1 - 1));
        t.y = vocab.encode(line.substr(t2 + 1));
        if (t.z.ids.empty() || t.y.ids.empty()) {
            throw std::runtime_error(text_path + ": line " + std::to_string(line_no) +
                                     ": empty text field");
        }
        triplets.push_back(std::move(t));
    }
    return triplets;
}

}  // namespace ssmt
