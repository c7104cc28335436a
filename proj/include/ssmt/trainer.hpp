#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "model.hpp"
#include "objectives.hpp"
#include "serialize.hpp"
#include "tensor.hpp"

namespace ssmt {

// Inverse-square-root schedule with linear warmup. Both branches meet exactly
// at step == warmup.
inline double lr_schedule(long step, double peak, long warmup) {
    if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
    if (peak <= 0.0 || warmup < 1) {
        throw std::invalid_argument("lr_schedule: peak must be > 0 and warmup >= 1");
    }
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return peak * std::min(s / w, std::sqrt(w / s));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    long step = 0;
    std::unordered_map<std::string, std::vector<double>> m;
    std::unordered_map<std::string, std::vector<double>> v;
};

// Global-norm gradient clipping over the trainable (non-frozen) parameters.
// Returns the pre-clip norm; max_norm <= 0 disables clipping but still
// reports the norm.
inline double clip_gradients(const ParamRegistry& params, const FreezeSet& freeze,
                             double max_norm) {
    double sq = 0.0;
    for (const auto& name : params.names()) {
        if (freeze.frozen(name)) continue;
        const Tensor& p = params.get(name);
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& name : params.names()) {
            if (freeze.frozen(name)) continue;
            Tensor p = params.get(name);  // shared handle
            if (!p.has_grad()) continue;
            for (double& g : p.grad()) g *= scale;
        }
    }
    return norm;
}

// One bias-corrected Adam update over every parameter that received a
// gradient. Frozen parameters are skipped entirely: values, moments, and
// the parameter bytes stay untouched.
inline void adam_step(const ParamRegistry& params, AdamState& state, double lr,
                      const FreezeSet& freeze = {}) {
    if (lr < 0.0 || !std::isfinite(lr)) throw std::invalid_argument("adam_step: bad lr");
    ++state.step;
    const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (const auto& name : params.names()) {
        if (freeze.frozen(name)) continue;
        Tensor p = params.get(name);  // shared handle
        if (!p.has_grad()) continue;
        const std::vector<double>& g = p.grad();
        std::vector<double>& val = p.data();
        if (g.size() != val.size()) {
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
        }
        std::vector<double>& m = state.m[name];
        std::vector<double>& v = state.v[name];
        if (m.empty()) m.assign(val.size(), 0.0);
        if (v.empty()) v.assign(val.size(), 0.0);
        for (size_t i = 0; i < val.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            val[i] -= lr * m_hat / (std::sqrt(v_hat) + state.cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct ModelCheckpoint {
    ModelConfig config;
    long step = 0;
    double dev_loss = 0.0;
    std::vector<std::string> names;  // canonical parameter order
    std::unordered_map<std::string, std::vector<double>> values;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},
                          {"d_model", c.d_model},
                          {"n_heads", c.n_heads},
                          {"enc_layers", c.enc_layers},
                          {"dec_layers", c.dec_layers},
                          {"proj_layers", c.proj_layers},
                          {"ffn_dim", c.ffn_dim},
                          {"memory_slots", c.memory_slots},
                          {"feature_dim", c.feature_dim},
                          {"frame_hidden", c.frame_hidden},
                          {"d_feat", c.d_feat},
                          {"cnn_hidden", c.cnn_hidden},
                          {"max_positions", c.max_positions},
                          {"ln_eps", c.ln_eps},
                          {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.enc_layers = j.at("enc_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.proj_layers = j.at("proj_layers").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.memory_slots = j.at("memory_slots").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.frame_hidden = j.at("frame_hidden").get<int>();
    c.d_feat = j.at("d_feat").get<int>();
    c.cnn_hidden = j.at("cnn_hidden").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.ln_eps = j.at("ln_eps").get<double>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
}

inline ModelCheckpoint checkpoint_from(const Model& model, long step, double dev_loss) {
    ModelCheckpoint ckpt;
    ckpt.config = model.cfg;
    ckpt.step = step;
    ckpt.dev_loss = dev_loss;
    ckpt.names = model.params.names();
    for (const auto& name : ckpt.names) ckpt.values[name] = model.params.get(name).data();
    return ckpt;
}

// Copies parameter values into an existing model. The checkpoint must carry
// exactly the model's parameter set with matching sizes.
inline void apply_checkpoint(const ModelCheckpoint& ckpt, Model& model) {
    const auto& names = model.params.names();
    if (ckpt.values.size() != names.size()) {
        throw std::runtime_error("checkpoint carries " + std::to_string(ckpt.values.size()) +
                                 " parameters, model has " + std::to_string(names.size()));
    }
    for (const auto& name : names) {
        auto it = ckpt.values.find(name);
        if (it == ckpt.values.end()) {
            throw std::runtime_error("checkpoint is missing parameter " + name);
        }
        Tensor p = model.params.get(name);  // shared handle
        std::vector<double>& dst = p.data();
        if (it->second.size() != dst.size()) {
            throw std::runtime_error("checkpoint parameter " + name + " holds " +
                                     std::to_string(it->second.size()) + " values, model needs " +
                                     std::to_string(dst.size()));
        }
        dst = it->second;
    }
}

namespace detail {

inline constexpr char kCheckpointMagic[] = "CHCK";
inline constexpr uint32_t kCheckpointVersion = 1;

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) {
    auto os = io::open_output(path);
    io::write_magic(os, detail::kCheckpointMagic);
    io::write_u32(os, detail::kCheckpointVersion);
    nlohmann::json meta{{"model", model_config_to_json(ckpt.config)},
                        {"step", ckpt.step},
                        {"dev_loss", ckpt.dev_loss}};
    io::write_string(os, meta.dump());
    io::write_u32(os, static_cast<uint32_t>(ckpt.names.size()));
    for (const auto& name : ckpt.names) {
        const auto& vals = ckpt.values.at(name);
        io::write_string(os, name);
        io::write_u64(os, static_cast<uint64_t>(vals.size()));
        for (double v : vals) io::write_f64(os, v);
    }
    if (!os) throw std::runtime_error("failed writing checkpoint to " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
    auto is = io::open_input(path);
    io::expect_magic(is, detail::kCheckpointMagic, path);
    const uint32_t version = io::read_u32(is, path);
    if (version != detail::kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 " in " + path);
    }
    ModelCheckpoint ckpt;
    nlohmann::json meta = nlohmann::json::parse(io::read_string(is, path));
    ckpt.config = model_config_from_json(meta.at("model"));
    ckpt.step = meta.at("step").get<long>();
    ckpt.dev_loss = meta.at("dev_loss").get<double>();
    const uint32_t n = io::read_u32(is, path);
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = io::read_string(is, path);
        const uint64_t count = io::read_u64(is, path);
        std::vector<double> vals(count);
        for (auto& v : vals) v = io::read_f64(is, path);
        ckpt.names.push_back(name);
        ckpt.values.emplace(std::move(name), std::move(vals));
    }
    if (!is) throw std::runtime_error("truncated checkpoint file " + path);
    return ckpt;
}

// Elementwise arithmetic mean over a window of checkpoints; metadata comes
// from the center one.
inline ModelCheckpoint average_checkpoints(const std::vector<ModelCheckpoint>& window) {
    if (window.empty()) throw std::invalid_argument("cannot average zero checkpoints");
    ModelCheckpoint out = window[(window.size() - 1) / 2];
    for (const auto& ckpt : window) {
        if (ckpt.names != window[0].names) {
            throw std::invalid_argument("checkpoint parameter sets differ; cannot average");
        }
    }
    // Mean anchored at the first checkpoint, so identical inputs average to
    // themselves exactly.
    const double inv = 1.0 / static_cast<double>(window.size());
    for (const auto& name : out.names) {
        const std::vector<double>& anchor = window[0].values.at(name);
        std::vector<double>& acc = out.values.at(name);
        const size_t len = anchor.size();
        if (acc.size() != len) {
            throw std::invalid_argument("checkpoint parameter " + name + " sizes differ");
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const auto& ckpt : window) {
            const auto& vals = ckpt.values.at(name);
            if (vals.size() != len) {
                throw std::invalid_argument("checkpoint parameter " + name + " sizes differ");
            }
            for (size_t i = 0; i < len; ++i) acc[i] += vals[i] - anchor[i];
        }
        for (size_t i = 0; i < len; ++i) acc[i] = anchor[i] + acc[i] * inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

enum class Stage { pretrain_mt, finetune_multitask };

struct TrainConfig {
    Stage stage = Stage::pretrain_mt;
    double peak_lr = 5e-4;
    long warmup = 4000;
    long max_updates = 1000;
    LossWeights weights;
    bool freeze_projection = false;
    bool freeze_decoder = false;
    long token_cap = 256;   // MT batching, true source tokens
    long frame_cap = 1024;  // ST batching, raw frames
    uint64_t seed = 1;
    long checkpoint_every = 100;  // 0 = final snapshot only; also dev-loss cadence
    double tau = 1.0;
    double label_smoothing = 0.1;
    double clip_norm = 1.0;  // 0 disables clipping

    void validate() const {
        if (peak_lr <= 0.0) throw std::invalid_argument("peak_lr must be > 0");
        if (warmup < 1) throw std::invalid_argument("warmup must be >= 1");
        if (max_updates < 0) throw std::invalid_argument("max_updates must be >= 0");
        if (token_cap < 1 || frame_cap < 1) throw std::invalid_argument("batch caps must be >= 1");
        if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
        if (tau < 0.0) throw std::invalid_argument("tau must be >= 0");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
            throw std::invalid_argument("label smoothing must be in [0,1)");
        }
        if (clip_norm < 0.0) throw std::invalid_argument("clip_norm must be >= 0");
        weights.validate();
    }

    FreezeSet freeze_set() const {
        FreezeSet fs;
        if (freeze_projection) fs.prefixes.insert("projection");
        if (freeze_decoder) fs.prefixes.insert("decoder");
        return fs;
    }
};

struct TrainResult {
    std::vector<LossReport> reports;  // one per update, in order
    std::vector<ModelCheckpoint> checkpoints;
    double final_dev_loss = 0.0;
};

namespace detail {

// Endless deterministic batch schedule: reshuffles at every epoch boundary
// from a seed derived from (seed, stream, epoch), so distinct streams never
// couple.
template <typename Sample>
class BatchStream {
  public:
    BatchStream(const std::vector<Sample>& corpus, long cap, uint64_t seed, uint64_t stream)
        : corpus_(&corpus), cap_(cap), seed_(seed), stream_(stream) {}

    const Batch& next() {
        if (pos_ == batches_.size()) {
            batches_ = make_batches(*corpus_, cap_, mix64(seed_ ^ mix64(stream_)) + epoch_);
            pos_ = 0;
            ++epoch_;
        }
        return batches_[pos_++];
    }

  private:
    const std::vector<Sample>* corpus_;
    long cap_;
    uint64_t seed_;
    uint64_t stream_;
    std::vector<Batch> batches_;
    size_t pos_ = 0;
    uint64_t epoch_ = 0;
};

inline void check_finite_loss(const LossReport& report, long step) {
    if (!std::isfinite(report.total)) {
        throw std::runtime_error(
            "training diverged at step " + std::to_string(step) + ": total=" +
            std::to_string(report.total) + " st=" + std::to_string(report.st) + " mt=" +
            std::to_string(report.mt) + " ctr=" + std::to_string(report.ctr));
    }
}

}  // namespace detail

// Mean teacher-forced text-path loss over a corpus, without touching grads.
inline double mt_eval_loss(const Model& model, const std::vector<MTPair>& pairs,
                           double label_smoothing = 0.1) {
    if (pairs.empty()) throw std::invalid_argument("cannot evaluate an empty corpus");
    NoGradGuard ng;
    double sum = 0.0;
    long tokens = 0;
    for (const auto& p : pairs) {
        auto [s, c] = detail::smoothed_nll_sum(model.forward_mt(p.u.ids, decoder_input(p.v.ids)),
                                               decoder_gold(p.v.ids), kPadId, label_smoothing);
        sum += s.value();
        tokens += c;
    }
    return sum / static_cast<double>(tokens);
}

inline double st_eval_loss(const Model& model, const std::vector<STTriplet>& triplets,
                           double label_smoothing = 0.1) {
    if (triplets.empty()) throw std::invalid_argument("cannot evaluate an empty corpus");
    NoGradGuard ng;
    double sum = 0.0;
    long tokens = 0;
    for (const auto& t : triplets) {
        auto [s, c] = detail::smoothed_nll_sum(
            model.forward_st(t.x.frames, decoder_input(t.y.ids)), decoder_gold(t.y.ids), kPadId,
            label_smoothing);
        sum += s.value();
        tokens += c;
    }
    return sum / static_cast<double>(tokens);
}

// Fraction of teacher-forced next-token predictions that hit the gold token.
inline double mt_token_accuracy(const Model& model, const std::vector<MTPair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("cannot evaluate an empty corpus");
    NoGradGuard ng;
    long correct = 0, total = 0;
    for (const auto& p : pairs) {
        Tensor logits = model.forward_mt(p.u.ids, decoder_input(p.v.ids));
        const auto gold = decoder_gold(p.v.ids);
        for (size_t i = 0; i < gold.size(); ++i) {
            int best = 0;
            for (int j = 1; j < logits.dim(1); ++j) {
                if (logits.at(static_cast<int>(i), j) > logits.at(static_cast<int>(i), best)) {
                    best = j;
                }
            }
            correct += best == gold[i] ? 1 : 0;
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

inline double st_token_accuracy(const Model& model, const std::vector<STTriplet>& triplets) {
    if (triplets.empty()) throw std::invalid_argument("cannot evaluate an empty corpus");
    NoGradGuard ng;
    long correct = 0, total = 0;
    for (const auto& t : triplets) {
        Tensor logits = model.forward_st(t.x.frames, decoder_input(t.y.ids));
        const auto gold = decoder_gold(t.y.ids);
        for (size_t i = 0; i < gold.size(); ++i) {
            int best = 0;
            for (int j = 1; j < logits.dim(1); ++j) {
                if (logits.at(static_cast<int>(i), j) > logits.at(static_cast<int>(i), best)) {
                    best = j;
                }
            }
            correct += best == gold[i] ? 1 : 0;
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// Fraction of samples whose greedy speech-path decode reproduces the target
// exactly.
inline double st_exact_match(const Model& model, const std::vector<STTriplet>& triplets,
                             int max_len = 64) {
    if (triplets.empty()) throw std::invalid_argument("cannot evaluate an empty corpus");
    NoGradGuard ng;
    long hits = 0;
    for (const auto& t : triplets) {
        SemanticMemory mem = model.project(model.encode_speech(t.x.frames));
        std::vector<int> ids = greedy_decode(model.step_fn(mem), model.search_spec(max_len));
        std::vector<int> content(ids.begin() + 1, ids.end());
        if (!content.empty() && content.back() == kEosId) content.pop_back();
        hits += content == t.y.ids ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(triplets.size());
}

// Stage one: text-path-only training. Speech-branch parameters never receive
// gradients, so they are bitwise untouched.
inline TrainResult pretrain_mt(Model& model, const std::vector<MTPair>& train,
                               const std::vector<MTPair>& dev, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.stage != Stage::pretrain_mt) {
        throw std::invalid_argument("pretrain_mt called with the wrong stage");
    }
    if (train.empty()) throw std::invalid_argument("pretrain_mt needs training pairs");
    const std::vector<MTPair>& dev_set = dev.empty() ? train : dev;

    TrainResult result;
    AdamState adam;
    const FreezeSet freeze = cfg.freeze_set();
    detail::BatchStream<MTPair> stream(train, cfg.token_cap, cfg.seed, 2);
    double dev_loss = mt_eval_loss(model, dev_set, cfg.label_smoothing);
    for (long step = 1; step <= cfg.max_updates; ++step) {
        model.params.zero_grads();
        Tensor loss = mt_loss(model, stream.next(), cfg.label_smoothing);
        LossReport report;
        report.mt = loss.value();
        report = total_loss(report, {0.0, 1.0, 0.0});
        detail::check_finite_loss(report, step);
        loss.backward();
        clip_gradients(model.params, freeze, cfg.clip_norm);
        adam_step(model.params, adam, lr_schedule(step, cfg.peak_lr, cfg.warmup), freeze);
        result.reports.push_back(report);
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
            step != cfg.max_updates) {
            dev_loss = mt_eval_loss(model, dev_set, cfg.label_smoothing);
            result.checkpoints.push_back(checkpoint_from(model, step, dev_loss));
        }
    }
    dev_loss = mt_eval_loss(model, dev_set, cfg.label_smoothing);
    result.checkpoints.push_back(checkpoint_from(model, cfg.max_updates, dev_loss));
    result.final_dev_loss = dev_loss;
    return result;
}

// Stage two: joint translation + contrastive training on speech triplets,
// with text batches drawn round-robin from the transcript pairs and any
// external text corpus. Zero-weight components are skipped entirely.
inline TrainResult finetune_multitask(Model& model, const std::vector<STTriplet>& st_train,
                                      const std::vector<MTPair>& mt_external,
                                      const std::vector<STTriplet>& dev,
                                      const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.stage != Stage::finetune_multitask) {
        throw std::invalid_argument("finetune_multitask called with the wrong stage");
    }
    if (st_train.empty()) throw std::invalid_argument("finetune_multitask needs speech triplets");
    const std::vector<STTriplet>& dev_set = dev.empty() ? st_train : dev;

    std::vector<MTPair> transcript_pairs;
    transcript_pairs.reserve(st_train.size());
    for (const auto& t : st_train) {
        MTPair p;
        p.u = t.z;
        p.v = t.y;
        transcript_pairs.push_back(std::move(p));
    }

    TrainResult result;
    AdamState adam;
    const FreezeSet freeze = cfg.freeze_set();
    detail::BatchStream<STTriplet> st_stream(st_train, cfg.frame_cap, cfg.seed, 1);
    detail::BatchStream<MTPair> transcript_stream(transcript_pairs, cfg.token_cap, cfg.seed, 2);
    detail::BatchStream<MTPair> external_stream(mt_external, cfg.token_cap, cfg.seed, 3);
    const bool use_mt = cfg.weights.mt > 0.0;
    const bool have_external = !mt_external.empty();

    double dev_loss = st_eval_loss(model, dev_set, cfg.label_smoothing);
    for (long step = 1; step <= cfg.max_updates; ++step) {
        model.params.zero_grads();
        const Batch& st_batch = st_stream.next();
        const Batch* mt_batch = nullptr;
        if (use_mt) {
            const bool external_turn = have_external && step % 2 == 0;
            mt_batch = external_turn ? &external_stream.next() : &transcript_stream.next();
        }
        auto parts = multitask_losses(model, st_batch, mt_batch, cfg.weights, cfg.tau,
                                      cfg.label_smoothing);
        auto [total, report] = combine_losses(parts, cfg.weights);
        detail::check_finite_loss(report, step);
        total.backward();
        clip_gradients(model.params, freeze, cfg.clip_norm);
        adam_step(model.params, adam, lr_schedule(step, cfg.peak_lr, cfg.warmup), freeze);
        result.reports.push_back(report);
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
            step != cfg.max_updates) {
            dev_loss = st_eval_loss(model, dev_set, cfg.label_smoothing);
            result.checkpoints.push_back(checkpoint_from(model, step, dev_loss));
        }
    }
    dev_loss = st_eval_loss(model, dev_set, cfg.label_smoothing);
    result.checkpoints.push_back(checkpoint_from(model, cfg.max_updates, dev_loss));
    result.final_dev_loss = dev_loss;
    return result;
}

}  // namespace ssmt
