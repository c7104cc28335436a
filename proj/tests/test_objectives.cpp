#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <ssmt/corpus.hpp>
#include <ssmt/model.hpp>
#include <ssmt/objectives.hpp>

#include "helpers.hpp"
#include "reference.hpp"

using ssmt::Tensor;

namespace {

ssmt::ModelConfig tiny_config() {
    ssmt::ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.proj_layers = 1;
    cfg.ffn_dim = 8;
    cfg.memory_slots = 2;
    cfg.feature_dim = 3;
    cfg.frame_hidden = 4;
    cfg.d_feat = 4;
    cfg.cnn_hidden = 4;
    cfg.init_seed = 42;
    return cfg;
}

ssmt::SemanticMemory memory_from(std::vector<double> values, int m, int d,
                                 ssmt::Modality modality) {
    return ssmt::SemanticMemory{Tensor::from_data({m, d}, std::move(values)), modality};
}

ssmt::SemanticMemory random_memory(ssmt::Rng& rng, int m, int d, ssmt::Modality modality) {
    std::vector<double> v(static_cast<size_t>(m) * d);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return memory_from(std::move(v), m, d, modality);
}

// Orthogonal d x d matrix built from a fixed sequence of Givens rotations.
refimpl::Mat random_rotation(ssmt::Rng& rng, int d) {
    refimpl::Mat q(static_cast<size_t>(d), refimpl::Vec(static_cast<size_t>(d), 0.0));
    for (int i = 0; i < d; ++i) q[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;
    for (int a = 0; a < d; ++a) {
        for (int b = a + 1; b < d; ++b) {
            const double theta = rng.uniform(0.0, 6.28318530717958647692);
            const double c = std::cos(theta), s = std::sin(theta);
            for (int r = 0; r < d; ++r) {
                const double qa = q[static_cast<size_t>(r)][static_cast<size_t>(a)];
                const double qb = q[static_cast<size_t>(r)][static_cast<size_t>(b)];
                q[static_cast<size_t>(r)][static_cast<size_t>(a)] = c * qa - s * qb;
                q[static_cast<size_t>(r)][static_cast<size_t>(b)] = s * qa + c * qb;
            }
        }
    }
    return q;
}

ssmt::SemanticMemory transform_rows(const ssmt::SemanticMemory& mem, const refimpl::Mat& q) {
    const int m = mem.values.dim(0), d = mem.values.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * d, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k)
                acc += mem.values.at(i, k) * q[static_cast<size_t>(k)][static_cast<size_t>(j)];
            out[static_cast<size_t>(i) * d + j] = acc;
        }
    return memory_from(std::move(out), m, d, mem.modality);
}

// Independent scalar evaluation of the smoothed cross-entropy for one row.
double row_ce(const std::vector<double>& logits, int gold, double eps) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    const double lse = mx + std::log(denom);
    const int v_size = static_cast<int>(logits.size());
    double ce = 0.0;
    for (int j = 0; j < v_size; ++j) {
        double q = eps / v_size;
        if (j == gold) q += 1.0 - eps;
        ce -= q * (logits[static_cast<size_t>(j)] - lse);
    }
    return ce;
}

std::map<std::string, std::vector<double>> grad_snapshot(const ssmt::Model& model) {
    std::map<std::string, std::vector<double>> grads;
    for (const auto& name : model.params.names()) {
        const Tensor& p = model.params.get(name);
        if (p.has_grad()) grads[name] = p.grad();
    }
    return grads;
}

ssmt::Batch single_st_batch(const ssmt::STTriplet& t, size_t index) {
    std::vector<ssmt::STTriplet> one{t};
    auto batches = ssmt::make_batches(one, 1000000, 1);
    batches[0].sample_indices[0] = index;
    return batches[0];
}

}  // namespace

TEST_CASE("decoder input and gold wrap the target with BOS and EOS") {
    const std::vector<int> target{5, 7, 4};
    CHECK(ssmt::decoder_input(target) == std::vector<int>{ssmt::kBosId, 5, 7, 4});
    CHECK(ssmt::decoder_gold(target) == std::vector<int>{5, 7, 4, ssmt::kEosId});
    CHECK(ssmt::decoder_input({}) == std::vector<int>{ssmt::kBosId});
    CHECK(ssmt::decoder_gold({}) == std::vector<int>{ssmt::kEosId});
}

TEST_CASE("uniform logits score ln V at any smoothing") {
    const int v = 32;
    Tensor logits = Tensor::zeros({3, v});
    const std::vector<int> gold{4, 5, 6};
    for (double eps : {0.0, 0.1, 0.5}) {
        CHECK(std::fabs(ssmt::nll_loss(logits, gold, ssmt::kPadId, eps).value() -
                        std::log(static_cast<double>(v))) < 1e-12);
    }
}

TEST_CASE("confident correct logits drive the unsmoothed loss to zero") {
    const int v = 8;
    std::vector<double> data(2 * v, 0.0);
    data[0 * v + 5] = 1000.0;
    data[1 * v + 4] = 1000.0;
    Tensor logits = Tensor::from_data({2, v}, std::move(data));
    CHECK(ssmt::nll_loss(logits, {5, 4}, ssmt::kPadId, 0.0).value() < 1e-10);
}

TEST_CASE("nll matches a direct scalar evaluation") {
    Tensor logits = Tensor::from_data({2, 3}, {1.0, 2.0, -0.5, 0.5, -0.5, 0.25});
    const std::vector<int> gold{1, 2};
    for (double eps : {0.0, 0.1}) {
        const double expected = 0.5 * (row_ce({1.0, 2.0, -0.5}, 1, eps) +
                                       row_ce({0.5, -0.5, 0.25}, 2, eps));
        CHECK(std::fabs(ssmt::nll_loss(logits, gold, ssmt::kPadId, eps).value() - expected) <
              1e-12);
    }
}

TEST_CASE("pad positions are excluded from the mean") {
    ssmt::Rng rng(3);
    Tensor logits = testutil::random_tensor(rng, {3, 6}, -2.0, 2.0, false);
    const std::vector<int> with_pad{4, ssmt::kPadId, 5};
    const double expected = 0.5 * (row_ce({logits.at(0, 0), logits.at(0, 1), logits.at(0, 2),
                                           logits.at(0, 3), logits.at(0, 4), logits.at(0, 5)},
                                          4, 0.1) +
                                   row_ce({logits.at(2, 0), logits.at(2, 1), logits.at(2, 2),
                                           logits.at(2, 3), logits.at(2, 4), logits.at(2, 5)},
                                          5, 0.1));
    CHECK(std::fabs(ssmt::nll_loss(logits, with_pad).value() - expected) < 1e-12);

    CHECK_THROWS_AS(ssmt::nll_loss(logits, {ssmt::kPadId, ssmt::kPadId, ssmt::kPadId}),
                    std::invalid_argument);
    CHECK_THROWS_AS(ssmt::nll_loss(logits, {4, 5}), std::invalid_argument);
    CHECK_THROWS_AS(ssmt::nll_loss(logits, {4, 5, 99}), std::invalid_argument);
    CHECK_THROWS_AS(ssmt::nll_loss(logits, with_pad, ssmt::kPadId, 1.0), std::invalid_argument);
}

TEST_CASE("zero-temperature contrastive loss collapses to 2 m ln m") {
    ssmt::Rng rng(11);
    for (int m : {2, 4, 16}) {
        auto text = random_memory(rng, m, 6, ssmt::Modality::text);
        auto speech = random_memory(rng, m, 6, ssmt::Modality::speech);
        const double expected = 2.0 * m * std::log(static_cast<double>(m));
        CHECK(std::fabs(ssmt::contrastive_loss(text, speech, 0.0).value() - expected) < 1e-10);
    }
}

TEST_CASE("indistinguishable slots score 2 m ln m at any temperature") {
    const int m = 4, d = 5;
    std::vector<double> row{0.3, -1.2, 0.8, 0.05, 2.0};
    std::vector<double> all;
    for (int i = 0; i < m; ++i) all.insert(all.end(), row.begin(), row.end());
    auto text = memory_from(all, m, d, ssmt::Modality::text);
    auto speech = memory_from(all, m, d, ssmt::Modality::speech);
    for (double tau : {0.5, 1.0, 7.0}) {
        CHECK(std::fabs(ssmt::contrastive_loss(text, speech, tau).value() -
                        2.0 * m * std::log(static_cast<double>(m))) < 1e-12);
    }
}

TEST_CASE("orthonormal aligned memories score 4 ln(1 + 1/e)") {
    auto text = memory_from({1.0, 0.0, 0.0, 1.0}, 2, 2, ssmt::Modality::text);
    auto speech = memory_from({1.0, 0.0, 0.0, 1.0}, 2, 2, ssmt::Modality::speech);
    const double loss = ssmt::contrastive_loss(text, speech, 1.0).value();
    CHECK(std::fabs(loss - 4.0 * std::log(1.0 + std::exp(-1.0))) < 1e-12);
    CHECK(std::fabs(loss - 1.25304) < 1e-4);
}

TEST_CASE("contrastive loss depends only on the cosine geometry") {
    ssmt::Rng rng(21);
    const int m = 5, d = 6;
    auto text = random_memory(rng, m, d, ssmt::Modality::text);
    auto speech = random_memory(rng, m, d, ssmt::Modality::speech);
    const double base = ssmt::contrastive_loss(text, speech, 2.5).value();

    auto q = random_rotation(rng, d);
    const double rotated =
        ssmt::contrastive_loss(transform_rows(text, q), transform_rows(speech, q), 2.5).value();
    CHECK(std::fabs(rotated - base) < 1e-9);

    std::vector<double> rescaled;
    for (int i = 0; i < m; ++i) {
        const double c = 0.1 + 3.0 * rng.uniform(0.0, 1.0);
        for (int j = 0; j < d; ++j) rescaled.push_back(speech.values.at(i, j) * c);
    }
    const double scaled_loss =
        ssmt::contrastive_loss(text, memory_from(std::move(rescaled), m, d,
                                                 ssmt::Modality::speech),
                               2.5)
            .value();
    CHECK(std::fabs(scaled_loss - base) < 1e-9);
}

TEST_CASE("pair order does not change the contrastive loss") {
    ssmt::Rng rng(23);
    const int m = 6, d = 4;
    auto text = random_memory(rng, m, d, ssmt::Modality::text);
    auto speech = random_memory(rng, m, d, ssmt::Modality::speech);
    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    std::vector<double> tp, sp;
    for (int i : perm) {
        for (int j = 0; j < d; ++j) {
            tp.push_back(text.values.at(i, j));
            sp.push_back(speech.values.at(i, j));
        }
    }
    const double base = ssmt::contrastive_loss(text, speech, 1.5).value();
    const double permuted =
        ssmt::contrastive_loss(memory_from(std::move(tp), m, d, ssmt::Modality::text),
                               memory_from(std::move(sp), m, d, ssmt::Modality::speech), 1.5)
            .value();
    CHECK(std::fabs(permuted - base) < 1e-12);
}

TEST_CASE("contrastive loss is never negative") {
    ssmt::Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 2 + static_cast<int>(rng.below(6));
        auto text = random_memory(rng, m, 5, ssmt::Modality::text);
        auto speech = random_memory(rng, m, 5, ssmt::Modality::speech);
        const double tau = rng.uniform(0.0, 5.0);
        CHECK(ssmt::contrastive_loss(text, speech, tau).value() >= 0.0);
    }

    auto a = random_memory(rng, 3, 4, ssmt::Modality::text);
    auto b = random_memory(rng, 2, 4, ssmt::Modality::speech);
    CHECK_THROWS_AS(ssmt::contrastive_loss(a, b, 1.0), std::invalid_argument);
    auto c = random_memory(rng, 3, 4, ssmt::Modality::speech);
    CHECK_THROWS_AS(ssmt::contrastive_loss(a, c, -1.0), std::invalid_argument);
}

TEST_CASE("total loss is the fixed weighted sum of components") {
    ssmt::LossReport parts;
    parts.st = 2.0;
    parts.mt = 3.0;
    parts.ctr = 5.0;
    CHECK(ssmt::total_loss(parts, {1.0, 1.0, 1.0}).total == 10.0);
    CHECK(ssmt::total_loss(parts, {1.0, 0.0, 0.0}).total == 2.0);
    CHECK(ssmt::total_loss(parts, {0.5, 1.5, 2.0}).total == 0.5 * 2.0 + 1.5 * 3.0 + 2.0 * 5.0);
    CHECK(ssmt::total_loss(parts, {2.0, 2.0, 2.0}).total ==
          2.0 * ssmt::total_loss(parts, {1.0, 1.0, 1.0}).total);
    CHECK_THROWS_AS(ssmt::total_loss(parts, {-1.0, 1.0, 1.0}), std::invalid_argument);
    parts.st = std::numeric_limits<double>::quiet_NaN();
    CHECK(std::isnan(ssmt::total_loss(parts, {1.0, 1.0, 1.0}).total));
}

TEST_CASE("batch text loss matches an end-to-end plain-loop evaluation") {
    ssmt::Model model(tiny_config());
    const std::vector<int> source{4, 5, 6};
    const std::vector<int> target{5, 4};
    const double eps = 0.1;

    const auto table = refimpl::to_mat(model.embed_table);
    refimpl::Mat h = refimpl::embed_tokens(source, table);
    for (const auto& blk : model.encoder.blocks) h = refimpl::encoder_block(h, blk);
    refimpl::Mat mem = refimpl::to_mat(model.projection.queries);
    for (const auto& layer : model.projection.layers)
        mem = refimpl::projection_layer(mem, h, layer);
    refimpl::Mat dec = refimpl::embed_tokens(ssmt::decoder_input(target), table);
    for (const auto& blk : model.decoder.blocks) dec = refimpl::decoder_block(dec, mem, blk);
    refimpl::Mat logits(dec.size());
    for (size_t i = 0; i < dec.size(); ++i) {
        logits[i].resize(table.size());
        for (size_t j = 0; j < table.size(); ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < table[0].size(); ++k) acc += dec[i][k] * table[j][k];
            logits[i][j] = acc;
        }
    }
    const auto gold = ssmt::decoder_gold(target);
    double expected = 0.0;
    for (size_t i = 0; i < gold.size(); ++i)
        expected += row_ce(logits[i], gold[static_cast<size_t>(i)], eps);
    expected /= static_cast<double>(gold.size());

    std::vector<ssmt::MTPair> pairs(1);
    pairs[0].u.ids = source;
    pairs[0].v.ids = target;
    auto batch = ssmt::make_batches(pairs, 100, 1)[0];
    CHECK(std::fabs(ssmt::mt_loss(model, batch, eps).value() - expected) < 1e-9);
}

TEST_CASE("batch speech loss matches an end-to-end plain-loop evaluation") {
    auto cfg = tiny_config();
    ssmt::Model model(cfg);
    ssmt::Rng rng(7);
    ssmt::STTriplet triplet;
    triplet.x.frames = testutil::random_tensor(rng, {7, cfg.feature_dim}, -0.9, 0.9, false);
    triplet.z.ids = {4, 6};
    triplet.y.ids = {7, 5};
    const double eps = 0.1;

    refimpl::Mat x = refimpl::to_mat(triplet.x.frames);
    auto conv_gelu = [](const refimpl::Mat& in, const ssmt::ConvLayer& c) {
        return refimpl::gelu(
            refimpl::conv1d(in, c.kernels, refimpl::to_vec(c.bias), c.stride, c.padding));
    };
    refimpl::Mat h = conv_gelu(x, model.frame_encoder.conv0);
    h = conv_gelu(h, model.frame_encoder.conv1);
    h = conv_gelu(h, model.downsampler.conv0);
    h = conv_gelu(h, model.downsampler.conv1);
    h = refimpl::add(h, refimpl::positional_encoding(static_cast<int>(h.size()), cfg.d_model));
    for (const auto& blk : model.encoder.blocks) h = refimpl::encoder_block(h, blk);
    refimpl::Mat mem = refimpl::to_mat(model.projection.queries);
    for (const auto& layer : model.projection.layers)
        mem = refimpl::projection_layer(mem, h, layer);
    const auto table = refimpl::to_mat(model.embed_table);
    refimpl::Mat dec = refimpl::embed_tokens(ssmt::decoder_input(triplet.y.ids), table);
    for (const auto& blk : model.decoder.blocks) dec = refimpl::decoder_block(dec, mem, blk);
    const auto gold = ssmt::decoder_gold(triplet.y.ids);
    double expected = 0.0;
    for (size_t i = 0; i < gold.size(); ++i) {
        std::vector<double> row(table.size());
        for (size_t j = 0; j < table.size(); ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < table[0].size(); ++k) acc += dec[i][k] * table[j][k];
            row[j] = acc;
        }
        expected += row_ce(row, gold[i], eps);
    }
    expected /= static_cast<double>(gold.size());

    auto batch = single_st_batch(triplet, 0);
    CHECK(std::fabs(ssmt::st_loss(model, batch, eps).value() - expected) < 1e-9);
}

TEST_CASE("sample order inside a speech batch does not change the loss") {
    auto cfg = tiny_config();
    ssmt::Model model(cfg);
    ssmt::CorpusConfig ccfg;
    ccfg.vocab_size = cfg.vocab_size;
    ccfg.feature_dim = cfg.feature_dim;
    ccfg.n_st = 3;
    ccfg.n_mt = 0;
    ccfg.seed = 4;
    auto corpus = ssmt::generate_synthetic_corpus(ccfg);

    auto forward = [&](const std::vector<ssmt::STTriplet>& order) {
        auto batches = ssmt::make_batches(order, 1000000, 1);
        REQUIRE(batches.size() == 1);
        return ssmt::st_loss(model, batches[0]).value();
    };
    std::vector<ssmt::STTriplet> permuted{corpus.st[2], corpus.st[0], corpus.st[1]};
    CHECK(std::fabs(forward(corpus.st) - forward(permuted)) < 1e-12);
}

TEST_CASE("multitask components decompose and skip disabled terms") {
    auto cfg = tiny_config();
    ssmt::Model model(cfg);
    ssmt::CorpusConfig ccfg;
    ccfg.vocab_size = cfg.vocab_size;
    ccfg.feature_dim = cfg.feature_dim;
    ccfg.n_st = 2;
    ccfg.n_mt = 2;
    ccfg.seed = 6;
    auto corpus = ssmt::generate_synthetic_corpus(ccfg);
    auto st_batch = ssmt::make_batches(corpus.st, 1000000, 1)[0];
    auto mt_batch = ssmt::make_batches(corpus.mt, 1000000, 1)[0];
    const double tau = 1.0;

    auto run = [&](ssmt::LossWeights w) {
        model.params.zero_grads();
        auto parts = ssmt::multitask_losses(model, st_batch, &mt_batch, w, tau);
        auto [total, report] = ssmt::combine_losses(parts, w);
        total.backward();
        return std::pair{grad_snapshot(model), report};
    };

    const ssmt::LossWeights full{0.7, 1.3, 2.1};
    auto [g_full, r_full] = run(full);
    auto [g_st, r_st] = run({0.7, 0.0, 0.0});
    auto [g_mt, r_mt] = run({0.0, 1.3, 0.0});
    auto [g_ctr, r_ctr] = run({0.0, 0.0, 2.1});

    CHECK(r_st.st == r_full.st);
    CHECK(r_mt.mt == r_full.mt);
    CHECK(r_ctr.ctr == r_full.ctr);
    CHECK(r_st.mt == 0.0);
    CHECK(r_st.ctr == 0.0);
    CHECK(std::fabs(r_full.total - (0.7 * r_full.st + 1.3 * r_full.mt + 2.1 * r_full.ctr)) ==
          0.0);

    // a decoder parameter only feeds the translation losses
    for (const auto& [name, g] : g_ctr) {
        CHECK(name.rfind("decoder.", 0) != 0);
    }

    for (const auto& [name, g] : g_full) {
        std::vector<double> summed(g.size(), 0.0);
        for (const auto* part : {&g_st, &g_mt, &g_ctr}) {
            auto it = part->find(name);
            if (it == part->end()) continue;
            for (size_t i = 0; i < g.size(); ++i) summed[i] += it->second[i];
        }
        double worst = 0.0;
        for (size_t i = 0; i < g.size(); ++i) {
            worst = std::max(worst, std::fabs(summed[i] - g[i]) /
                                        std::max(1.0, std::fabs(g[i])));
        }
        INFO(name);
        CHECK(worst < 1e-12);
    }

    CHECK_THROWS_AS(ssmt::combine_losses(ssmt::MultitaskLosses{}, full),
                    std::invalid_argument);
    CHECK_THROWS_AS(ssmt::multitask_losses(model, st_batch, &mt_batch, {-1.0, 1.0, 1.0}, tau),
                    std::invalid_argument);
    CHECK_THROWS_AS(ssmt::multitask_losses(model, mt_batch, nullptr, full, tau),
                    std::invalid_argument);
}

TEST_CASE("multitask report counts tokens and pairs") {
    auto cfg = tiny_config();
    ssmt::Model model(cfg);
    ssmt::CorpusConfig ccfg;
    ccfg.vocab_size = cfg.vocab_size;
    ccfg.feature_dim = cfg.feature_dim;
    ccfg.n_st = 3;
    ccfg.n_mt = 2;
    ccfg.seed = 8;
    auto corpus = ssmt::generate_synthetic_corpus(ccfg);
    auto st_batch = ssmt::make_batches(corpus.st, 1000000, 1)[0];
    auto mt_batch = ssmt::make_batches(corpus.mt, 1000000, 1)[0];

    auto parts = ssmt::multitask_losses(model, st_batch, &mt_batch, {1.0, 1.0, 1.0}, 1.0);
    long st_expected = 0;
    for (const auto& t : corpus.st) st_expected += t.y.length() + 1;
    long mt_expected = 0;
    for (const auto& p : corpus.mt) mt_expected += p.v.length() + 1;
    CHECK(parts.st_tokens == st_expected);
    CHECK(parts.mt_tokens == mt_expected);
    CHECK(parts.pairs == 3);

    auto no_mt = ssmt::multitask_losses(model, st_batch, nullptr, {1.0, 1.0, 1.0}, 1.0);
    CHECK_FALSE(no_mt.mt.defined());
    CHECK(no_mt.mt_tokens == 0);
}
