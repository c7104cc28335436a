#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include <ssmt/analysis.hpp>
#include <ssmt/bleu.hpp>

#include "helpers.hpp"

using ssmt::Tensor;

namespace {

std::vector<std::string> words(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

ssmt::ModelConfig micro_config() {
    ssmt::ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.proj_layers = 1;
    cfg.ffn_dim = 8;
    cfg.memory_slots = 2;
    cfg.feature_dim = 4;
    cfg.frame_hidden = 4;
    cfg.d_feat = 4;
    cfg.cnn_hidden = 4;
    cfg.init_seed = 21;
    return cfg;
}

std::vector<ssmt::STTriplet> micro_triplets(int n, int feature_dim, uint64_t seed) {
    ssmt::CorpusConfig cfg;
    cfg.vocab_size = 16;
    cfg.feature_dim = feature_dim;
    cfg.min_len = 2;
    cfg.max_len = 4;
    cfg.n_st = n;
    cfg.n_mt = 0;
    cfg.seed = seed;
    return ssmt::generate_synthetic_corpus(cfg).st;
}

// Power iteration with deflation: an eigensolver independent of the Jacobi
// rotation code inside the library.
std::pair<double, std::vector<double>> dominant_eigenpair(
    std::vector<std::vector<double>> a, const std::vector<std::vector<double>>& deflate) {
    const size_t n = a.size();
    for (const auto& v : deflate) {
        double lambda = 0.0;
        std::vector<double> av(n, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) av[i] += a[i][j] * v[j];
        for (size_t i = 0; i < n; ++i) lambda += av[i] * v[i];
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) a[i][j] -= lambda * v[i] * v[j];
    }
    std::vector<double> x(n, 1.0 / std::sqrt(static_cast<double>(n)));
    double lambda = 0.0;
    for (int iter = 0; iter < 20000; ++iter) {
        std::vector<double> y(n, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) y[i] += a[i][j] * x[j];
        double norm = 0.0;
        for (double v : y) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) break;
        for (size_t i = 0; i < n; ++i) y[i] /= norm;
        lambda = norm;
        x = y;
    }
    return {lambda, x};
}

}  // namespace

TEST_CASE("bleu of a corpus against itself is 100") {
    std::vector<std::vector<std::string>> corpus{words("the cat sat on the mat"),
                                                 words("a b c d e f g"), words("x y z w")};
    auto report = ssmt::bleu(corpus, corpus);
    CHECK(report.score == 100.0);
    for (double p : report.precisions) CHECK(p == 1.0);
    CHECK(report.brevity_penalty == 1.0);
}

TEST_CASE("bleu matches the hand-derived brevity case") {
    std::vector<std::vector<std::string>> hyp{words("a b c d")};
    std::vector<std::vector<std::string>> ref{words("a b c d e")};
    auto report = ssmt::bleu(hyp, ref);
    for (double p : report.precisions) CHECK(p == 1.0);
    CHECK(std::fabs(report.brevity_penalty - std::exp(1.0 - 5.0 / 4.0)) < 1e-15);
    CHECK(std::fabs(report.score - 77.88) < 0.01);
    CHECK(report.hyp_length == 4);
    CHECK(report.ref_length == 5);
}

TEST_CASE("bleu applies modified precision clipping and zero floors") {
    std::vector<std::vector<std::string>> hyp{words("the the the")};
    std::vector<std::vector<std::string>> ref{words("the cat")};
    auto report = ssmt::bleu(hyp, ref);
    CHECK(std::fabs(report.precisions[0] - 1.0 / 3.0) < 1e-15);
    CHECK(report.precisions[2] == 0.0);
    CHECK(report.score == 0.0);

    std::vector<std::vector<std::string>> empty_hyp{{}};
    std::vector<std::vector<std::string>> one_ref{words("a b")};
    CHECK(ssmt::bleu(empty_hyp, one_ref).score == 0.0);
}

TEST_CASE("bleu is invariant under consistent corpus reordering") {
    std::vector<std::vector<std::string>> hyp{words("a b c d e"), words("g h i j k l"),
                                              words("m n o p")};
    std::vector<std::vector<std::string>> ref{words("a b c d f"), words("g h i j k l"),
                                              words("m n o p")};
    const double base = ssmt::bleu(hyp, ref).score;
    std::vector<std::vector<std::string>> hyp2{hyp[2], hyp[0], hyp[1]};
    std::vector<std::vector<std::string>> ref2{ref[2], ref[0], ref[1]};
    CHECK(ssmt::bleu(hyp2, ref2).score == base);
    CHECK(base > 0.0);
    CHECK(base < 100.0);
}

TEST_CASE("bleu rejects malformed corpora") {
    std::vector<std::vector<std::string>> one{words("a b")};
    std::vector<std::vector<std::string>> two{words("a b"), words("c")};
    CHECK_THROWS_AS(ssmt::bleu(one, two), std::invalid_argument);
    const std::vector<std::vector<std::string>> none;
    CHECK_THROWS_AS(ssmt::bleu(none, none), std::invalid_argument);
    std::vector<std::vector<std::string>> empty_ref{{}};
    CHECK_THROWS_AS(ssmt::bleu(one, empty_ref), std::invalid_argument);
    CHECK_THROWS_AS(ssmt::bleu(one, one, 5), std::invalid_argument);
}

TEST_CASE("bleu works over token id sequences") {
    std::vector<std::vector<int>> hyp{{4, 5, 6, 7}};
    std::vector<std::vector<int>> ref{{4, 5, 6, 7, 8}};
    CHECK(std::fabs(ssmt::bleu(hyp, ref).score - 77.88) < 0.01);
}

TEST_CASE("formatted doubles round trip exactly") {
    for (double x : {0.1, -1.0 / 3.0, 1e-300, 77.88, 0.0, 123456.789012345}) {
        CHECK(std::strtod(ssmt::fmt_double(x).c_str(), nullptr) == x);
    }
}

TEST_CASE("memory export pairs modalities and matches an eigensolver oracle") {
    ssmt::Model model(micro_config());
    auto triplets = micro_triplets(6, 4, 31);
    auto dump = ssmt::export_memories(model, triplets, 100);
    REQUIRE(dump.sample_ids.size() == 6);
    REQUIRE(dump.text_memories.size() == dump.speech_memories.size());
    const int m = model.cfg.memory_slots;
    const int d = model.cfg.d_model;
    CHECK(dump.text_coords.size() == 6 * static_cast<size_t>(m));
    CHECK(dump.speech_coords.size() == 6 * static_cast<size_t>(m));

    // rebuild the covariance independently from the dumped memories
    std::vector<std::vector<double>> rows;
    for (const auto* group : {&dump.text_memories, &dump.speech_memories}) {
        for (const auto& mem : *group) {
            for (int i = 0; i < m; ++i) {
                std::vector<double> row(static_cast<size_t>(d));
                for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] = mem.at(i, j);
                rows.push_back(std::move(row));
            }
        }
    }
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (const auto& r : rows)
        for (size_t j = 0; j < r.size(); ++j) mean[j] += r[j];
    for (double& v : mean) v /= static_cast<double>(rows.size());
    std::vector<std::vector<double>> cov(static_cast<size_t>(d),
                                         std::vector<double>(static_cast<size_t>(d), 0.0));
    for (const auto& r : rows)
        for (size_t a = 0; a < r.size(); ++a)
            for (size_t b = 0; b < r.size(); ++b)
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
    for (auto& row : cov)
        for (double& v : row) v /= static_cast<double>(rows.size());

    auto [l1, v1] = dominant_eigenpair(cov, {});
    auto [l2, v2] = dominant_eigenpair(cov, {v1});
    CHECK(std::fabs(dump.eigenvalues[0] - l1) < 1e-8);
    CHECK(std::fabs(dump.eigenvalues[1] - l2) < 1e-8);
    for (int k = 0; k < 2; ++k) {
        const auto& oracle = k == 0 ? v1 : v2;
        const auto& got = dump.components[static_cast<size_t>(k)];
        size_t strongest = 0;
        for (size_t j = 1; j < oracle.size(); ++j) {
            if (std::fabs(oracle[j]) > std::fabs(oracle[strongest])) strongest = j;
        }
        const double flip = oracle[strongest] < 0.0 ? -1.0 : 1.0;
        for (size_t j = 0; j < oracle.size(); ++j) {
            CHECK(std::fabs(got[j] - flip * oracle[j]) < 1e-7);
        }
    }
}

TEST_CASE("pca of two-dimensional memories reconstructs them exactly") {
    auto cfg = micro_config();
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.ffn_dim = 4;
    ssmt::Model model(cfg);
    auto triplets = micro_triplets(5, 4, 37);
    auto dump = ssmt::export_memories(model, triplets);
    const int m = cfg.memory_slots;
    for (size_t s = 0; s < dump.text_memories.size(); ++s) {
        for (int i = 0; i < m; ++i) {
            const auto& c = dump.text_coords[s * static_cast<size_t>(m) + static_cast<size_t>(i)];
            for (int j = 0; j < 2; ++j) {
                const double rebuilt = dump.mean[static_cast<size_t>(j)] +
                                       c[0] * dump.components[0][static_cast<size_t>(j)] +
                                       c[1] * dump.components[1][static_cast<size_t>(j)];
                CHECK(std::fabs(rebuilt - dump.text_memories[s].at(i, j)) < 1e-9);
            }
        }
    }
}

TEST_CASE("duplicate samples dump duplicate coordinates") {
    ssmt::Model model(micro_config());
    auto triplets = micro_triplets(3, 4, 41);
    triplets.push_back(triplets[0]);
    auto dump = ssmt::export_memories(model, triplets);
    const size_t m = static_cast<size_t>(model.cfg.memory_slots);
    for (size_t i = 0; i < m; ++i) {
        CHECK(dump.text_coords[0 * m + i] == dump.text_coords[3 * m + i]);
        CHECK(dump.speech_coords[0 * m + i] == dump.speech_coords[3 * m + i]);
    }
    const std::string text = ssmt::memory_dump_to_text(dump);
    CHECK(text.rfind("sample\tmodality\tslot\tpc1\tpc2", 0) == 0);

    CHECK(ssmt::export_memories(model, triplets, 2).sample_ids.size() == 2);
    CHECK_THROWS_AS(ssmt::export_memories(model, triplets, 0), std::invalid_argument);
}

TEST_CASE("attention export rows are distributions and products are outer") {
    ssmt::Model model(micro_config());
    auto triplets = micro_triplets(2, 4, 43);
    auto dump = ssmt::export_attention(model, triplets[0]);
    const int m = model.cfg.memory_slots;
    REQUIRE(dump.text_attention.dim(0) == m);
    REQUIRE(dump.speech_attention.dim(0) == m);
    REQUIRE(dump.products.size() == static_cast<size_t>(m));
    for (const Tensor* attn : {&dump.text_attention, &dump.speech_attention}) {
        for (int i = 0; i < m; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < attn->dim(1); ++j) {
                row_sum += attn->at(i, j);
                CHECK(attn->at(i, j) >= 0.0);
            }
            CHECK(std::fabs(row_sum - 1.0) < 1e-6);
        }
    }
    for (int i = 0; i < m; ++i) {
        for (int a = 0; a < dump.text_attention.dim(1); ++a)
            for (int b = 0; b < dump.speech_attention.dim(1); ++b) {
                CHECK(dump.products[static_cast<size_t>(i)].at(a, b) ==
                      dump.text_attention.at(i, a) * dump.speech_attention.at(i, b));
            }
    }
    const std::string attn_text = ssmt::attention_dump_to_text(dump);
    CHECK(attn_text.rfind("modality\tslot\tposition\tweight", 0) == 0);
    const std::string prod_text = ssmt::attention_products_to_text(dump);
    CHECK(prod_text.rfind("slot\ttext_pos\tspeech_pos\tproduct", 0) == 0);
}

TEST_CASE("length-one inputs make every attention product one") {
    ssmt::Model model(micro_config());
    ssmt::STTriplet t;
    t.z.ids = {5};
    t.y.ids = {9};
    ssmt::Rng rng(3);
    t.x.frames = testutil::random_tensor(rng, {4, model.cfg.feature_dim}, -0.5, 0.5, false);
    auto dump = ssmt::export_attention(model, t);
    REQUIRE(dump.text_attention.dim(1) == 1);
    REQUIRE(dump.speech_attention.dim(1) == 1);
    for (const auto& p : dump.products) {
        REQUIRE(p.numel() == 1);
        CHECK(p.value() == 1.0);
    }
}

TEST_CASE("alignment stats stay in range and need two samples") {
    ssmt::Model model(micro_config());
    auto triplets = micro_triplets(4, 4, 47);
    auto stats = ssmt::alignment_stats(model, triplets);
    CHECK(stats.retrieval_accuracy >= 0.0);
    CHECK(stats.retrieval_accuracy <= 1.0);
    CHECK(std::isfinite(stats.margin()));
    CHECK(stats.mean_diagonal_cos <= 1.0 + 1e-12);
    CHECK(stats.mean_off_diagonal_cos <= 1.0 + 1e-12);
    CHECK_THROWS_AS(ssmt::alignment_stats(model, {triplets[0]}), std::invalid_argument);
}

TEST_CASE("ablation suites emit their grids deterministically") {
    ssmt::AblationConfig cfg;
    cfg.corpus.vocab_size = 16;
    cfg.corpus.feature_dim = 4;
    cfg.corpus.min_len = 2;
    cfg.corpus.max_len = 3;
    cfg.corpus.n_st = 4;
    cfg.corpus.n_mt = 6;
    cfg.corpus.seed = 51;
    cfg.eval_st = 2;
    cfg.model = micro_config();
    cfg.pretrain.stage = ssmt::Stage::pretrain_mt;
    cfg.pretrain.max_updates = 4;
    cfg.pretrain.warmup = 4;
    cfg.pretrain.checkpoint_every = 0;
    cfg.finetune.stage = ssmt::Stage::finetune_multitask;
    cfg.finetune.max_updates = 4;
    cfg.finetune.warmup = 4;
    cfg.finetune.checkpoint_every = 0;
    cfg.eval_max_len = 8;

    auto freezing = ssmt::run_ablation(ssmt::AblationSuite::freezing, cfg);
    CHECK(freezing.columns == std::vector<std::string>{"frozen", "bleu", "token_acc"});
    REQUIRE(freezing.rows.size() == 4);
    CHECK(freezing.rows[0][0] == "none");
    CHECK(freezing.rows[3][0] == "both");

    auto multitask = ssmt::run_ablation(ssmt::AblationSuite::multitask, cfg);
    REQUIRE(multitask.rows.size() == 4);
    CHECK(multitask.columns.size() == 4);

    auto scaling = ssmt::run_ablation(ssmt::AblationSuite::mt_scaling, cfg);
    REQUIRE(scaling.rows.size() == 4);
    CHECK(scaling.rows[0][0] == "0");
    CHECK(scaling.rows[3][0] == "1");

    auto multitask2 = ssmt::run_ablation(ssmt::AblationSuite::multitask, cfg);
    CHECK(multitask.to_text() == multitask2.to_text());
    const std::string table = multitask.to_text();
    CHECK(table.rfind("mt\tctr\tbleu\ttoken_acc\n", 0) == 0);
    CHECK(std::count(table.begin(), table.end(), '\n') == 5);
}
