#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <ssmt/analysis.hpp>
#include <ssmt/bleu.hpp>
#include <ssmt/corpus.hpp>
#include <ssmt/decoder.hpp>
#include <ssmt/model.hpp>
#include <ssmt/trainer.hpp>

namespace {

namespace fs = std::filesystem;

struct DataPaths {
    std::string dir;

    std::string vocab() const { return dir + "/vocab.txt"; }
    std::string mt() const { return dir + "/mt.tsv"; }
    std::string st() const { return dir + "/st.tsv"; }
    std::string frames() const { return dir + "/frames.chfr"; }
    std::string refs() const { return dir + "/refs.txt"; }
};

std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
    auto is = ssmt::io::open_input(path, false);
    std::vector<std::vector<std::string>> lines;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ss(line);
        std::vector<std::string> tokens;
        std::string tok;
        while (ss >> tok) tokens.push_back(tok);
        lines.push_back(std::move(tokens));
    }
    return lines;
}

void write_text(const std::string& path, const std::string& content) {
    auto os = ssmt::io::open_output(path, false);
    os << content;
}

ssmt::Model model_from_checkpoint(const std::string& path) {
    const ssmt::ModelCheckpoint ckpt = ssmt::load_checkpoint(path);
    ssmt::Model model(ckpt.config);
    ssmt::apply_checkpoint(ckpt, model);
    return model;
}

std::vector<int> strip_sentinels(std::vector<int> ids) {
    if (!ids.empty() && ids.front() == ssmt::kBosId) ids.erase(ids.begin());
    if (!ids.empty() && ids.back() == ssmt::kEosId) ids.pop_back();
    return ids;
}

void add_corpus_flags(CLI::App* sub, ssmt::CorpusConfig& cfg) {
    sub->add_option("--n-st", cfg.n_st, "Speech-translation triplets");
    sub->add_option("--n-mt", cfg.n_mt, "Text-translation pairs");
    sub->add_option("--vocab-size", cfg.vocab_size, "Vocabulary size incl. reserved ids");
    sub->add_option("--min-len", cfg.min_len, "Minimum sentence length");
    sub->add_option("--max-len", cfg.max_len, "Maximum sentence length");
    sub->add_option("--min-frames-per-token", cfg.min_frames_per_token);
    sub->add_option("--max-frames-per-token", cfg.max_frames_per_token);
    sub->add_option("--feature-dim", cfg.feature_dim, "Raw frame feature width");
    sub->add_option("--sigma", cfg.noise_sigma, "Frame noise stddev");
    sub->add_option("--seed", cfg.seed, "Corpus seed");
}

void add_model_flags(CLI::App* sub, ssmt::ModelConfig& cfg) {
    sub->add_option("--d-model", cfg.d_model, "Model width");
    sub->add_option("--heads", cfg.n_heads, "Attention heads");
    sub->add_option("--enc-layers", cfg.enc_layers, "Shared encoder layers");
    sub->add_option("--dec-layers", cfg.dec_layers, "Decoder layers");
    sub->add_option("--proj-layers", cfg.proj_layers, "Semantic projection layers");
    sub->add_option("--ffn-dim", cfg.ffn_dim, "Feed-forward width");
    sub->add_option("--memory-slots", cfg.memory_slots, "Semantic memory slots");
    sub->add_option("--feature-dim", cfg.feature_dim, "Raw frame feature width");
    sub->add_option("--frame-hidden", cfg.frame_hidden, "Frame encoder hidden channels");
    sub->add_option("--d-feat", cfg.d_feat, "Frame encoder output channels");
    sub->add_option("--cnn-hidden", cfg.cnn_hidden, "Downsampler hidden channels");
    sub->add_option("--init-seed", cfg.init_seed, "Parameter init seed");
}

void add_train_flags(CLI::App* sub, ssmt::TrainConfig& cfg) {
    sub->add_option("--updates", cfg.max_updates, "Optimizer updates");
    sub->add_option("--warmup", cfg.warmup, "Warmup updates");
    sub->add_option("--peak-lr", cfg.peak_lr, "Peak learning rate");
    sub->add_option("--token-cap", cfg.token_cap, "Max target tokens per text batch");
    sub->add_option("--frame-cap", cfg.frame_cap, "Max frames per speech batch");
    sub->add_option("--label-smoothing", cfg.label_smoothing, "Label smoothing mass");
    sub->add_option("--clip-norm", cfg.clip_norm, "Global gradient-norm clip (0 = off)");
    sub->add_option("--checkpoint-every", cfg.checkpoint_every, "Checkpoint cadence (0 = off)");
    sub->add_option("--seed", cfg.seed, "Batch shuffling seed");
}

void setup_gen_data(CLI::App& app) {
    auto sub = app.add_subcommand("gen-data", "Generate a synthetic paired corpus");
    auto cfg = std::make_shared<ssmt::CorpusConfig>();
    auto out_dir = std::make_shared<std::string>();
    add_corpus_flags(sub, *cfg);
    sub->add_option("--out-dir", *out_dir, "Output directory")->required();
    sub->callback([cfg, out_dir] {
        cfg->validate();
        const ssmt::SyntheticCorpus corpus = ssmt::generate_synthetic_corpus(*cfg);
        fs::create_directories(*out_dir);
        DataPaths paths{*out_dir};
        ssmt::write_vocab(paths.vocab(), corpus.vocab);
        ssmt::write_mt_corpus(paths.mt(), corpus.mt, corpus.vocab);
        ssmt::write_st_corpus(paths.st(), paths.frames(), corpus.st, corpus.vocab);
        std::string refs;
        for (const auto& t : corpus.st) refs += corpus.vocab.decode(t.y.ids) + "\n";
        write_text(paths.refs(), refs);
        std::printf("wrote %zu st triplets, %zu mt pairs to %s\n", corpus.st.size(),
                    corpus.mt.size(), out_dir->c_str());
    });
}

void setup_pretrain(CLI::App& app) {
    auto sub = app.add_subcommand("pretrain", "Text-translation pretraining");
    auto data_dir = std::make_shared<std::string>();
    auto out_dir = std::make_shared<std::string>();
    auto mcfg = std::make_shared<ssmt::ModelConfig>();
    auto tcfg = std::make_shared<ssmt::TrainConfig>();
    tcfg->stage = ssmt::Stage::pretrain_mt;
    sub->add_option("--data-dir", *data_dir, "Corpus directory")->required();
    sub->add_option("--out-dir", *out_dir, "Checkpoint directory")->required();
    add_model_flags(sub, *mcfg);
    add_train_flags(sub, *tcfg);
    sub->callback([data_dir, out_dir, mcfg, tcfg] {
        DataPaths paths{*data_dir};
        const ssmt::Vocabulary vocab = ssmt::read_vocab(paths.vocab());
        const auto pairs = ssmt::read_mt_corpus(paths.mt(), vocab);
        mcfg->vocab_size = vocab.size();
        ssmt::Model model(*mcfg);
        const ssmt::TrainResult result = ssmt::pretrain_mt(model, pairs, {}, *tcfg);
        fs::create_directories(*out_dir);
        ssmt::save_checkpoint(*out_dir + "/pretrained.ckpt", result.checkpoints.back());
        std::printf("pretrained %ld updates, dev loss %.6f\n", tcfg->max_updates,
                    result.final_dev_loss);
    });
}

void setup_finetune(CLI::App& app) {
    auto sub = app.add_subcommand("finetune", "Multitask speech-translation fine-tuning");
    auto data_dir = std::make_shared<std::string>();
    auto out_dir = std::make_shared<std::string>();
    auto init = std::make_shared<std::string>();
    auto external_mt = std::make_shared<std::string>();
    auto tcfg = std::make_shared<ssmt::TrainConfig>();
    tcfg->stage = ssmt::Stage::finetune_multitask;
    sub->add_option("--data-dir", *data_dir, "Corpus directory")->required();
    sub->add_option("--out-dir", *out_dir, "Checkpoint directory")->required();
    sub->add_option("--init", *init, "Starting checkpoint")->required();
    sub->add_option("--external-mt", *external_mt, "Extra text-pair corpus for the MT task");
    sub->add_option("--lambda-st", tcfg->weights.st, "Translation loss weight");
    sub->add_option("--lambda-mt", tcfg->weights.mt, "Text-task loss weight");
    sub->add_option("--lambda-ctr", tcfg->weights.ctr, "Contrastive loss weight");
    sub->add_option("--tau", tcfg->tau, "Contrastive temperature");
    sub->add_flag("--freeze-projection", tcfg->freeze_projection, "Freeze the projection");
    sub->add_flag("--freeze-decoder", tcfg->freeze_decoder, "Freeze the decoder");
    add_train_flags(sub, *tcfg);
    sub->callback([data_dir, out_dir, init, external_mt, tcfg] {
        DataPaths paths{*data_dir};
        const ssmt::Vocabulary vocab = ssmt::read_vocab(paths.vocab());
        const auto st = ssmt::read_st_corpus(paths.st(), paths.frames(), vocab);
        std::vector<ssmt::MTPair> external;
        if (!external_mt->empty()) external = ssmt::read_mt_corpus(*external_mt, vocab);
        ssmt::Model model = model_from_checkpoint(*init);
        const ssmt::TrainResult result = ssmt::finetune_multitask(model, st, external, {}, *tcfg);
        fs::create_directories(*out_dir);
        ssmt::save_checkpoint(*out_dir + "/finetuned.ckpt", result.checkpoints.back());
        std::printf("finetuned %ld updates, dev loss %.6f\n", tcfg->max_updates,
                    result.final_dev_loss);
    });
}

void setup_translate(CLI::App& app) {
    auto sub = app.add_subcommand("translate", "Decode translations for a speech corpus");
    auto ckpt = std::make_shared<std::string>();
    auto data_dir = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto max_len = std::make_shared<int>(64);
    auto beam = std::make_shared<int>(0);
    sub->add_option("--ckpt", *ckpt, "Model checkpoint")->required();
    sub->add_option("--data-dir", *data_dir, "Corpus directory")->required();
    sub->add_option("--out", *out, "Hypothesis output file")->required();
    sub->add_option("--max-len", *max_len, "Maximum generated tokens");
    sub->add_option("--beam", *beam, "Beam width (0 = greedy)");
    sub->callback([ckpt, data_dir, out, max_len, beam] {
        const ssmt::Model model = model_from_checkpoint(*ckpt);
        DataPaths paths{*data_dir};
        const ssmt::Vocabulary vocab = ssmt::read_vocab(paths.vocab());
        const auto st = ssmt::read_st_corpus(paths.st(), paths.frames(), vocab);
        const ssmt::SearchSpec spec = model.search_spec(*max_len);
        std::string lines;
        for (const auto& t : st) {
            const ssmt::SemanticMemory memory = model.project(model.encode_speech(t.x.frames));
            const auto step = model.step_fn(memory);
            const std::vector<int> ids = *beam > 0
                                             ? ssmt::beam_search(step, spec, *beam).ids
                                             : ssmt::greedy_decode(step, spec);
            lines += vocab.decode(strip_sentinels(ids)) + "\n";
        }
        write_text(*out, lines);
        std::printf("translated %zu samples to %s\n", st.size(), out->c_str());
    });
}

void setup_score(CLI::App& app) {
    auto sub = app.add_subcommand("score", "Corpus BLEU between hypothesis and reference files");
    auto hyp = std::make_shared<std::string>();
    auto ref = std::make_shared<std::string>();
    sub->add_option("--hyp", *hyp, "Hypothesis file, one line per sample")->required();
    sub->add_option("--ref", *ref, "Reference file, one line per sample")->required();
    sub->callback([hyp, ref] {
        const ssmt::BleuReport report =
            ssmt::bleu(read_token_lines(*hyp), read_token_lines(*ref));
        std::printf("%.1f\n", report.score);
    });
}

void setup_export_memories(CLI::App& app) {
    auto sub = app.add_subcommand("export-memories",
                                  "Dump paired semantic memories with 2-D PCA coordinates");
    auto ckpt = std::make_shared<std::string>();
    auto data_dir = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto n_samples = std::make_shared<int>(100);
    sub->add_option("--ckpt", *ckpt, "Model checkpoint")->required();
    sub->add_option("--data-dir", *data_dir, "Corpus directory")->required();
    sub->add_option("--out", *out, "Output table")->required();
    sub->add_option("--n-samples", *n_samples, "Samples to dump (max 100)");
    sub->callback([ckpt, data_dir, out, n_samples] {
        const ssmt::Model model = model_from_checkpoint(*ckpt);
        DataPaths paths{*data_dir};
        const ssmt::Vocabulary vocab = ssmt::read_vocab(paths.vocab());
        const auto st = ssmt::read_st_corpus(paths.st(), paths.frames(), vocab);
        const ssmt::MemoryDump dump = ssmt::export_memories(model, st, *n_samples);
        write_text(*out, ssmt::memory_dump_to_text(dump));
        std::printf("exported %zu paired memories to %s\n", dump.sample_ids.size(),
                    out->c_str());
    });
}

void setup_export_attention(CLI::App& app) {
    auto sub = app.add_subcommand("export-attention",
                                  "Dump final-layer projection attention for one sample");
    auto ckpt = std::make_shared<std::string>();
    auto data_dir = std::make_shared<std::string>();
    auto out_dir = std::make_shared<std::string>();
    auto sample = std::make_shared<int>(0);
    sub->add_option("--ckpt", *ckpt, "Model checkpoint")->required();
    sub->add_option("--data-dir", *data_dir, "Corpus directory")->required();
    sub->add_option("--out-dir", *out_dir, "Output directory")->required();
    sub->add_option("--sample", *sample, "Sample index");
    sub->callback([ckpt, data_dir, out_dir, sample] {
        const ssmt::Model model = model_from_checkpoint(*ckpt);
        DataPaths paths{*data_dir};
        const ssmt::Vocabulary vocab = ssmt::read_vocab(paths.vocab());
        const auto st = ssmt::read_st_corpus(paths.st(), paths.frames(), vocab);
        if (*sample < 0 || static_cast<size_t>(*sample) >= st.size()) {
            throw std::runtime_error("sample index " + std::to_string(*sample) +
                                     " outside corpus of " + std::to_string(st.size()));
        }
        const ssmt::AttentionDump dump =
            ssmt::export_attention(model, st[static_cast<size_t>(*sample)]);
        fs::create_directories(*out_dir);
        write_text(*out_dir + "/attention.tsv", ssmt::attention_dump_to_text(dump));
        write_text(*out_dir + "/products.tsv", ssmt::attention_products_to_text(dump));
        std::printf("exported attention for sample %d to %s\n", *sample, out_dir->c_str());
    });
}

void setup_ablate(CLI::App& app) {
    auto sub = app.add_subcommand("ablate", "Run a seeded ablation grid");
    auto suite_name = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto acfg = std::make_shared<ssmt::AblationConfig>();
    acfg->corpus.n_st = 24;
    acfg->corpus.n_mt = 48;
    acfg->corpus.vocab_size = 16;
    acfg->corpus.feature_dim = 4;
    acfg->model.vocab_size = 16;
    acfg->model.d_model = 16;
    acfg->model.n_heads = 2;
    acfg->model.enc_layers = 1;
    acfg->model.dec_layers = 1;
    acfg->model.proj_layers = 1;
    acfg->model.ffn_dim = 16;
    acfg->model.memory_slots = 2;
    acfg->model.feature_dim = 4;
    acfg->pretrain.stage = ssmt::Stage::pretrain_mt;
    acfg->pretrain.max_updates = 60;
    acfg->pretrain.warmup = 20;
    acfg->pretrain.peak_lr = 1e-3;
    acfg->pretrain.checkpoint_every = 0;
    acfg->finetune.stage = ssmt::Stage::finetune_multitask;
    acfg->finetune.max_updates = 60;
    acfg->finetune.warmup = 20;
    acfg->finetune.peak_lr = 1e-3;
    acfg->finetune.checkpoint_every = 0;
    sub->add_option("--suite", *suite_name, "freezing | multitask | mt_scaling")
        ->required()
        ->check(CLI::IsMember({"freezing", "multitask", "mt_scaling"}));
    sub->add_option("--out", *out, "Results table file")->required();
    sub->add_option("--n-st", acfg->corpus.n_st, "Training triplets");
    sub->add_option("--n-mt", acfg->corpus.n_mt, "Pretraining pairs");
    sub->add_option("--eval-st", acfg->eval_st, "Evaluation triplets");
    sub->add_option("--eval-max-len", acfg->eval_max_len, "Decode length cap");
    sub->add_option("--seed", acfg->corpus.seed, "Corpus seed");
    sub->add_option("--pretrain-updates", acfg->pretrain.max_updates);
    sub->add_option("--finetune-updates", acfg->finetune.max_updates);
    sub->add_option("--d-model", acfg->model.d_model, "Model width");
    sub->add_option("--memory-slots", acfg->model.memory_slots, "Semantic memory slots");
    sub->callback([suite_name, out, acfg] {
        acfg->model.vocab_size = acfg->corpus.vocab_size;
        ssmt::AblationSuite suite = ssmt::AblationSuite::freezing;
        if (*suite_name == "multitask") suite = ssmt::AblationSuite::multitask;
        if (*suite_name == "mt_scaling") suite = ssmt::AblationSuite::mt_scaling;
        const ssmt::AblationResult result = ssmt::run_ablation(suite, *acfg);
        write_text(*out, result.to_text());
        std::printf("wrote %zu-row %s table to %s\n", result.rows.size(), suite_name->c_str(),
                    out->c_str());
    });
}

void setup_average_ckpt(CLI::App& app) {
    auto sub = app.add_subcommand("average-ckpt", "Elementwise-average checkpoints");
    auto out = std::make_shared<std::string>();
    auto inputs = std::make_shared<std::vector<std::string>>();
    sub->add_option("--out", *out, "Averaged checkpoint path")->required();
    sub->add_option("inputs", *inputs, "Checkpoints to average")->required()->expected(-1);
    sub->callback([out, inputs] {
        std::vector<ssmt::ModelCheckpoint> window;
        for (const auto& path : *inputs) window.push_back(ssmt::load_checkpoint(path));
        ssmt::save_checkpoint(*out, ssmt::average_checkpoints(window));
        std::printf("averaged %zu checkpoints into %s\n", window.size(), out->c_str());
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"shared-semantic-memory speech translation toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "",
                   "TOML config with [subcommand] sections; flags override");
    setup_gen_data(app);
    setup_pretrain(app);
    setup_finetune(app);
    setup_translate(app);
    setup_score(app);
    setup_export_memories(app);
    setup_export_attention(app);
    setup_ablate(app);
    setup_average_ckpt(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
