// Command-line front end: corpus generation, training, retrieval evaluation,
// embedding dumps, and the fusion-strategy ablation.
//
// Exit codes: 0 success, 1 usage error, 2 validation error (bad config,
// contract, shape, or I/O), 3 runtime failure (non-finite numerics or other
// unexpected errors).
//
// Artifacts never embed timestamps or host details, so identical invocations
// produce byte-identical outputs.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "stfusion/checkpoint.hpp"
#include "stfusion/data.hpp"
#include "stfusion/hashing.hpp"
#include "stfusion/retrieval.hpp"
#include "stfusion/runconfig.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Relative output locations are rooted at $STFUSION_OUTPUT_ROOT when set;
// inputs are always used as given.
std::string out_path(const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  const char* root = std::getenv("STFUSION_OUTPUT_ROOT");
  if (!root || !*root) return p;
  return (fs::path(root) / p).string();
}

void ensure_parent_dir(const std::string& file) {
  const fs::path parent = fs::path(file).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

std::ofstream open_out(const std::string& path) {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw stf::IoError("cannot open '" + path + "' for writing");
  return out;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string out;
  std::string preset = "mixed";
  int pairs = 16;
  stf::CorpusSpec overrides;  // filled from flags below
  CLI::Option *o_items = nullptr, *o_h = nullptr, *o_w = nullptr, *o_c = nullptr,
              *o_vocab = nullptr, *o_cmin = nullptr, *o_cmax = nullptr,
              *o_oprob = nullptr, *o_omin = nullptr, *o_omax = nullptr,
              *o_rel = nullptr, *o_paint = nullptr, *o_dup = nullptr, *o_seed = nullptr;
  bool paint = true, duplicate = false;
  uint64_t seed = 1;
};

int run_gen(const GenArgs& a) {
  stf::CorpusSpec spec =
      a.preset == "discrimination" ? stf::CorpusSpec::discrimination(a.pairs)
                                   : stf::CorpusSpec::mixed();
  if (a.o_items->count()) spec.n_items = a.overrides.n_items;
  if (a.o_h->count()) spec.image_h = a.overrides.image_h;
  if (a.o_w->count()) spec.image_w = a.overrides.image_w;
  if (a.o_c->count()) spec.image_c = a.overrides.image_c;
  if (a.o_vocab->count()) spec.vocab_size = a.overrides.vocab_size;
  if (a.o_cmin->count()) spec.caption_len_min = a.overrides.caption_len_min;
  if (a.o_cmax->count()) spec.caption_len_max = a.overrides.caption_len_max;
  if (a.o_oprob->count()) spec.ocr_probability = a.overrides.ocr_probability;
  if (a.o_omin->count()) spec.ocr_min = a.overrides.ocr_min;
  if (a.o_omax->count()) spec.ocr_max = a.overrides.ocr_max;
  if (a.o_rel->count()) spec.scene_text_relevance = a.overrides.scene_text_relevance;
  if (a.o_paint->count()) spec.paint_ocr = a.paint;
  if (a.o_dup->count()) spec.duplicate_pairs = a.duplicate;
  if (a.o_seed->count()) spec.seed = a.seed;

  spec.validate();  // before any file is touched
  const std::vector<stf::CorpusItem> items = stf::generate_corpus(spec);
  const std::string path = out_path(a.out);
  ensure_parent_dir(path);
  stf::write_corpus(path, items);
  std::cout << "wrote " << items.size() << " items to " << path << " (hash "
            << stf::file_hash_hex(path) << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

stf::RunConfig assemble_config(const std::string& config_file,
                               const std::vector<std::string>& sets) {
  stf::RunConfig cfg;
  if (!config_file.empty()) cfg = stf::RunConfig::from_file(config_file);
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      throw stf::ConfigError("--set needs key=value, got '" + kv + "'");
    }
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

struct TrainArgs {
  std::string config_file;
  std::vector<std::string> sets;
  std::string corpus, out, resume, strategy;
  int steps = 0, batch_size = 0;
  uint64_t seed = 0;
  double lr = 0.0, alpha = 0.0;
  CLI::Option *o_corpus = nullptr, *o_out = nullptr, *o_resume = nullptr,
              *o_strategy = nullptr, *o_steps = nullptr, *o_batch = nullptr,
              *o_seed = nullptr, *o_lr = nullptr, *o_alpha = nullptr;
};

int run_train(const TrainArgs& a) {
  stf::RunConfig cfg = assemble_config(a.config_file, a.sets);
  if (a.o_corpus->count()) cfg.corpus = a.corpus;
  if (a.o_out->count()) cfg.out_dir = a.out;
  if (a.o_resume->count()) cfg.resume = a.resume;
  if (a.o_strategy->count()) cfg.strategy = stf::fusion_strategy_from_string(a.strategy);
  if (a.o_steps->count()) cfg.steps = a.steps;
  if (a.o_batch->count()) cfg.batch_size = a.batch_size;
  if (a.o_seed->count()) cfg.seed = a.seed;
  if (a.o_lr->count()) cfg.train.lr = a.lr;
  if (a.o_alpha->count()) cfg.train.alpha = a.alpha;

  if (cfg.corpus.empty()) throw stf::ConfigError("train needs a corpus (--corpus)");
  if (cfg.out_dir.empty()) throw stf::ConfigError("train needs an output directory (--out)");
  cfg.validate();

  const std::vector<stf::CorpusItem> corpus = stf::load_corpus(cfg.corpus);
  const stf::Vocab vocab = stf::build_vocab(corpus);

  stf::ModelParams params;
  stf::AdamState opt;
  uint64_t start_step = 0;
  if (!cfg.resume.empty()) {
    stf::Checkpoint ck = stf::load_checkpoint(cfg.resume);
    if (!ck.opt) {
      throw stf::ConfigError("checkpoint '" + cfg.resume +
                             "' lacks optimizer state and cannot seed training");
    }
    if (ck.vocab.words() != vocab.words()) {
      throw stf::ConfigError("checkpoint vocabulary does not match corpus '" + cfg.corpus + "'");
    }
    cfg.model = ck.params.config;
    params = std::move(ck.params);
    opt = std::move(*ck.opt);
    start_step = ck.step;
  } else {
    params = stf::ModelParams::init(cfg.model, vocab.size(), cfg.seed, cfg.sigma_init);
    opt = stf::AdamState::init(params);
  }

  const std::string dir = out_path(cfg.out_dir);
  fs::create_directories(dir);

  {
    std::ofstream cf = open_out(dir + "/config.txt");
    cf << cfg.dump();
  }
  const std::string corpus_hash = stf::file_hash_hex(cfg.corpus);

  std::ofstream metrics = open_out(dir + "/metrics.jsonl");
  metrics << json{{"record", "run"},
                  {"config_hash", cfg.hash()},
                  {"corpus_hash", corpus_hash},
                  {"n_params", params.parameter_count()},
                  {"start_step", start_step}}
                 .dump()
          << std::endl;

  const size_t per_epoch = stf::make_batches(corpus, cfg.batch_size, cfg.seed, 0).size();
  if (per_epoch == 0) {
    throw stf::ConfigError("corpus '" + cfg.corpus + "' is too small for batch_size " +
                           std::to_string(cfg.batch_size));
  }

  stf::ModelParams best_params = params;
  stf::AdamState best_opt = opt;
  uint64_t best_step = start_step;
  double best_total = std::numeric_limits<double>::infinity();

  std::vector<stf::Batch> batches;
  int cached_epoch = -1;
  for (uint64_t s = start_step; s < static_cast<uint64_t>(cfg.steps); ++s) {
    const int epoch = static_cast<int>(s / per_epoch);
    if (epoch != cached_epoch) {
      batches = stf::make_batches(corpus, cfg.batch_size, cfg.seed, epoch);
      cached_epoch = epoch;
    }
    const stf::Batch& batch = batches[s % per_epoch];
    const stf::LossParts parts = stf::train_step(params, vocab, corpus, batch, cfg.train,
                                                 opt, cfg.strategy);
    json line = {{"record", "step"},
                 {"step", s + 1},
                 {"total", parts.total},
                 {"itc", parts.itc},
                 {"sigma", parts.sigma}};
    line["ftc"] = parts.ftc ? json(*parts.ftc) : json(nullptr);
    metrics << line.dump() << std::endl;
    if (parts.total < best_total) {
      best_total = parts.total;
      best_params = params;
      best_opt = opt;
      best_step = s + 1;
    }
    if ((s + 1) % 100 == 0 || s + 1 == static_cast<uint64_t>(cfg.steps)) {
      std::cout << "step " << (s + 1) << "/" << cfg.steps << " total=" << parts.total
                << " sigma=" << parts.sigma << "\n";
    }
  }

  stf::save_checkpoint(dir + "/checkpoint_final.bin", params, vocab, &opt,
                       static_cast<uint64_t>(cfg.steps) > start_step
                           ? static_cast<uint64_t>(cfg.steps)
                           : start_step);
  stf::save_checkpoint(dir + "/checkpoint_best.bin", best_params, vocab, &best_opt,
                       best_step);
  std::cout << "artifacts in " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval / embed

struct EvalArgs {
  std::string checkpoint, corpus, out;
  std::string mode = "scene_text_aware";
  std::string strategy = "fusion_token";
  bool oracle = false;
};

int run_eval(const EvalArgs& a) {
  const stf::Checkpoint ck = stf::load_checkpoint(a.checkpoint);
  const std::vector<stf::CorpusItem> corpus = stf::load_corpus(a.corpus);
  const stf::EvalMode mode = stf::eval_mode_from_string(a.mode);
  const stf::FusionStrategy strategy = stf::fusion_strategy_from_string(a.strategy);

  stf::ForwardCounters counters;
  const stf::RetrievalReport rep =
      stf::evaluate(ck.params, ck.vocab, corpus, mode, strategy, &counters, a.oracle);

  const std::string dir = out_path(a.out);
  fs::create_directories(dir);
  stf::write_report_lines(dir + "/report.jsonl", rep, stf::file_hash_hex(a.checkpoint),
                          stf::file_hash_hex(a.corpus));
  const std::string table = stf::report_table(rep);
  {
    std::ofstream tf = open_out(dir + "/report.txt");
    tf << table;
  }
  std::cout << table;
  std::cout << "forwards: visual=" << counters.visual << " scene=" << counters.scene
            << " text=" << counters.text << "\n";
  return 0;
}

int run_embed(const EvalArgs& a) {
  const stf::Checkpoint ck = stf::load_checkpoint(a.checkpoint);
  const std::vector<stf::CorpusItem> corpus = stf::load_corpus(a.corpus);
  const stf::EvalMode mode = stf::eval_mode_from_string(a.mode);
  const stf::FusionStrategy strategy = stf::fusion_strategy_from_string(a.strategy);

  const std::string dir = out_path(a.out);
  fs::create_directories(dir);
  const stf::EmbeddingSet images = stf::embed_images(ck.params, ck.vocab, corpus, mode, strategy);
  std::vector<int> owner;
  const stf::EmbeddingSet texts = stf::embed_captions(ck.params, ck.vocab, corpus, &owner);
  stf::write_embedding_set(dir + "/images.bin", images);
  stf::write_embedding_set(dir + "/texts.bin", texts);
  std::cout << "wrote " << images.ids.size() << " image and " << texts.ids.size()
            << " text embeddings to " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string config_file;
  std::vector<std::string> sets;
  std::string corpus, out;
  std::vector<std::string> strategies = {"fusion_token", "late_fusion", "vision_only"};
  int steps = 0, batch_size = 0;
  uint64_t seed = 0;
  CLI::Option *o_corpus = nullptr, *o_out = nullptr, *o_steps = nullptr,
              *o_batch = nullptr, *o_seed = nullptr;
};

int run_ablate(const AblateArgs& a) {
  stf::RunConfig cfg = assemble_config(a.config_file, a.sets);
  if (a.o_corpus->count()) cfg.corpus = a.corpus;
  if (a.o_out->count()) cfg.out_dir = a.out;
  if (a.o_steps->count()) cfg.steps = a.steps;
  if (a.o_batch->count()) cfg.batch_size = a.batch_size;
  if (a.o_seed->count()) cfg.seed = a.seed;
  if (cfg.corpus.empty()) throw stf::ConfigError("ablate needs a corpus (--corpus)");
  if (cfg.out_dir.empty()) throw stf::ConfigError("ablate needs an output directory (--out)");
  cfg.validate();

  const std::vector<stf::CorpusItem> corpus = stf::load_corpus(cfg.corpus);
  const stf::Vocab vocab = stf::build_vocab(corpus);
  const std::string corpus_hash = stf::file_hash_hex(cfg.corpus);

  const size_t per_epoch = stf::make_batches(corpus, cfg.batch_size, cfg.seed, 0).size();
  if (per_epoch == 0) {
    throw stf::ConfigError("corpus '" + cfg.corpus + "' is too small for batch_size " +
                           std::to_string(cfg.batch_size));
  }

  const std::string dir = out_path(cfg.out_dir);
  fs::create_directories(dir);
  std::ofstream lines = open_out(dir + "/ablation.jsonl");
  std::ostringstream table;
  table << "strategy       eval_mode          i2t-R@1  t2i-R@1  t2i-med\n";

  for (const std::string& name : a.strategies) {
    const stf::FusionStrategy strategy = stf::fusion_strategy_from_string(name);
    const stf::EvalMode mode = strategy == stf::FusionStrategy::vision_only
                                   ? stf::EvalMode::scene_text_free
                                   : stf::EvalMode::scene_text_aware;
    stf::ModelParams params =
        stf::ModelParams::init(cfg.model, vocab.size(), cfg.seed, cfg.sigma_init);
    stf::AdamState opt = stf::AdamState::init(params);
    std::vector<stf::Batch> batches;
    int cached_epoch = -1;
    for (uint64_t s = 0; s < static_cast<uint64_t>(cfg.steps); ++s) {
      const int epoch = static_cast<int>(s / per_epoch);
      if (epoch != cached_epoch) {
        batches = stf::make_batches(corpus, cfg.batch_size, cfg.seed, epoch);
        cached_epoch = epoch;
      }
      stf::train_step(params, vocab, corpus, batches[s % per_epoch], cfg.train, opt,
                      strategy);
    }
    const stf::RetrievalReport rep = stf::evaluate(params, vocab, corpus, mode, strategy);

    json row = {{"record", "ablation"},
                {"strategy", name},
                {"eval_mode", stf::to_string(mode)},
                {"corpus_hash", corpus_hash},
                {"steps", cfg.steps},
                {"i2t_median", rep.image_to_text.median},
                {"t2i_median", rep.text_to_image.median}};
    json i2t, t2i;
    for (int k : stf::kReportKs) {
      i2t[std::to_string(k)] = rep.image_to_text.recall.at(k);
      t2i[std::to_string(k)] = rep.text_to_image.recall.at(k);
    }
    row["i2t_recall"] = std::move(i2t);
    row["t2i_recall"] = std::move(t2i);
    lines << row.dump() << std::endl;

    table << name;
    for (size_t i = name.size(); i < 15; ++i) table << ' ';
    table << stf::to_string(mode);
    for (size_t i = stf::to_string(mode).size(); i < 19; ++i) table << ' ';
    table.setf(std::ios::fixed);
    table.precision(4);
    table << rep.image_to_text.recall.at(1) << "   " << rep.text_to_image.recall.at(1)
          << "   ";
    table.precision(1);
    table << rep.text_to_image.median << "\n";
    std::cout << "ablation: " << name << " done\n";
  }

  {
    std::ofstream tf = open_out(dir + "/ablation.txt");
    tf << table.str();
  }
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene-text fusion retrieval toolkit"};
  app.require_subcommand(1);
  const std::vector<std::string> kStrategies = {"fusion_token", "late_fusion", "vision_only"};
  const std::vector<std::string> kModes = {"scene_text_aware", "scene_text_free"};

  GenArgs g;
  CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
  gen->add_option("--out", g.out, "Corpus output path (JSON lines)")->required();
  gen->add_option("--preset", g.preset, "Corpus preset")
      ->check(CLI::IsMember({"mixed", "discrimination"}));
  gen->add_option("--pairs", g.pairs, "Image pairs (discrimination preset)");
  g.o_items = gen->add_option("--items", g.overrides.n_items, "Item count");
  g.o_h = gen->add_option("--image-h", g.overrides.image_h, "Image height");
  g.o_w = gen->add_option("--image-w", g.overrides.image_w, "Image width");
  g.o_c = gen->add_option("--image-c", g.overrides.image_c, "Image channels");
  g.o_vocab = gen->add_option("--vocab", g.overrides.vocab_size, "Generator word pool");
  g.o_cmin = gen->add_option("--caption-min", g.overrides.caption_len_min, "Min caption words");
  g.o_cmax = gen->add_option("--caption-max", g.overrides.caption_len_max, "Max caption words");
  g.o_oprob = gen->add_option("--ocr-prob", g.overrides.ocr_probability,
                              "Scene text probability per item");
  g.o_omin = gen->add_option("--ocr-min", g.overrides.ocr_min, "Min scene tokens");
  g.o_omax = gen->add_option("--ocr-max", g.overrides.ocr_max, "Max scene tokens");
  g.o_rel = gen->add_option("--relevance", g.overrides.scene_text_relevance,
                            "Chance scene text comes from the caption");
  g.o_paint = gen->add_flag("--paint,!--no-paint", g.paint, "Paint words into pixels");
  g.o_dup = gen->add_flag("--duplicate-pairs", g.duplicate, "Pixel-identical item pairs");
  g.o_seed = gen->add_option("--seed", g.seed, "Generator seed");

  TrainArgs t;
  CLI::App* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", t.config_file, "key=value config file");
  train->add_option("--set", t.sets, "Config override key=value (repeatable)");
  t.o_corpus = train->add_option("--corpus", t.corpus, "Training corpus path");
  t.o_out = train->add_option("--out", t.out, "Artifact directory");
  t.o_resume = train->add_option("--resume", t.resume, "Checkpoint to resume from");
  t.o_strategy = train->add_option("--strategy", t.strategy, "Fusion strategy")
                     ->check(CLI::IsMember(kStrategies));
  t.o_steps = train->add_option("--steps", t.steps, "Total optimizer steps");
  t.o_batch = train->add_option("--batch-size", t.batch_size, "Items per batch");
  t.o_seed = train->add_option("--seed", t.seed, "Init/batching seed");
  t.o_lr = train->add_option("--lr", t.lr, "Learning rate");
  t.o_alpha = train->add_option("--alpha", t.alpha, "Loss mix weight");

  EvalArgs e;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate retrieval on a corpus");
  eval->add_option("--checkpoint", e.checkpoint, "Model checkpoint")->required();
  eval->add_option("--corpus", e.corpus, "Evaluation corpus")->required();
  eval->add_option("--out", e.out, "Report directory")->required();
  eval->add_option("--mode", e.mode, "Gallery embedding mode")->check(CLI::IsMember(kModes));
  eval->add_option("--strategy", e.strategy, "Fusion strategy")
      ->check(CLI::IsMember(kStrategies));
  eval->add_flag("--oracle", e.oracle, "Use the brute-force ranking oracle");

  EvalArgs m;
  CLI::App* embed = app.add_subcommand("embed", "Dump image and caption embeddings");
  embed->add_option("--checkpoint", m.checkpoint, "Model checkpoint")->required();
  embed->add_option("--corpus", m.corpus, "Corpus to embed")->required();
  embed->add_option("--out", m.out, "Output directory")->required();
  embed->add_option("--mode", m.mode, "Gallery embedding mode")->check(CLI::IsMember(kModes));
  embed->add_option("--strategy", m.strategy, "Fusion strategy")
      ->check(CLI::IsMember(kStrategies));

  AblateArgs b;
  CLI::App* ablate = app.add_subcommand("ablate", "Train and score each fusion strategy");
  ablate->add_option("--config", b.config_file, "key=value config file");
  ablate->add_option("--set", b.sets, "Config override key=value (repeatable)");
  b.o_corpus = ablate->add_option("--corpus", b.corpus, "Training corpus path");
  b.o_out = ablate->add_option("--out", b.out, "Artifact directory");
  ablate->add_option("--strategy", b.strategies, "Strategies to compare (repeatable)")
      ->check(CLI::IsMember(kStrategies));
  b.o_steps = ablate->add_option("--steps", b.steps, "Optimizer steps per strategy");
  b.o_batch = ablate->add_option("--batch-size", b.batch_size, "Items per batch");
  b.o_seed = ablate->add_option("--seed", b.seed, "Shared init/batching seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return run_gen(g);
    if (train->parsed()) return run_train(t);
    if (eval->parsed()) return run_eval(e);
    if (embed->parsed()) return run_embed(m);
    if (ablate->parsed()) return run_ablate(b);
    std::cerr << "error: no subcommand selected\n";
    return 1;
  } catch (const stf::NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return 3;
  } catch (const stf::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "unexpected error: " << err.what() << "\n";
    return 3;
  }
}
