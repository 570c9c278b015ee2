#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ldgm/checkpoint.hpp"
#include "ldgm/data.hpp"
#include "ldgm/error.hpp"
#include "ldgm/eval.hpp"
#include "ldgm/pipeline.hpp"
#include "ldgm/runtime.hpp"
#include "ldgm/service.hpp"
#include "ldgm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ldgm;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

struct Flags {
  std::string config;
  std::string corpus;
  std::string checkpoint;
  std::string task = "gen-t";
  std::string strategy;
  std::string noise;
  std::string level;
  long steps = 0;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  bool clamp = false;
  bool trajectory = false;
  std::string out;
  std::string format = "json";
  int port = 8080;
  // Extras beyond the core flag set.
  long count = 0;
  std::string input;
  int fid_steps = 0;
  std::string host = "127.0.0.1";
  int workers = 2;
  int top_k = 13;
  int max_elements = 25;
};

void fail(int code, std::string_view kind, const std::string& message, const std::string& path = {}) {
  json err = {{"code", kind}, {"message", message}};
  if (!path.empty()) err["path"] = path;
  std::cerr << json{{"error", err}}.dump() << std::endl;
  std::exit(code);
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Usage:
    case ErrorCode::Validation:
    case ErrorCode::Schedule:
      return kExitUsage;
    case ErrorCode::Vocabulary:
    case ErrorCode::Parse:
    case ErrorCode::Data:
    case ErrorCode::Checkpoint:
    case ErrorCode::IncompleteLayout:
    case ErrorCode::Domain:
      return kExitData;
    default:
      return kExitInternal;
  }
}

/// Flags given on the command line, for artifact headers.
json recorded_flags(const CLI::App& sub) {
  json flags = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->count() == 0 || opt->get_name() == "--help") continue;
    const auto& results = opt->results();
    const std::string name = opt->get_name();
    if (opt->get_type_size() == 0)
      flags[name] = true;
    else
      flags[name] = results.empty() ? json() : json(results.back());
  }
  return flags;
}

json header_for(const CLI::App& sub, std::uint64_t seed) {
  return {{"command", sub.get_name()}, {"flags", recorded_flags(sub)}, {"seed", seed}};
}

void write_json(const std::string& out, const json& doc) {
  if (out.empty() || out == "-") {
    std::cout << doc.dump(2) << std::endl;
    return;
  }
  const fs::path path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::Data, "cannot write " + out);
  f << doc.dump(2) << '\n';
}

void require(const std::string& value, std::string_view flag) {
  if (value.empty()) throw Error(ErrorCode::Usage, std::string(flag) + " is required");
}

Corpus load_corpus(const std::string& path) {
  require(path, "--corpus");
  return read_corpus(path);
}

TrainConfig load_train_config(const Flags& f, std::optional<TrainConfig> fallback) {
  TrainConfig cfg = fallback.value_or(TrainConfig{});
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw Error(ErrorCode::Data, "cannot read config " + f.config);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Parse, std::string("config is not valid JSON: ") + e.what());
    }
    cfg = train_config_from_json(doc);
  }
  if (!f.strategy.empty()) cfg.strategy = strategy_from_string(f.strategy);
  if (!f.noise.empty()) cfg.noise.geometry = noise_from_string(f.noise);
  if (!f.level.empty()) cfg.level = level_from_string(f.level);
  cfg.seed = f.seed;
  cfg.validate();
  return cfg;
}

std::vector<std::size_t> source_index(const Corpus& corpus, long count) {
  std::vector<std::size_t> index = corpus.splits.test.empty() ? corpus.splits.train : corpus.splits.test;
  if (index.empty())
    for (std::size_t i = 0; i < corpus.layouts.size(); ++i) index.push_back(i);
  if (count > 0 && static_cast<std::size_t>(count) < index.size()) index.resize(static_cast<std::size_t>(count));
  return index;
}

// ---------------------------------------------------------------------------

void cmd_synth(const Flags& f, const CLI::App& sub) {
  require(f.out, "--out");
  SynthConfig cfg;
  if (f.count > 0) cfg.n_layouts = static_cast<int>(f.count);
  cfg.seed = f.seed;
  Corpus corpus = synth_corpus(cfg);
  corpus.manifest.filters["generator"] = header_for(sub, f.seed);
  write_corpus(f.out, corpus);
  std::cout << json{{"written", f.out}, {"layouts", corpus.layouts.size()}}.dump() << std::endl;
}

void cmd_ingest(const Flags& f, const CLI::App& sub) {
  require(f.corpus, "--corpus");
  require(f.out, "--out");
  IngestOptions opts;
  opts.format = format_from_string(f.format);
  opts.top_k = f.top_k;
  opts.max_elements = f.max_elements;
  opts.split_seed = f.seed;
  opts.name = fs::path(f.corpus).filename().string();
  Corpus corpus = ingest(f.corpus, opts);
  corpus.manifest.filters["command"] = header_for(sub, f.seed);
  write_corpus(f.out, corpus);
  std::cout << to_json(corpus.manifest).dump() << std::endl;
}

void cmd_train(const Flags& f, const CLI::App& sub) {
  require(f.out, "--out");
  const Corpus corpus = load_corpus(f.corpus);
  std::optional<Checkpoint> resume;
  if (!f.checkpoint.empty()) resume = load_checkpoint(f.checkpoint);
  TrainConfig cfg = load_train_config(f, resume ? std::optional(stored_train_config(*resume)) : std::nullopt);
  if (f.steps > 0) cfg.total_steps = f.steps;
  if (resume && (resume->quantizer.vocab_sizes() != corpus.quantizer().vocab_sizes()))
    throw Error(ErrorCode::Checkpoint, "checkpoint vocabulary does not match the corpus");

  std::unique_ptr<Denoiser> model =
      resume ? std::move(resume->model) : std::make_unique<Denoiser>(cfg.model(corpus.quantizer()), cfg.seed);
  Trainer trainer(cfg, corpus.quantizer(), *model);
  if (resume && resume->optimizer) restore_optimizer(trainer.optimizer(), *resume->optimizer);

  fs::create_directories(f.out);
  const json extra = {{"train_config", to_json(cfg)}, {"header", header_for(sub, f.seed)}};
  std::ofstream log(fs::path(f.out) / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  double best = std::numeric_limits<double>::infinity();
  const auto train = corpus.subset(corpus.splits.train);
  const auto val = corpus.subset(corpus.splits.val);
  if (train.empty()) throw Error(ErrorCode::Data, "corpus has no training split");

  Trainer::Callbacks cb;
  cb.log = &log;
  cb.on_validation = [&](long step, const LossBreakdown& loss) {
    log << json{{"step", step}, {"validation", {{"l_vlb", loss.l_vlb}, {"l_rec", loss.l_rec}, {"l_total", loss.l_total}}}}
               .dump()
        << '\n';
    if (loss.l_total < best) {
      best = loss.l_total;
      save_checkpoint(fs::path(f.out) / "best.ldgm", *model, corpus.quantizer(), corpus.vocabulary(),
                      &trainer.optimizer(), extra);
    }
  };
  const auto history = trainer.fit(train, val, cb);
  const fs::path last = fs::path(f.out) / "last.ldgm";
  save_checkpoint(last, *model, corpus.quantizer(), corpus.vocabulary(), &trainer.optimizer(), extra);
  json summary = {{"checkpoint", last.string()}, {"steps", trainer.step()}};
  if (!history.empty()) summary["l_vlb"] = history.back().loss.l_vlb;
  if (std::isfinite(best)) summary["best_validation_l_total"] = best;
  std::cout << summary.dump() << std::endl;
}

void cmd_corrupt(const Flags& f, const CLI::App& sub) {
  const Corpus corpus = load_corpus(f.corpus);
  TrainConfig cfg = load_train_config(f, std::nullopt);
  if (f.steps > 0) cfg.schedule.steps = static_cast<int>(f.steps);
  const auto& q = corpus.quantizer();
  const StackSet stacks = build_stacks(q, cfg.schedule, cfg.noise);
  json results = json::array();
  const auto index = source_index(corpus, f.count);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const Layout& source = corpus.layouts[index[i]];
    Rng rng(derive_seed(f.seed, "corrupt", i));
    const TokenSequence seq = tokenize(source);
    const CorruptionPlan plan =
        plan_corruption(seq, cfg.strategy, cfg.level, cfg.select_prob, cfg.schedule.steps, rng);
    const TokenSequence noisy = corrupt(seq, plan, stacks, rng);
    std::vector<AttributeStatus> statuses(noisy.tokens.size(), AttributeStatus::Precise);
    for (std::size_t k = 0; k < noisy.tokens.size(); ++k) {
      const auto& tok = noisy.tokens[k];
      if (plan.selected[k]) statuses[k] = tok.value == q.mask(tok.kind) ? AttributeStatus::Missing : AttributeStatus::Coarse;
    }
    results.push_back({{"source_id", corpus.ids[index[i]]},
                       {"source", layout_to_json(source, q, &corpus.vocabulary())},
                       {"corrupted", layout_to_json(detokenize(noisy, statuses, source.canvas), q, &corpus.vocabulary())},
                       {"timesteps", plan.timestep}});
  }
  json header = header_for(sub, f.seed);
  header["train_config"] = to_json(cfg);
  write_json(f.out, {{"header", header}, {"results", results}});
}

void cmd_generate(const Flags& f, const CLI::App& sub) {
  require(f.checkpoint, "--checkpoint");
  const auto bundle = load_bundle(f.checkpoint);
  const Corpus corpus = load_corpus(f.corpus);
  if (corpus.quantizer().vocab_sizes() != bundle->quantizer().vocab_sizes())
    throw Error(ErrorCode::Data, "corpus quantizer does not match the checkpoint");
  GenerateOptions opts;
  opts.task = task_from_string(f.task);
  if (!f.strategy.empty()) opts.decoder = decoder_from_string(f.strategy);
  opts.steps = static_cast<int>(f.steps);
  if (opts.steps < 0 || opts.steps > 1000) throw Error(ErrorCode::Usage, "--steps must be in [1, 1000]");
  opts.seed = f.seed;
  opts.temperature = f.temperature;
  if (!(opts.temperature >= 0.0)) throw Error(ErrorCode::Usage, "--temperature must be >= 0");
  opts.clamp = f.clamp;
  opts.trajectory = f.trajectory;
  opts.threads = worker_threads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
  const auto index = source_index(corpus, f.count);
  std::vector<Layout> sources;
  std::vector<std::string> ids;
  for (auto i : index) {
    sources.push_back(corpus.layouts[i]);
    ids.push_back(corpus.ids[i]);
  }
  const auto items = generate_many(*bundle, sources, ids, opts);
  json header = header_for(sub, f.seed);
  header["task"] = std::string(to_string(opts.task));
  header["decoder"] = std::string(to_string(opts.decoder));
  header["steps"] = opts.steps > 0 ? opts.steps : bundle->train_config().schedule.steps;
  write_json(f.out, generation_to_json(items, *bundle, header));
}

void cmd_eval(const Flags& f, const CLI::App& sub) {
  require(f.input, "--input");
  const GenerationFile file = read_generation(f.input);
  std::unique_ptr<FeatureExtractor> extractor;
  if (f.fid_steps > 0) {
    FeatureExtractorConfig fc;
    fc.steps = f.fid_steps;
    fc.seed = f.seed;
    extractor = std::make_unique<FeatureExtractor>(fc, file.quantizer);
    if (!f.corpus.empty()) {
      const Corpus corpus = read_corpus(f.corpus);
      extractor->train(corpus.subset(corpus.splits.train));
    } else {
      extractor->train(file.sources);
    }
  }
  const MetricReport report = evaluate_generation(file, extractor.get());
  json header = header_for(sub, f.seed);
  header["generation"] = file.header;
  write_json(f.out, {{"header", header}, {"metrics", to_json(report)}});
}

void cmd_ablate(const Flags& f, const CLI::App& sub) {
  require(f.out, "--out");
  const Corpus corpus = load_corpus(f.corpus);
  TrainConfig base = load_train_config(f, f.config.empty() ? std::optional(TrainConfig::toy()) : std::nullopt);
  AblationOptions opts;
  if (f.steps > 0) opts.train_steps = f.steps;
  if (f.count > 0) opts.eval_count = static_cast<int>(f.count);
  opts.seed = f.seed;
  opts.eval_task = task_from_string(f.task == "gen-t" && !sub.get_option("--task")->count() ? "gen-pcm" : f.task);
  opts.fid_steps = f.fid_steps;
  opts.threads = worker_threads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
  opts.progress = &std::cerr;
  const auto rows = run_ablation(corpus, base, opts);
  fs::create_directories(f.out);
  json header = header_for(sub, f.seed);
  header["base_config"] = to_json(base);
  header["train_steps"] = opts.train_steps;
  header["eval_task"] = std::string(to_string(opts.eval_task));
  write_json((fs::path(f.out) / "ablation.json").string(), {{"header", header}, {"rows", ablation_to_json(rows)}});
  std::ofstream csv(fs::path(f.out) / "ablation.csv");
  csv << ablation_to_csv(rows);
  std::cout << json{{"rows", rows.size()}, {"out", f.out}}.dump() << std::endl;
}

volatile std::sig_atomic_t g_stop = 0;

void cmd_serve(const Flags& f, const CLI::App&) {
  require(f.checkpoint, "--checkpoint");
  ServiceConfig cfg;
  cfg.host = f.host;
  cfg.port = f.port;
  cfg.workers = worker_threads(f.workers);
  Service service(cfg);
  const int port = service.bind();
  std::cerr << json{{"listening", port}, {"host", cfg.host}}.dump() << std::endl;
  std::signal(SIGINT, [](int) { g_stop = 1; });
  std::signal(SIGTERM, [](int) { g_stop = 1; });
  std::atomic<bool> done{false};
  std::thread watcher([&] {
    while (!done && !g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    service.stop();
  });
  std::thread loader([&] {
    try {
      service.set_model(load_bundle(f.checkpoint));
      std::cerr << json{{"model_loaded", f.checkpoint}, {"model_version", service.model()->model_version()}}.dump()
                << std::endl;
    } catch (const Error& e) {
      std::cerr << json{{"error", {{"code", to_string(e.code())}, {"message", e.what()}}}}.dump() << std::endl;
      service.stop();
    }
  });
  service.listen();
  done = true;
  loader.join();
  watcher.join();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete-diffusion layout generation engine"};
  app.require_subcommand(1, 1);
  Flags f;

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic corpus");
  synth->add_option("--out", f.out, "Output corpus directory")->required();
  synth->add_option("--seed", f.seed, "Generator and split seed");
  synth->add_option("--count", f.count, "Number of layouts (default 1000)");

  auto* ing = app.add_subcommand("ingest", "Normalize a raw dataset into a corpus directory");
  ing->add_option("--corpus", f.corpus, "Raw source file or directory")->required();
  ing->add_option("--format", f.format, "Source format: json, rico, coco");
  ing->add_option("--out", f.out, "Output corpus directory")->required();
  ing->add_option("--seed", f.seed, "Split seed");
  ing->add_option("--top-k", f.top_k, "Category vocabulary size");
  ing->add_option("--max-elements", f.max_elements, "Drop layouts with more elements");

  auto* train = app.add_subcommand("train", "Train a denoiser");
  train->add_option("--corpus", f.corpus, "Corpus directory")->required();
  train->add_option("--config", f.config, "Training config JSON");
  train->add_option("--checkpoint", f.checkpoint, "Resume from this checkpoint");
  train->add_option("--strategy", f.strategy, "Corruption strategy");
  train->add_option("--noise", f.noise, "Geometry noise type");
  train->add_option("--level", f.level, "Decoupling level");
  train->add_option("--steps", f.steps, "Total optimizer steps");
  train->add_option("--seed", f.seed, "Seed");
  train->add_option("--out", f.out, "Output directory")->required();

  auto* corr = app.add_subcommand("corrupt", "Apply forward corruption to corpus layouts");
  corr->add_option("--corpus", f.corpus, "Corpus directory")->required();
  corr->add_option("--config", f.config, "Training config JSON");
  corr->add_option("--strategy", f.strategy, "Corruption strategy");
  corr->add_option("--noise", f.noise, "Geometry noise type");
  corr->add_option("--level", f.level, "Decoupling level");
  corr->add_option("--steps", f.steps, "Diffusion steps T");
  corr->add_option("--seed", f.seed, "Seed");
  corr->add_option("--count", f.count, "Number of layouts");
  corr->add_option("--out", f.out, "Output JSON (stdout when omitted)");

  auto* gen = app.add_subcommand("generate", "Build tasks from corpus layouts and decode them");
  gen->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
  gen->add_option("--corpus", f.corpus, "Corpus directory providing sources")->required();
  gen->add_option("--task", f.task, "Task name");
  gen->add_option("--strategy", f.strategy, "Decoding strategy: confidence-topk, autoregressive, non-autoregressive");
  gen->add_option("--steps", f.steps, "Diffusion steps (default: checkpoint T)");
  gen->add_option("--seed", f.seed, "Seed");
  gen->add_option("--temperature", f.temperature, "Sampling temperature (0 = argmax)");
  gen->add_flag("--clamp", f.clamp, "Re-impose precise conditions after every step");
  gen->add_flag("--trajectory", f.trajectory, "Record per-step layouts");
  gen->add_option("--count", f.count, "Number of sources");
  gen->add_option("--out", f.out, "Output JSON (stdout when omitted)");

  auto* ev = app.add_subcommand("eval", "Score a generation file");
  ev->add_option("--input", f.input, "Output of generate")->required();
  ev->add_option("--corpus", f.corpus, "Corpus for training the FID extractor");
  ev->add_option("--fid-steps", f.fid_steps, "Extractor training steps (0 skips FID)");
  ev->add_option("--seed", f.seed, "Seed");
  ev->add_option("--out", f.out, "Output JSON (stdout when omitted)");

  auto* abl = app.add_subcommand("ablate", "Sweep strategies, noise types, levels and decoders");
  abl->add_option("--corpus", f.corpus, "Corpus directory")->required();
  abl->add_option("--config", f.config, "Base training config JSON (default: toy)");
  abl->add_option("--steps", f.steps, "Training steps per configuration");
  abl->add_option("--task", f.task, "Evaluation task (default gen-pcm)");
  abl->add_option("--seed", f.seed, "Seed");
  abl->add_option("--count", f.count, "Evaluation layouts");
  abl->add_option("--fid-steps", f.fid_steps, "Extractor training steps (0 skips FID)");
  abl->add_option("--out", f.out, "Output directory")->required();

  auto* srv = app.add_subcommand("serve", "Run the HTTP generation service");
  srv->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
  srv->add_option("--port", f.port, "Port (0 picks a free port)");
  srv->add_option("--host", f.host, "Bind address");
  srv->add_option("--workers", f.workers, "Concurrent decodes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    fail(kExitUsage, "usage", e.what());
  }

  try {
    if (synth->parsed()) cmd_synth(f, *synth);
    if (ing->parsed()) cmd_ingest(f, *ing);
    if (train->parsed()) cmd_train(f, *train);
    if (corr->parsed()) cmd_corrupt(f, *corr);
    if (gen->parsed()) cmd_generate(f, *gen);
    if (ev->parsed()) cmd_eval(f, *ev);
    if (abl->parsed()) cmd_ablate(f, *abl);
    if (srv->parsed()) cmd_serve(f, *srv);
  } catch (const Error& e) {
    fail(exit_code_for(e.code()), to_string(e.code()), e.what(), e.path());
  } catch (const std::bad_alloc& e) {
    fail(kExitInternal, "internal", e.what());
  } catch (const std::exception& e) {
    fail(kExitInternal, "internal", e.what());
  }
  return 0;
}
