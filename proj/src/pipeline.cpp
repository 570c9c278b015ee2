#include "ldgm/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "ldgm/error.hpp"

namespace ldgm {

using nlohmann::json;

std::vector<GeneratedItem> generate_many(const ModelBundle& bundle, std::span<const Layout> sources,
                                         std::span<const std::string> ids, const GenerateOptions& options) {
  if (!ids.empty() && ids.size() != sources.size()) throw Error(ErrorCode::Shape, "ids and sources differ in count");
  const int steps = options.steps > 0 ? options.steps : bundle.train_config().schedule.steps;
  const auto stacks = bundle.stacks(steps);
  std::vector<GeneratedItem> items(sources.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= sources.size()) return;
      try {
        auto& item = items[i];
        item.source_id = ids.empty() ? std::to_string(i) : ids[i];
        item.source = sources[i];
        Rng rng(derive_seed(options.seed, "task", i));
        item.input = build_task(sources[i], TaskSpec{options.task}, bundle.quantizer(), rng);
        GenerationRequest req;
        req.layout = item.input;
        req.decoder = options.decoder;
        req.steps = steps;
        req.seed = derive_seed(options.seed, "decode", i);
        req.temperature = options.temperature;
        req.clamp_conditions = options.clamp;
        item.result = decode(req, bundle.model(), *stacks, bundle.quantizer());
        if (!options.trajectory) item.result.trajectory.steps.clear();
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = sources.size();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(options.threads, static_cast<int>(sources.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return items;
}

json generation_to_json(const std::vector<GeneratedItem>& items, const ModelBundle& bundle, const json& header) {
  const auto& q = bundle.quantizer();
  const auto* vocab = &bundle.vocabulary();
  json h = header;
  h["quantizer"] = quantizer_to_json(q);
  h["vocabulary"] = vocabulary_to_json(bundle.vocabulary());
  h["model_version"] = bundle.model_version();
  json results = json::array();
  for (const auto& item : items) {
    json r = {{"source_id", item.source_id},
              {"source", layout_to_json(item.source, q, vocab)},
              {"input", layout_to_json(item.input, q, vocab)},
              {"output", layout_to_json(item.result.layout, q, vocab)}};
    if (!item.result.trajectory.steps.empty()) r["trajectory"] = trajectory_to_json(item.result.trajectory, q, vocab);
    results.push_back(std::move(r));
  }
  return {{"header", std::move(h)}, {"results", std::move(results)}};
}

GenerationFile read_generation(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Data, "cannot read " + path.string());
  GenerationFile f;
  try {
    const json doc = json::parse(in);
    f.header = doc.at("header");
    f.quantizer = quantizer_from_json(f.header.at("quantizer"));
    f.vocabulary = vocabulary_from_json(f.header.at("vocabulary"));
    f.task = task_from_string(f.header.at("task").get<std::string>());
    for (const auto& r : doc.at("results")) {
      f.sources.push_back(layout_from_json(r.at("source"), f.quantizer, &f.vocabulary));
      f.inputs.push_back(layout_from_json(r.at("input"), f.quantizer, &f.vocabulary));
      f.outputs.push_back(layout_from_json(r.at("output"), f.quantizer, &f.vocabulary));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Data, std::string("bad generation file: ") + e.what());
  }
  if (f.outputs.empty()) throw Error(ErrorCode::Data, "generation file has no results");
  return f;
}

MetricReport evaluate_generation(const GenerationFile& file, const FeatureExtractor* extractor) {
  const auto pairing = is_conditional(file.task) ? IouPairing::BySource : IouPairing::BestWithinCategoryMultiset;
  return evaluate(file.outputs, file.sources, file.inputs, file.quantizer, pairing, extractor);
}

// ---------------------------------------------------------------------------

namespace {

struct TrainedModel {
  std::shared_ptr<ModelBundle> bundle;
  double final_l_vlb = 0.0;
  double seconds = 0.0;
};

}  // namespace

std::vector<AblationRow> run_ablation(const Corpus& corpus, const TrainConfig& base, const AblationOptions& options) {
  const auto& q = corpus.quantizer();
  std::vector<Layout> train = corpus.subset(corpus.splits.train);
  std::vector<Layout> eval = corpus.subset(corpus.splits.test.empty() ? corpus.splits.train : corpus.splits.test);
  if (train.empty()) throw Error(ErrorCode::Data, "ablation needs a training split");
  if (static_cast<int>(eval.size()) > options.eval_count) eval.resize(static_cast<std::size_t>(options.eval_count));

  std::unique_ptr<FeatureExtractor> extractor;
  if (options.fid_steps > 0) {
    FeatureExtractorConfig fc;
    fc.steps = options.fid_steps;
    fc.seed = options.seed;
    extractor = std::make_unique<FeatureExtractor>(fc, q);
    extractor->train(train);
  }

  std::map<std::tuple<int, int, int>, TrainedModel> trained;
  auto model_for = [&](StrategyKind strategy, NoiseKind noise, DecouplingLevel level) -> TrainedModel& {
    const auto key = std::make_tuple(static_cast<int>(strategy), static_cast<int>(noise), static_cast<int>(level));
    auto it = trained.find(key);
    if (it != trained.end()) return it->second;
    TrainConfig cfg = base;
    cfg.strategy.kind = strategy;
    cfg.noise.geometry = NoiseType{noise, 0};
    cfg.level = level;
    cfg.total_steps = options.train_steps;
    cfg.seed = options.seed;
    auto model = std::make_unique<Denoiser>(cfg.model(q), derive_seed(options.seed, "ablation-init"));
    const auto t0 = std::chrono::steady_clock::now();
    Trainer trainer(cfg, q, *model);
    const auto history = trainer.fit(train, {}, {});
    TrainedModel tm;
    tm.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::size_t tail = std::min<std::size_t>(history.size(), 50);
    for (std::size_t i = history.size() - tail; i < history.size(); ++i)
      tm.final_l_vlb += history[i].loss.l_vlb / static_cast<double>(tail);
    std::ostringstream version;
    version << "ablation-" << to_string(strategy) << "-" << to_string(noise) << "-" << to_string(level);
    tm.bundle = std::make_shared<ModelBundle>(std::move(model), q, corpus.vocabulary(), cfg, version.str());
    if (options.progress)
      *options.progress << json{{"trained", version.str()}, {"seconds", tm.seconds}, {"l_vlb", tm.final_l_vlb}}.dump()
                        << std::endl;
    return trained.emplace(key, std::move(tm)).first->second;
  };

  auto evaluate_row = [&](AblationRow row) {
    auto& tm = model_for(row.strategy, row.noise, row.level);
    GenerateOptions go;
    go.task = options.eval_task;
    go.decoder = row.decoder;
    go.seed = options.seed;
    go.threads = options.threads;
    const auto items = generate_many(*tm.bundle, eval, {}, go);
    std::vector<Layout> outputs, inputs;
    for (const auto& item : items) {
      outputs.push_back(item.result.layout);
      inputs.push_back(item.input);
    }
    row.metrics = evaluate(outputs, eval, inputs, q, IouPairing::BySource, extractor.get());
    row.final_l_vlb = tm.final_l_vlb;
    row.train_seconds = tm.seconds;
    return row;
  };

  const auto default_strategy = base.strategy.kind;
  const auto default_noise = base.noise.geometry.kind;
  const auto default_level = base.level;
  std::vector<AblationRow> rows;
  for (auto strategy : {StrategyKind::ParallelDecoupled, StrategyKind::SequentialDecoupled,
                        StrategyKind::PartialDecoupled, StrategyKind::NonDecoupled}) {
    for (auto noise : {NoiseKind::Uniform, NoiseKind::DiscretizedGaussian, NoiseKind::BandDiagonal}) {
      AblationRow row;
      row.section = "strategy-noise";
      row.strategy = strategy;
      row.noise = noise;
      row.level = default_level;
      rows.push_back(evaluate_row(row));
    }
  }
  for (auto level : {DecouplingLevel::None, DecouplingLevel::Element, DecouplingLevel::Token,
                     DecouplingLevel::TypeGroup}) {
    AblationRow row;
    row.section = "level";
    row.strategy = default_strategy;
    row.noise = default_noise;
    row.level = level;
    rows.push_back(evaluate_row(row));
  }
  for (auto decoder : kAllDecoders) {
    AblationRow row;
    row.section = "decoder";
    row.strategy = default_strategy;
    row.noise = default_noise;
    row.level = default_level;
    row.decoder = decoder;
    rows.push_back(evaluate_row(row));
  }
  return rows;
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"section", r.section},
                   {"strategy", std::string(to_string(r.strategy))},
                   {"noise", std::string(to_string(r.noise))},
                   {"level", std::string(to_string(r.level))},
                   {"decoder", std::string(to_string(r.decoder))},
                   {"metrics", to_json(r.metrics)},
                   {"final_l_vlb", r.final_l_vlb},
                   {"train_seconds", r.train_seconds}});
  }
  return out;
}

std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "section,strategy,noise,level,decoder,max_iou,fid,alignment,overlap,retention,n_layouts,final_l_vlb\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    os << r.section << ',' << to_string(r.strategy) << ',' << to_string(r.noise) << ',' << to_string(r.level) << ','
       << to_string(r.decoder) << ',' << m.max_iou << ',' << (m.fid ? std::to_string(*m.fid) : "") << ','
       << m.alignment << ',' << m.overlap << ',' << (m.retention ? std::to_string(*m.retention) : "") << ','
       << m.n_layouts << ',' << r.final_l_vlb << '\n';
  }
  return os.str();
}

}  // namespace ldgm
