#include "ldgm/runtime.hpp"

#include <algorithm>
#include <cstdlib>

namespace ldgm {

ModelBundle::ModelBundle(std::unique_ptr<Denoiser> model, QuantizerConfig quantizer, CategoryVocabulary vocabulary,
                         TrainConfig train, std::string model_version)
    : model_(std::move(model)),
      quantizer_(quantizer),
      vocabulary_(std::move(vocabulary)),
      train_(std::move(train)),
      model_version_(std::move(model_version)) {}

std::shared_ptr<const StackSet> ModelBundle::stacks(int steps) const {
  std::lock_guard lock(mutex_);
  auto it = cache_.find(steps);
  if (it != cache_.end()) return it->second;
  Schedule sched = train_.schedule;
  sched.steps = steps;
  auto built = std::make_shared<const StackSet>(build_stacks(quantizer_, sched, train_.noise));
  cache_.emplace(steps, built);
  return built;
}

TrainConfig stored_train_config(const Checkpoint& ck) {
  if (ck.extra.is_object() && ck.extra.contains("train_config"))
    return train_config_from_json(ck.extra.at("train_config"));
  return TrainConfig{};
}

std::shared_ptr<ModelBundle> load_bundle(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  TrainConfig train = stored_train_config(ck);
  return std::make_shared<ModelBundle>(std::move(ck.model), ck.quantizer, ck.vocabulary, std::move(train),
                                       ck.model_version);
}

int worker_threads(int requested) {
  int n = std::max(1, requested);
  if (const char* env = std::getenv("LDGM_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return n;
}

}  // namespace ldgm
