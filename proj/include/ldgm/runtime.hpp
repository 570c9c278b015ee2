#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "ldgm/checkpoint.hpp"
#include "ldgm/training.hpp"

namespace ldgm {

/// A loaded checkpoint plus everything needed to decode with it. Transition
/// stacks are built lazily per requested T and shared between callers.
class ModelBundle {
 public:
  ModelBundle(std::unique_ptr<Denoiser> model, QuantizerConfig quantizer, CategoryVocabulary vocabulary,
              TrainConfig train, std::string model_version);

  const Denoiser& model() const { return *model_; }
  const QuantizerConfig& quantizer() const { return quantizer_; }
  const CategoryVocabulary& vocabulary() const { return vocabulary_; }
  const TrainConfig& train_config() const { return train_; }
  const std::string& model_version() const { return model_version_; }

  /// Stacks for `steps` diffusion steps using the checkpoint's schedule ends and noise types.
  std::shared_ptr<const StackSet> stacks(int steps) const;

 private:
  std::unique_ptr<Denoiser> model_;
  QuantizerConfig quantizer_;
  CategoryVocabulary vocabulary_;
  TrainConfig train_;
  std::string model_version_;
  mutable std::mutex mutex_;
  mutable std::map<int, std::shared_ptr<const StackSet>> cache_;
};

/// Training config stored in a checkpoint's metadata, or defaults when absent.
TrainConfig stored_train_config(const Checkpoint& ck);
std::shared_ptr<ModelBundle> load_bundle(const std::filesystem::path& path);

/// min(requested, LDGM_THREADS) when the variable is set, at least 1.
int worker_threads(int requested);

}  // namespace ldgm
