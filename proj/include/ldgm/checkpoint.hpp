#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldgm/denoiser.hpp"
#include "ldgm/optim.hpp"

namespace ldgm {

inline constexpr int kCheckpointFormatVersion = 1;

struct OptimizerState {
  nn::AdamWConfig config;
  long steps = 0;
  std::vector<nn::Tensor> first_moments;
  std::vector<nn::Tensor> second_moments;
};

struct Checkpoint {
  QuantizerConfig quantizer;
  CategoryVocabulary vocabulary;
  std::unique_ptr<Denoiser> model;
  std::optional<OptimizerState> optimizer;
  nlohmann::json extra;       // caller metadata, e.g. the training config
  std::string model_version;  // hash of the manifest
};

/// File layout: "LDGMCKPT", u64 little-endian manifest length, JSON manifest,
/// then little-endian float32 tensors in manifest order (model parameters,
/// followed by optimizer moments when present).
void save_checkpoint(const std::filesystem::path& path, const Denoiser& model, const QuantizerConfig& quantizer,
                     const CategoryVocabulary& vocabulary, const nn::AdamW* optimizer = nullptr,
                     const nlohmann::json& extra = nlohmann::json::object());

/// Throws ErrorCode::Checkpoint on a version mismatch, truncation or a
/// checksum failure.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies the moments and step counter into an optimizer built for the same parameters.
void restore_optimizer(nn::AdamW& optimizer, const OptimizerState& state);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace ldgm
