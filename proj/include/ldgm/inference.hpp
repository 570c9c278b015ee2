#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ldgm/denoiser.hpp"
#include "ldgm/diffusion.hpp"

namespace ldgm {

enum class TaskKind { UGen, GenT, GenTS, GenTR, Refinement, Completion, GenPM, GenCM, GenPC, GenPCM };
inline constexpr std::array<TaskKind, 10> kAllTasks = {
    TaskKind::UGen,       TaskKind::GenT,  TaskKind::GenTS, TaskKind::GenTR, TaskKind::Refinement,
    TaskKind::Completion, TaskKind::GenPM, TaskKind::GenCM, TaskKind::GenPC, TaskKind::GenPCM};
std::string_view to_string(TaskKind task);
TaskKind task_from_string(std::string_view name);
/// True when the task conditions on (parts of) a source layout.
bool is_conditional(TaskKind task);

enum class DecoderKind { ConfidenceTopK, Autoregressive, NonAutoregressive };
inline constexpr std::array<DecoderKind, 3> kAllDecoders = {DecoderKind::ConfidenceTopK, DecoderKind::Autoregressive,
                                                            DecoderKind::NonAutoregressive};
std::string_view to_string(DecoderKind decoder);
DecoderKind decoder_from_string(std::string_view name);

struct TaskSpec {
  TaskKind task = TaskKind::GenT;
  double relation_fraction = 0.10;  // GenTR
  double coarse_std = 0.01;         // normalized coordinates

  void validate() const;
};

struct GenerationRequest {
  Layout layout;  // statuses set; Missing attributes hold the MASK bin
  DecoderKind decoder = DecoderKind::ConfidenceTopK;
  int steps = 100;
  std::uint64_t seed = 0;
  double temperature = 1.0;  // 0 selects argmax
  bool clamp_conditions = false;
  bool freeze_on_commit = false;
};

/// Layout whose attribute statuses realize `spec` on `source`.
Layout build_task(const Layout& source, const TaskSpec& spec, const QuantizerConfig& cfg, Rng& rng);
/// Unconditional input: n elements, everything missing.
Layout blank_layout(int n, CanvasSpec canvas, const QuantizerConfig& cfg);

/// Additive N(0, std) noise on normalized geometry, re-quantized; geometry
/// statuses become Coarse. Categories and relations are untouched.
Layout synthesize_coarse(const Layout& layout, const QuantizerConfig& cfg, double std, Rng& rng);

struct CommitRecord {
  int element = 0;
  AttributeKind kind = AttributeKind::Category;
  bool operator==(const CommitRecord&) const = default;
};

struct TrajectoryStep {
  int t = 0;
  Layout layout;
  std::vector<CommitRecord> committed;  // attributes committed for the first time at this step
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
};

struct DecodeResult {
  Layout layout;  // MASK-free, all statuses Precise
  Trajectory trajectory;
  int missing = 0;  // N_m
};

using StepCallback = std::function<void(const TrajectoryStep&)>;

/// Shared decode loop; decoders differ only in how still-missing predictions
/// are committed. `stacks.steps()` must equal `req.steps`.
DecodeResult decode(const GenerationRequest& req, const Denoiser& model, const StackSet& stacks,
                    const QuantizerConfig& cfg, const StepCallback& on_step = {});

/// k = ceil(N_m / T).
int commits_per_step(int missing, int steps);

nlohmann::json trajectory_to_json(const Trajectory& trajectory, const QuantizerConfig& cfg,
                                  const CategoryVocabulary* vocab = nullptr);
nlohmann::json step_to_json(const TrajectoryStep& step, const QuantizerConfig& cfg,
                            const CategoryVocabulary* vocab = nullptr);

}  // namespace ldgm
