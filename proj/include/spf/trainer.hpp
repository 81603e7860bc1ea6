#pragma once

#include "spf/backbone.hpp"
#include "spf/decoder.hpp"
#include "spf/eval.hpp"
#include "spf/matching.hpp"
#include "spf/scene.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace spf {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  double learning_rate = 2e-3;
  int steps = 500;
  std::string optimizer = "adam";  // "adam" | "sgd"
  // Synthetic scene set.
  int num_scenes = 8;
  int min_instances = 2;
  int max_instances = 4;
  int points_per_instance = 64;
  double noise_scale = 0.02;
  double room_extent = 8.0;
  double superpoint_cell = 0.5;
  ModelConfig model;
  LossCoefficients loss;

  void validate() const;
};

struct Model {
  ModelConfig config;
  BackboneParams backbone;
  DecoderParams decoder;

  static Model init(const ModelConfig& config, std::uint64_t seed);
  NamedParams named_params() const;
  /// Scene must carry a superpoint partition.
  DecoderOutput forward(const Scene& scene) const;
};

struct Checkpoint {
  TrainConfig config;
  int step = 0;
  Model model;
};

struct LossHistoryEntry {
  int step;
  double total, cls, score, bce, dice;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossHistoryEntry> history;
};

/// Scenes for training/eval; superpoint partitions attached if missing.
std::vector<Scene> build_scene_set(const TrainConfig& config);

TrainResult train(const TrainConfig& config, std::vector<Scene> scenes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string loss_history_to_string(const std::vector<LossHistoryEntry>& history);

}  // namespace spf
