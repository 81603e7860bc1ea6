#pragma once

#include "spf/tensor.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace spf {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// N points with coordinates (meters) and colors in [0,1].
struct PointCloud {
  Matrix positions;  // [N x 3]
  Matrix colors;     // [N x 3]

  Index count() const { return positions.rows(); }
  void validate() const;
};

/// Per-point superpoint id; ids form a surjection onto [0, M).
struct SuperpointPartition {
  std::vector<int> ids;
  int count = 0;  // M

  void validate(Index n_points) const;
};

struct InstanceGroundTruth {
  std::vector<int> point_instance_ids;  // -1 = background
  std::vector<int> instance_classes;    // [N_gt]

  int instance_count() const { return static_cast<int>(instance_classes.size()); }
  void validate(Index n_points, int num_classes = -1) const;
};

struct Scene {
  PointCloud cloud;
  std::optional<SuperpointPartition> superpoints;
  std::optional<InstanceGroundTruth> ground_truth;
};

/// Binary [N_gt x M]; (k, j) = 1 iff superpoint j is hard-assigned to
/// instance k by strict point majority. Columns have at most one 1.
struct SuperpointInstanceMasks {
  Matrix masks;
};

struct SyntheticSceneSpec {
  int num_instances = 2;
  int points_per_instance = 64;
  int num_classes = 4;
  double noise_scale = 0.0;
  double room_extent = 8.0;  // room is [0, room_extent)^3
};

Scene load_scene(const std::string& path);
Scene load_scene_from_string(const std::string& text);
void save_scene(const Scene& scene, const std::string& path);
std::string scene_to_string(const Scene& scene);

Scene generate_synthetic_scene(std::uint64_t seed, const SyntheticSceneSpec& spec);

SuperpointPartition grid_superpoints(const PointCloud& cloud, double cell);

SuperpointInstanceMasks project_instance_to_superpoints(const Scene& scene);

}  // namespace spf
