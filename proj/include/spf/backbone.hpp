#pragma once

#include "spf/rng.hpp"
#include "spf/scene.hpp"
#include "spf/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace spf {

using NamedParams = std::vector<std::pair<std::string, DiffTensor>>;

/// Per-point MLP 6 -> H -> H -> C standing in for the point-feature
/// backbone; rows are independent, mixing happens only in the pooling.
struct BackboneParams {
  int hidden = 64;    // H
  int channels = 32;  // C
  DiffTensor w1, b1, w2, b2, w3, b3;

  static BackboneParams init(int hidden, int channels, Rng& rng);
  NamedParams named_params(const std::string& prefix = "backbone.") const;
};

/// DiffTensor [M x C] of mean-pooled point features.
struct SuperpointFeatures {
  DiffTensor features;
};

DiffTensor encode_points(const BackboneParams& params, const PointCloud& cloud);

SuperpointFeatures superpoint_pool(const DiffTensor& point_features,
                                   const SuperpointPartition& partition);

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], row-major fill order.
Matrix init_linear(Index fan_in, Index fan_out, Rng& rng);

}  // namespace spf
