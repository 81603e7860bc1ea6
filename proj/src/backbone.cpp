#include "spf/backbone.hpp"

#include <cmath>

namespace spf {

Matrix init_linear(Index fan_in, Index fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix w(fan_in, fan_out);
  for (Index i = 0; i < fan_in; ++i) {
    for (Index j = 0; j < fan_out; ++j) w(i, j) = rng.uniform(-bound, bound);
  }
  return w;
}

BackboneParams BackboneParams::init(int hidden, int channels, Rng& rng) {
  BackboneParams p;
  p.hidden = hidden;
  p.channels = channels;
  p.w1 = DiffTensor::parameter(init_linear(6, hidden, rng));
  p.b1 = DiffTensor::parameter(Matrix::Zero(1, hidden));
  p.w2 = DiffTensor::parameter(init_linear(hidden, hidden, rng));
  p.b2 = DiffTensor::parameter(Matrix::Zero(1, hidden));
  p.w3 = DiffTensor::parameter(init_linear(hidden, channels, rng));
  p.b3 = DiffTensor::parameter(Matrix::Zero(1, channels));
  return p;
}

NamedParams BackboneParams::named_params(const std::string& prefix) const {
  return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2},
          {prefix + "b2", b2}, {prefix + "w3", w3}, {prefix + "b3", b3}};
}

DiffTensor encode_points(const BackboneParams& params, const PointCloud& cloud) {
  const Index n = cloud.count();
  Matrix input(n, 6);
  input.leftCols(3) = cloud.positions;
  input.rightCols(3) = cloud.colors;
  DiffTensor x = DiffTensor::constant(std::move(input));
  DiffTensor h1 = relu(add_row_broadcast(matmul(x, params.w1), params.b1));
  DiffTensor h2 = relu(add_row_broadcast(matmul(h1, params.w2), params.b2));
  return add_row_broadcast(matmul(h2, params.w3), params.b3);
}

SuperpointFeatures superpoint_pool(const DiffTensor& point_features,
                                   const SuperpointPartition& partition) {
  const Index n = point_features.rows();
  if (static_cast<Index>(partition.ids.size()) != n) {
    throw ShapeError("superpoint_pool: feature rows do not match partition length");
  }
  std::vector<int> sizes(static_cast<std::size_t>(partition.count), 0);
  for (int id : partition.ids) sizes[static_cast<std::size_t>(id)]++;

  // Mean pooling as a constant [M x N] matrix; the gradient splits
  // uniformly over each superpoint's members via the matmul backward.
  Matrix pool = Matrix::Zero(partition.count, n);
  for (Index i = 0; i < n; ++i) {
    const int j = partition.ids[static_cast<std::size_t>(i)];
    pool(j, i) = 1.0 / sizes[static_cast<std::size_t>(j)];
  }
  return {matmul(DiffTensor::constant(std::move(pool)), point_features)};
}

}  // namespace spf
