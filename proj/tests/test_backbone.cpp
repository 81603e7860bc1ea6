#include "spf/backbone.hpp"

#include <doctest.h>

#include <cmath>

using namespace spf;

namespace {

PointCloud random_cloud(Index n, Rng& rng) {
  PointCloud cloud;
  cloud.positions.resize(n, 3);
  cloud.colors.resize(n, 3);
  for (Index i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      cloud.positions(i, a) = rng.uniform(0.0, 2.0);
      cloud.colors(i, a) = rng.uniform(0.0, 1.0);
    }
  }
  return cloud;
}

}  // namespace

TEST_CASE("zero weights map every point to the output bias") {
  Rng rng(1);
  BackboneParams p = BackboneParams::init(4, 3, rng);
  p.w1.mutable_value().setZero();
  p.w2.mutable_value().setZero();
  p.w3.mutable_value().setZero();
  p.b1.mutable_value().setZero();
  p.b2.mutable_value().setZero();
  p.b3.mutable_value() << 0.5, -1.0, 2.0;
  PointCloud cloud = random_cloud(6, rng);
  Matrix out = encode_points(p, cloud).value();
  for (Index i = 0; i < out.rows(); ++i) {
    CHECK(out(i, 0) == 0.5);
    CHECK(out(i, 1) == -1.0);
    CHECK(out(i, 2) == 2.0);
  }
}

TEST_CASE("permuting points permutes features identically") {
  Rng rng(2);
  BackboneParams p = BackboneParams::init(8, 4, rng);
  PointCloud cloud = random_cloud(5, rng);
  Matrix base = encode_points(p, cloud).value();

  PointCloud reversed;
  reversed.positions = cloud.positions.colwise().reverse().eval();
  reversed.colors = cloud.colors.colwise().reverse().eval();
  Matrix out = encode_points(p, reversed).value();
  CHECK((out.colwise().reverse() - base).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single point with hand-set weights") {
  Rng rng(3);
  BackboneParams p = BackboneParams::init(1, 1, rng);
  // 6 -> 1 -> 1 -> 1 with all-ones weights and zero biases; input sums to 2.1.
  p.w1.mutable_value().setOnes();
  p.b1.mutable_value().setZero();
  p.w2.mutable_value().setOnes();
  p.b2.mutable_value().setZero();
  p.w3.mutable_value().setOnes();
  p.b3.mutable_value().setZero();
  PointCloud cloud;
  cloud.positions.resize(1, 3);
  cloud.positions << 0.5, 0.25, 0.75;
  cloud.colors.resize(1, 3);
  cloud.colors << 0.2, 0.3, 0.1;
  Matrix out = encode_points(p, cloud).value();
  CHECK(out(0, 0) == doctest::Approx(2.1).epsilon(1e-12));
}

TEST_CASE("pooling a singleton superpoint is the identity") {
  DiffTensor feats = DiffTensor::constant((Matrix(1, 2) << 3.0, -4.0).finished());
  SuperpointPartition part;
  part.ids = {0};
  part.count = 1;
  Matrix out = superpoint_pool(feats, part).features.value();
  CHECK(out(0, 0) == 3.0);
  CHECK(out(0, 1) == -4.0);
}

TEST_CASE("pooling averages rows within a superpoint") {
  DiffTensor feats = DiffTensor::constant((Matrix(2, 2) << 1.0, 3.0, 5.0, 7.0).finished());
  SuperpointPartition part;
  part.ids = {0, 0};
  part.count = 1;
  Matrix out = superpoint_pool(feats, part).features.value();
  CHECK(out(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(out(0, 1) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("pooling matches a brute-force mean") {
  Rng rng(4);
  const Index n = 23;
  Matrix feats(n, 5);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < 5; ++j) feats(i, j) = rng.uniform(-2.0, 2.0);
  SuperpointPartition part;
  part.count = 4;
  for (Index i = 0; i < n; ++i)
    part.ids.push_back(static_cast<int>(rng.uniform_int(4)));
  // Keep the partition surjective.
  part.ids[0] = 0;
  part.ids[1] = 1;
  part.ids[2] = 2;
  part.ids[3] = 3;

  Matrix out = superpoint_pool(DiffTensor::constant(feats), part).features.value();
  for (int s = 0; s < 4; ++s) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(5);
    int count = 0;
    for (Index i = 0; i < n; ++i) {
      if (part.ids[static_cast<std::size_t>(i)] == s) {
        mean += feats.row(i);
        count++;
      }
    }
    mean /= count;
    CHECK((out.row(s) - mean).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("pooling gradient on a 5-point 2-superpoint instance") {
  Rng rng(5);
  Matrix init(5, 3);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 3; ++j) init(i, j) = rng.uniform(-1.0, 1.0);
  DiffTensor feats = DiffTensor::parameter(init);
  SuperpointPartition part;
  part.ids = {0, 0, 1, 1, 1};
  part.count = 2;
  auto f = [feats, part] { return sum(sigmoid(superpoint_pool(feats, part).features)); };
  CHECK(finite_diff_check(f, {feats}) < 1e-4);
}

TEST_CASE("end-to-end backbone gradient") {
  Rng rng(6);
  BackboneParams p = BackboneParams::init(6, 4, rng);
  PointCloud cloud = random_cloud(8, rng);
  SuperpointPartition part;
  part.ids = {0, 0, 1, 1, 2, 2, 3, 3};
  part.count = 4;
  std::vector<DiffTensor> params;
  for (const auto& [name, t] : p.named_params()) params.push_back(t);
  auto f = [&p, &cloud, &part] {
    return mean_all(sigmoid(superpoint_pool(encode_points(p, cloud), part).features));
  };
  CHECK(finite_diff_check(f, params) < 1e-4);
}

TEST_CASE("init_linear range and determinism") {
  Rng a(7), b(7);
  Matrix m1 = init_linear(9, 5, a);
  Matrix m2 = init_linear(9, 5, b);
  CHECK((m1 - m2).cwiseAbs().maxCoeff() == 0.0);
  const double bound = 1.0 / std::sqrt(9.0);
  CHECK(m1.cwiseAbs().maxCoeff() <= bound);
}
