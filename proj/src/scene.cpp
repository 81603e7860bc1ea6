#include "spf/scene.hpp"

#include "spf/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace spf {

namespace {

using nlohmann::json;

constexpr double kClassPalette[8][3] = {
    {0.90, 0.10, 0.10}, {0.10, 0.90, 0.10}, {0.10, 0.10, 0.90}, {0.90, 0.90, 0.10},
    {0.90, 0.10, 0.90}, {0.10, 0.90, 0.90}, {0.95, 0.55, 0.10}, {0.60, 0.30, 0.80},
};

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Box-Muller from the fixed-mapping uniform; keeps generation reproducible.
double gaussian(Rng& rng) {
  double u1 = rng.uniform();
  while (u1 <= 0.0) u1 = rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

void PointCloud::validate() const {
  if (positions.rows() < 1) throw ValidationError("point cloud is empty");
  if (positions.rows() != colors.rows() || positions.cols() != 3 || colors.cols() != 3) {
    throw ValidationError("point cloud arrays malformed");
  }
  if (!positions.allFinite()) throw ValidationError("non-finite coordinate");
  if ((colors.array() < 0.0).any() || (colors.array() > 1.0).any()) {
    throw ValidationError("color outside [0,1]");
  }
}

void SuperpointPartition::validate(Index n_points) const {
  if (static_cast<Index>(ids.size()) != n_points) {
    throw ValidationError("superpoint_ids length " + std::to_string(ids.size()) +
                          " does not match point count " + std::to_string(n_points));
  }
  std::vector<int> occupancy(count, 0);
  for (int id : ids) {
    if (id < 0 || id >= count) {
      throw ValidationError("superpoint id " + std::to_string(id) + " outside [0, " +
                            std::to_string(count) + ")");
    }
    occupancy[id]++;
  }
  for (int j = 0; j < count; ++j) {
    if (occupancy[j] == 0) {
      throw ValidationError("superpoint " + std::to_string(j) + " is empty");
    }
  }
}

void InstanceGroundTruth::validate(Index n_points, int num_classes) const {
  if (static_cast<Index>(point_instance_ids.size()) != n_points) {
    throw ValidationError("instance_ids length does not match point count");
  }
  const int n_gt = instance_count();
  std::vector<int> sizes(n_gt, 0);
  for (int id : point_instance_ids) {
    if (id < -1 || id >= n_gt) {
      throw ValidationError("instance id " + std::to_string(id) + " outside [-1, " +
                            std::to_string(n_gt) + ")");
    }
    if (id >= 0) sizes[id]++;
  }
  for (int k = 0; k < n_gt; ++k) {
    if (sizes[k] == 0) throw ValidationError("instance " + std::to_string(k) + " has no points");
  }
  for (int c : instance_classes) {
    if (c < 0 || (num_classes >= 0 && c >= num_classes)) {
      throw ValidationError("instance class " + std::to_string(c) + " out of range");
    }
  }
}

Scene load_scene_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("scene parse error: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("points") || !doc["points"].is_array()) {
    throw ParseError("scene file must be an object with a \"points\" array");
  }
  Scene scene;
  const auto& pts = doc["points"];
  const Index n = static_cast<Index>(pts.size());
  scene.cloud.positions.resize(n, 3);
  scene.cloud.colors.resize(n, 3);
  for (Index i = 0; i < n; ++i) {
    const auto& row = pts[static_cast<std::size_t>(i)];
    if (!row.is_array() || row.size() != 6) {
      throw ParseError("points[" + std::to_string(i) + "] must be [x,y,z,r,g,b]");
    }
    for (int j = 0; j < 3; ++j) {
      scene.cloud.positions(i, j) = row[j].get<double>();
      scene.cloud.colors(i, j) = row[j + 3].get<double>();
    }
  }
  scene.cloud.validate();
  if (doc.contains("superpoint_ids")) {
    SuperpointPartition part;
    part.ids = doc["superpoint_ids"].get<std::vector<int>>();
    int max_id = -1;
    for (int id : part.ids) max_id = std::max(max_id, id);
    part.count = max_id + 1;
    part.validate(n);
    scene.superpoints = std::move(part);
  }
  if (doc.contains("instance_ids") != doc.contains("instance_classes")) {
    throw ValidationError("instance_ids and instance_classes must appear together");
  }
  if (doc.contains("instance_ids")) {
    InstanceGroundTruth gt;
    gt.point_instance_ids = doc["instance_ids"].get<std::vector<int>>();
    gt.instance_classes = doc["instance_classes"].get<std::vector<int>>();
    gt.validate(n);
    scene.ground_truth = std::move(gt);
  }
  return scene;
}

Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open scene file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return load_scene_from_string(buf.str());
}

std::string scene_to_string(const Scene& scene) {
  json doc;
  json pts = json::array();
  for (Index i = 0; i < scene.cloud.count(); ++i) {
    pts.push_back({scene.cloud.positions(i, 0), scene.cloud.positions(i, 1),
                   scene.cloud.positions(i, 2), scene.cloud.colors(i, 0),
                   scene.cloud.colors(i, 1), scene.cloud.colors(i, 2)});
  }
  doc["points"] = std::move(pts);
  if (scene.superpoints) doc["superpoint_ids"] = scene.superpoints->ids;
  if (scene.ground_truth) {
    doc["instance_ids"] = scene.ground_truth->point_instance_ids;
    doc["instance_classes"] = scene.ground_truth->instance_classes;
  }
  return doc.dump();
}

void save_scene(const Scene& scene, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open for writing: " + path);
  out << scene_to_string(scene) << "\n";
}

Scene generate_synthetic_scene(std::uint64_t seed, const SyntheticSceneSpec& spec) {
  if (spec.num_instances < 1 || spec.points_per_instance < 1 || spec.num_classes < 1) {
    throw ContractError("generate_synthetic_scene: degenerate spec");
  }
  Rng rng(seed);
  const double margin = 0.8;
  const double min_sep = 1.5;

  std::vector<Eigen::Vector3d> centers;
  for (int k = 0; k < spec.num_instances; ++k) {
    Eigen::Vector3d c;
    bool placed = false;
    for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
      for (int a = 0; a < 3; ++a) c(a) = rng.uniform(margin, spec.room_extent - margin);
      placed = true;
      for (const auto& prev : centers) {
        if ((c - prev).norm() < min_sep) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) throw ContractError("generate_synthetic_scene: cannot place instances; enlarge room_extent");
    centers.push_back(c);
  }

  const int n_background = std::max(8, spec.num_instances * spec.points_per_instance / 4);
  const Index n_total =
      static_cast<Index>(spec.num_instances) * spec.points_per_instance + n_background;

  Scene scene;
  scene.cloud.positions.resize(n_total, 3);
  scene.cloud.colors.resize(n_total, 3);
  InstanceGroundTruth gt;
  gt.point_instance_ids.assign(static_cast<std::size_t>(n_total), -1);
  gt.instance_classes.resize(spec.num_instances);

  Index row = 0;
  for (int k = 0; k < spec.num_instances; ++k) {
    const int cls = k % spec.num_classes;
    gt.instance_classes[k] = cls;
    Eigen::Vector3d half;
    for (int a = 0; a < 3; ++a) half(a) = rng.uniform(0.12, 0.2);
    const bool ellipsoid = (k % 2) == 1;
    const double* base = kClassPalette[cls % 8];
    for (int p = 0; p < spec.points_per_instance; ++p) {
      Eigen::Vector3d offset;
      do {
        for (int a = 0; a < 3; ++a) offset(a) = rng.uniform(-half(a), half(a));
      } while (ellipsoid && (offset.cwiseQuotient(half)).squaredNorm() > 1.0);
      for (int a = 0; a < 3; ++a) {
        scene.cloud.positions(row, a) =
            centers[k](a) + offset(a) + spec.noise_scale * gaussian(rng);
        scene.cloud.colors(row, a) =
            clamp01(base[a] + 0.02 * spec.noise_scale * gaussian(rng));
      }
      gt.point_instance_ids[static_cast<std::size_t>(row)] = k;
      ++row;
    }
  }
  for (int p = 0; p < n_background; ++p) {
    for (int a = 0; a < 3; ++a) {
      scene.cloud.positions(row, a) = rng.uniform(0.0, spec.room_extent);
      scene.cloud.colors(row, a) = clamp01(0.5 + 0.05 * gaussian(rng));
    }
    ++row;
  }
  scene.ground_truth = std::move(gt);
  return scene;
}

SuperpointPartition grid_superpoints(const PointCloud& cloud, double cell) {
  if (!(cell > 0.0)) throw ContractError("grid_superpoints: cell must be positive");
  struct KeyHash {
    std::size_t operator()(const std::array<std::int64_t, 3>& k) const {
      std::size_t h = 1469598103934665603ull;
      for (std::int64_t v : k) {
        h ^= static_cast<std::size_t>(v);
        h *= 1099511628211ull;
      }
      return h;
    }
  };
  std::unordered_map<std::array<std::int64_t, 3>, int, KeyHash> cell_ids;
  SuperpointPartition part;
  part.ids.resize(static_cast<std::size_t>(cloud.count()));
  for (Index i = 0; i < cloud.count(); ++i) {
    std::array<std::int64_t, 3> key;
    for (int a = 0; a < 3; ++a) {
      key[static_cast<std::size_t>(a)] =
          static_cast<std::int64_t>(std::floor(cloud.positions(i, a) / cell));
    }
    auto [it, inserted] = cell_ids.emplace(key, part.count);
    if (inserted) ++part.count;
    part.ids[static_cast<std::size_t>(i)] = it->second;
  }
  return part;
}

SuperpointInstanceMasks project_instance_to_superpoints(const Scene& scene) {
  if (!scene.ground_truth) {
    throw ContractError("project_instance_to_superpoints: scene has no ground truth");
  }
  if (!scene.superpoints) {
    throw ContractError("project_instance_to_superpoints: scene has no superpoint partition");
  }
  const auto& gt = *scene.ground_truth;
  const auto& part = *scene.superpoints;
  const int n_gt = gt.instance_count();
  const int m = part.count;

  std::vector<int> sp_size(m, 0);
  Matrix counts = Matrix::Zero(n_gt, m);
  for (std::size_t i = 0; i < part.ids.size(); ++i) {
    const int j = part.ids[i];
    sp_size[j]++;
    const int inst = gt.point_instance_ids[i];
    if (inst >= 0) counts(inst, j) += 1.0;
  }
  SuperpointInstanceMasks result;
  result.masks = Matrix::Zero(n_gt, m);
  for (int j = 0; j < m; ++j) {
    for (int k = 0; k < n_gt; ++k) {
      // Strictly more than half of the superpoint's points.
      if (2.0 * counts(k, j) > sp_size[j]) {
        result.masks(k, j) = 1.0;
        break;
      }
    }
  }
  return result;
}

}  // namespace spf
