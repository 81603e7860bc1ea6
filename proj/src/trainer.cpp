#include "spf/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace spf {

namespace {

using nlohmann::json;

json model_config_to_json(const ModelConfig& m) {
  return {{"hidden", m.hidden},
          {"channels", m.channels},
          {"embed_dim", m.embed_dim},
          {"heads", m.heads},
          {"ffn_width", m.ffn_width},
          {"layers", m.layers},
          {"queries", m.queries},
          {"num_classes", m.num_classes},
          {"tau", m.tau},
          {"use_attention_mask", m.use_attention_mask},
          {"cross_attention_first", m.cross_attention_first},
          {"iterative_prediction", m.iterative_prediction}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.hidden = j.at("hidden").get<int>();
  m.channels = j.at("channels").get<int>();
  m.embed_dim = j.at("embed_dim").get<int>();
  m.heads = j.at("heads").get<int>();
  m.ffn_width = j.at("ffn_width").get<int>();
  m.layers = j.at("layers").get<int>();
  m.queries = j.at("queries").get<int>();
  m.num_classes = j.at("num_classes").get<int>();
  m.tau = j.at("tau").get<double>();
  m.use_attention_mask = j.at("use_attention_mask").get<bool>();
  m.cross_attention_first = j.at("cross_attention_first").get<bool>();
  m.iterative_prediction = j.at("iterative_prediction").get<bool>();
  return m;
}

json train_config_to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"optimizer", c.optimizer},
          {"num_scenes", c.num_scenes},
          {"min_instances", c.min_instances},
          {"max_instances", c.max_instances},
          {"points_per_instance", c.points_per_instance},
          {"noise_scale", c.noise_scale},
          {"room_extent", c.room_extent},
          {"superpoint_cell", c.superpoint_cell},
          {"model", model_config_to_json(c.model)},
          {"loss",
           {{"lambda_cls", c.loss.lambda_cls},
            {"lambda_mask", c.loss.lambda_mask},
            {"beta_cls", c.loss.beta_cls},
            {"beta_s", c.loss.beta_s},
            {"beta_mask", c.loss.beta_mask}}}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.steps = j.at("steps").get<int>();
  c.optimizer = j.at("optimizer").get<std::string>();
  c.num_scenes = j.at("num_scenes").get<int>();
  c.min_instances = j.at("min_instances").get<int>();
  c.max_instances = j.at("max_instances").get<int>();
  c.points_per_instance = j.at("points_per_instance").get<int>();
  c.noise_scale = j.at("noise_scale").get<double>();
  c.room_extent = j.at("room_extent").get<double>();
  c.superpoint_cell = j.at("superpoint_cell").get<double>();
  c.model = model_config_from_json(j.at("model"));
  const json& l = j.at("loss");
  c.loss.lambda_cls = l.at("lambda_cls").get<double>();
  c.loss.lambda_mask = l.at("lambda_mask").get<double>();
  c.loss.beta_cls = l.at("beta_cls").get<double>();
  c.loss.beta_s = l.at("beta_s").get<double>();
  c.loss.beta_mask = l.at("beta_mask").get<double>();
  return c;
}

/// Adam with per-parameter first/second moment buffers.
class AdamState {
 public:
  explicit AdamState(const NamedParams& params) {
    for (const auto& [name, p] : params) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  void step(NamedParams& params, const Gradients& grads, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double bc1 = 1.0 - std::pow(b1, t_);
    const double bc2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      DiffTensor& p = params[i].second;
      if (!grads.contains(p)) continue;
      const Matrix& g = grads.at(p);
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = (b2 * v_[i].array() + (1.0 - b2) * g.array().square()).matrix();
      const Matrix update =
          ((m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps)).matrix();
      p.mutable_value() -= lr * update;
    }
  }

 private:
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  if (!(model.tau > 0.0 && model.tau < 1.0)) throw ContractError("tau must be in (0,1)");
  if (model.queries < max_instances) {
    throw ContractError("queries (" + std::to_string(model.queries) +
                        ") must cover the max instance count (" +
                        std::to_string(max_instances) + ")");
  }
  if (optimizer != "adam" && optimizer != "sgd") {
    throw ContractError("optimizer must be adam or sgd");
  }
  if (min_instances < 1 || max_instances < min_instances) {
    throw ContractError("bad instance count range");
  }
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  Model model;
  model.config = config;
  model.backbone = BackboneParams::init(config.hidden, config.channels, rng);
  model.decoder = DecoderParams::init(config, rng);
  return model;
}

NamedParams Model::named_params() const {
  NamedParams out = backbone.named_params();
  NamedParams dec = decoder.named_params();
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

DecoderOutput Model::forward(const Scene& scene) const {
  if (!scene.superpoints) throw ContractError("Model::forward: scene has no superpoints");
  DiffTensor point_features = encode_points(backbone, scene.cloud);
  SuperpointFeatures s = superpoint_pool(point_features, *scene.superpoints);
  return forward_decoder(config, decoder, s);
}

std::vector<Scene> build_scene_set(const TrainConfig& config) {
  std::vector<Scene> scenes;
  Rng rng(config.seed);
  for (int i = 0; i < config.num_scenes; ++i) {
    SyntheticSceneSpec spec;
    spec.num_instances =
        config.min_instances +
        static_cast<int>(rng.uniform_int(
            static_cast<std::uint64_t>(config.max_instances - config.min_instances + 1)));
    spec.points_per_instance = config.points_per_instance;
    spec.num_classes = config.model.num_classes;
    spec.noise_scale = config.noise_scale;
    spec.room_extent = config.room_extent;
    Scene scene = generate_synthetic_scene(rng.next_u64(), spec);
    scene.superpoints = grid_superpoints(scene.cloud, config.superpoint_cell);
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

TrainResult train(const TrainConfig& config, std::vector<Scene> scenes) {
  config.validate();
  if (scenes.empty()) throw ContractError("train: no scenes");
  for (auto& scene : scenes) {
    if (!scene.ground_truth) throw ContractError("train: scene without ground truth");
    if (!scene.superpoints) {
      scene.superpoints = grid_superpoints(scene.cloud, config.superpoint_cell);
    }
  }
  std::vector<SuperpointInstanceMasks> gt_masks;
  gt_masks.reserve(scenes.size());
  for (const auto& scene : scenes) gt_masks.push_back(project_instance_to_superpoints(scene));

  TrainResult result;
  result.checkpoint.config = config;
  result.checkpoint.model = Model::init(config.model, config.seed);
  Model& model = result.checkpoint.model;
  NamedParams params = model.named_params();
  AdamState adam(params);

  for (int step = 0; step < config.steps; ++step) {
    const std::size_t scene_idx = static_cast<std::size_t>(step) % scenes.size();
    const Scene& scene = scenes[scene_idx];
    DecoderOutput out = model.forward(scene);
    LossBreakdown loss =
        total_loss(out.predictions, gt_masks[scene_idx],
                   scene.ground_truth->instance_classes, config.model.num_classes, config.loss,
                   config.model.iterative_prediction);
    LossHistoryEntry entry{step, loss.combined.total.item(), loss.combined.cls.item(),
                           loss.combined.score.item(), loss.combined.bce.item(),
                           loss.combined.dice.item()};
    if (!std::isfinite(entry.total)) {
      std::string term = "total";
      if (!std::isfinite(entry.cls)) term = "cls";
      else if (!std::isfinite(entry.score)) term = "score";
      else if (!std::isfinite(entry.bce)) term = "bce";
      else if (!std::isfinite(entry.dice)) term = "dice";
      throw NumericalError("non-finite loss at step " + std::to_string(step) + " (term " +
                           term + ")");
    }
    result.history.push_back(entry);
    Gradients grads = backward(loss.combined.total);
    if (config.optimizer == "adam") {
      adam.step(params, grads, config.learning_rate);
    } else {
      for (auto& [name, p] : params) {
        if (grads.contains(p)) p.mutable_value() -= config.learning_rate * grads.at(p);
      }
    }
    ++result.checkpoint.step;
  }
  return result;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json doc;
  doc["step"] = ckpt.step;
  doc["config"] = train_config_to_json(ckpt.config);
  json params = json::object();
  for (const auto& [name, p] : ckpt.model.named_params()) {
    std::vector<double> values(p.value().data(), p.value().data() + p.value().size());
    params[name] = {{"shape", {p.rows(), p.cols()}}, {"values", values}};
  }
  doc["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open for writing: " + path);
  out << doc.dump(0) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open checkpoint: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint parse error: ") + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.step = doc.at("step").get<int>();
    ckpt.config = train_config_from_json(doc.at("config"));
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint config error: ") + e.what());
  }
  ckpt.model = Model::init(ckpt.config.model, ckpt.config.seed);
  const json& params = doc.at("params");
  for (auto& [name, p] : ckpt.model.named_params()) {
    if (!params.contains(name)) throw ParseError("checkpoint missing parameter " + name);
    const json& entry = params.at(name);
    const auto shape = entry.at("shape").get<std::vector<Index>>();
    if (shape.size() != 2 || shape[0] != p.rows() || shape[1] != p.cols()) {
      throw ParseError("checkpoint parameter " + name + " has shape [" +
                       (shape.size() == 2 ? std::to_string(shape[0]) + "x" + std::to_string(shape[1])
                                          : std::string("?")) +
                       "], expected [" + std::to_string(p.rows()) + "x" +
                       std::to_string(p.cols()) + "]");
    }
    const auto values = entry.at("values").get<std::vector<double>>();
    if (static_cast<Index>(values.size()) != p.rows() * p.cols()) {
      throw ParseError("checkpoint parameter " + name + " has wrong value count");
    }
    std::copy(values.begin(), values.end(), p.mutable_value().data());
  }
  return ckpt;
}

std::string loss_history_to_string(const std::vector<LossHistoryEntry>& history) {
  std::ostringstream os;
  os << "# step total cls score bce dice\n";
  for (const auto& e : history) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%d %.17g %.17g %.17g %.17g %.17g\n", e.step, e.total, e.cls,
                  e.score, e.bce, e.dice);
    os << buf;
  }
  return os.str();
}

}  // namespace spf
