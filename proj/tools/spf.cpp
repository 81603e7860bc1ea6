#include "spf/eval.hpp"
#include "spf/gradcheck.hpp"
#include "spf/matching.hpp"
#include "spf/scene.hpp"
#include "spf/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw UsageError("bad boolean value: " + v);
}

// Flat key = value with [sections]; keys mirror TrainConfig fields.
// scene_dir (train section) switches training input from synthetic
// generation to a directory of scene files.
struct ResolvedConfig {
  spf::TrainConfig train;
  std::string scene_dir;
};

void apply_key(ResolvedConfig& cfg, const std::string& section, const std::string& key,
               const std::string& value) {
  auto& t = cfg.train;
  auto& m = t.model;
  auto& l = t.loss;
  try {
    if (section == "train") {
      if (key == "seed") t.seed = std::stoull(value);
      else if (key == "learning_rate") t.learning_rate = std::stod(value);
      else if (key == "steps") t.steps = std::stoi(value);
      else if (key == "optimizer") t.optimizer = value;
      else if (key == "num_scenes") t.num_scenes = std::stoi(value);
      else if (key == "min_instances") t.min_instances = std::stoi(value);
      else if (key == "max_instances") t.max_instances = std::stoi(value);
      else if (key == "points_per_instance") t.points_per_instance = std::stoi(value);
      else if (key == "noise_scale") t.noise_scale = std::stod(value);
      else if (key == "room_extent") t.room_extent = std::stod(value);
      else if (key == "superpoint_cell") t.superpoint_cell = std::stod(value);
      else if (key == "scene_dir") cfg.scene_dir = value;
      else throw UsageError("unknown config key: " + section + "." + key);
    } else if (section == "model") {
      if (key == "hidden") m.hidden = std::stoi(value);
      else if (key == "channels") m.channels = std::stoi(value);
      else if (key == "embed_dim") m.embed_dim = std::stoi(value);
      else if (key == "heads") m.heads = std::stoi(value);
      else if (key == "ffn_width") m.ffn_width = std::stoi(value);
      else if (key == "layers") m.layers = std::stoi(value);
      else if (key == "queries") m.queries = std::stoi(value);
      else if (key == "num_classes") m.num_classes = std::stoi(value);
      else if (key == "tau") m.tau = std::stod(value);
      else if (key == "use_attention_mask") m.use_attention_mask = parse_bool(value);
      else if (key == "cross_attention_first") m.cross_attention_first = parse_bool(value);
      else if (key == "iterative_prediction") m.iterative_prediction = parse_bool(value);
      else throw UsageError("unknown config key: " + section + "." + key);
    } else if (section == "loss") {
      if (key == "lambda_cls") l.lambda_cls = std::stod(value);
      else if (key == "lambda_mask") l.lambda_mask = std::stod(value);
      else if (key == "beta_cls") l.beta_cls = std::stod(value);
      else if (key == "beta_s") l.beta_s = std::stod(value);
      else if (key == "beta_mask") l.beta_mask = std::stod(value);
      else throw UsageError("unknown config key: " + section + "." + key);
    } else {
      throw UsageError("unknown config section: " + section);
    }
  } catch (const std::invalid_argument&) {
    throw UsageError("bad value for " + section + "." + key + ": " + value);
  }
}

ResolvedConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  ResolvedConfig cfg;
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line = line.substr(0, comment);
    const auto begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos) continue;
    const auto end = line.find_last_not_of(" \t\r");
    line = line.substr(begin, end - begin + 1);
    if (line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
    };
    trim(key);
    trim(value);
    apply_key(cfg, section, key, value);
  }
  return cfg;
}

void apply_overrides(ResolvedConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    const auto dot = kv.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw UsageError("--set expects section.key=value, got: " + kv);
    }
    apply_key(cfg, kv.substr(0, dot), kv.substr(dot + 1, eq - dot - 1), kv.substr(eq + 1));
  }
}

void log_resolved_config(const ResolvedConfig& cfg) {
  const auto& t = cfg.train;
  const auto& m = t.model;
  const auto& l = t.loss;
  std::printf("[train] seed=%llu learning_rate=%g steps=%d optimizer=%s num_scenes=%d "
              "min_instances=%d max_instances=%d points_per_instance=%d noise_scale=%g "
              "room_extent=%g superpoint_cell=%g scene_dir=%s\n",
              static_cast<unsigned long long>(t.seed), t.learning_rate, t.steps,
              t.optimizer.c_str(), t.num_scenes, t.min_instances, t.max_instances,
              t.points_per_instance, t.noise_scale, t.room_extent, t.superpoint_cell,
              cfg.scene_dir.empty() ? "<synthetic>" : cfg.scene_dir.c_str());
  std::printf("[model] hidden=%d channels=%d embed_dim=%d heads=%d ffn_width=%d layers=%d "
              "queries=%d num_classes=%d tau=%g use_attention_mask=%d "
              "cross_attention_first=%d iterative_prediction=%d\n",
              m.hidden, m.channels, m.embed_dim, m.heads, m.ffn_width, m.layers, m.queries,
              m.num_classes, m.tau, m.use_attention_mask, m.cross_attention_first,
              m.iterative_prediction);
  std::printf("[loss] lambda_cls=%g lambda_mask=%g beta_cls=%g beta_s=%g beta_mask=%g\n",
              l.lambda_cls, l.lambda_mask, l.beta_cls, l.beta_s, l.beta_mask);
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::vector<std::string>& overrides, bool seed_given, std::uint64_t seed) {
  ResolvedConfig cfg = load_config_file(config_path);
  apply_overrides(cfg, overrides);
  if (seed_given) cfg.train.seed = seed;
  cfg.train.validate();
  log_resolved_config(cfg);

  std::vector<spf::Scene> scenes;
  if (cfg.scene_dir.empty()) {
    scenes = spf::build_scene_set(cfg.train);
  } else {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(cfg.scene_dir)) {
      if (entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw UsageError("no .json scenes in " + cfg.scene_dir);
    for (const auto& f : files) scenes.push_back(spf::load_scene(f.string()));
  }

  spf::TrainResult result = spf::train(cfg.train, std::move(scenes));
  fs::create_directories(out_dir);
  spf::save_checkpoint(result.checkpoint, (fs::path(out_dir) / "checkpoint.json").string());
  std::ofstream hist((fs::path(out_dir) / "loss_history.txt").string());
  hist << spf::loss_history_to_string(result.history);
  std::printf("final loss %.6f after %d steps; checkpoint written to %s\n",
              result.history.back().total, result.checkpoint.step, out_dir.c_str());
  return kExitOk;
}

void write_attention_tables(const std::string& out_base, const spf::DecoderOutput& output,
                            const spf::SuperpointPartition& partition) {
  for (std::size_t l = 0; l < output.attention_weights.size(); ++l) {
    const spf::Matrix& w = output.attention_weights[l];
    std::ofstream out(out_base + ".attn" + std::to_string(l + 1) + ".txt");
    out << "layer " << (l + 1) << " queries " << w.rows() << " superpoints " << w.cols()
        << " points " << partition.ids.size() << "\n";
    char buf[40];
    for (spf::Index q = 0; q < w.rows(); ++q) {
      out << "sp " << q;
      for (spf::Index j = 0; j < w.cols(); ++j) {
        std::snprintf(buf, sizeof(buf), " %.17g", w(q, j));
        out << buf;
      }
      out << "\npt " << q;
      // Superpoint weight propagated to member points.
      for (int id : partition.ids) {
        std::snprintf(buf, sizeof(buf), " %.17g", w(q, id));
        out << buf;
      }
      out << "\n";
    }
  }
}

int cmd_infer(const std::string& ckpt_path, const std::string& scene_path,
              const std::string& out_path, double score_floor, int top_n, bool dump_attention) {
  spf::Checkpoint ckpt = spf::load_checkpoint(ckpt_path);
  spf::Scene scene = spf::load_scene(scene_path);
  if (!scene.superpoints) {
    scene.superpoints = spf::grid_superpoints(scene.cloud, ckpt.config.superpoint_cell);
  }
  spf::DecoderOutput output = ckpt.model.forward(scene);
  spf::RankConfig rank;
  rank.score_floor = score_floor;
  rank.top_n = top_n;
  const auto preds = spf::rank_and_emit(output.predictions.back(), *scene.superpoints, rank);
  spf::save_predictions(preds, out_path);
  if (dump_attention) write_attention_tables(out_path, output, *scene.superpoints);
  std::printf("wrote %zu instances to %s\n", preds.size(), out_path.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& out_path) {
  std::vector<fs::path> gt_files;
  for (const auto& entry : fs::directory_iterator(gt_dir)) {
    if (entry.path().extension() == ".json") gt_files.push_back(entry.path());
  }
  std::sort(gt_files.begin(), gt_files.end());
  if (gt_files.empty()) throw UsageError("no .json scenes in " + gt_dir);

  std::vector<std::string> missing;
  std::vector<std::vector<spf::InstancePrediction>> preds;
  std::vector<std::vector<spf::GtInstance>> gts;
  for (const auto& gt_file : gt_files) {
    const fs::path pred_file = fs::path(pred_dir) / (gt_file.stem().string() + ".txt");
    if (!fs::exists(pred_file)) {
      missing.push_back(gt_file.stem().string());
      continue;
    }
    gts.push_back(spf::gt_instances_from_scene(spf::load_scene(gt_file.string())));
    preds.push_back(spf::load_predictions(pred_file.string()));
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += " " + id;
    throw UsageError("missing predictions for scenes:" + list);
  }
  const spf::APResult result = spf::compute_ap(preds, gts);
  const std::string report = spf::format_metrics_report(result);
  std::fputs(report.c_str(), stdout);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << report;
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& corrupt) {
  const spf::GradcheckReport report = spf::run_gradcheck(seed, corrupt);
  std::fputs(report.summary().c_str(), stdout);
  if (!report.passed()) {
    std::printf("gradcheck FAILED: %s\n", report.first_failure().c_str());
    return kExitCheckFailure;
  }
  std::printf("gradcheck passed (tolerance %.0e)\n", report.tolerance);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Superpoint-transformer 3D instance segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path, scene_path, pred_dir, gt_dir;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1;
  double score_floor = 0.0;
  int top_n = -1;
  bool dump_attention = false;
  std::string corrupt;

  auto* train = app.add_subcommand("train", "train on synthetic or loaded scenes");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--out", out_path, "output directory")->required();
  train->add_option("--set", overrides, "override config: section.key=value");
  auto* train_seed = train->add_option("--seed", seed, "override train seed");

  auto* infer = app.add_subcommand("infer", "run inference on one scene");
  infer->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  infer->add_option("--scene", scene_path, "scene file")->required();
  infer->add_option("--out", out_path, "prediction output file")->required();
  infer->add_option("--score-floor", score_floor, "drop proposals below this score");
  infer->add_option("--top-n", top_n, "keep at most N proposals");
  infer->add_flag("--dump-attention", dump_attention, "write per-layer attention tables");

  auto* eval = app.add_subcommand("eval", "evaluate predictions against ground truth");
  eval->add_option("--pred-dir", pred_dir, "prediction directory")->required();
  eval->add_option("--gt-dir", gt_dir, "ground-truth scene directory")->required();
  eval->add_option("--out", out_path, "metrics report file");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient oracle");
  gradcheck->add_option("--seed", seed, "oracle seed");
  gradcheck->add_option("--corrupt", corrupt, "negative-control hook: corrupt this kernel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) {
      return cmd_train(config_path, out_path, overrides, train_seed->count() > 0, seed);
    }
    if (infer->parsed()) {
      return cmd_infer(ckpt_path, scene_path, out_path, score_floor, top_n, dump_attention);
    }
    if (eval->parsed()) return cmd_eval(pred_dir, gt_dir, out_path);
    if (gradcheck->parsed()) return cmd_gradcheck(seed, corrupt);
  } catch (const spf::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
