#include "spf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace spf {

namespace {

double index_set_iou(const std::vector<Index>& a, const std::vector<Index>& b) {
  // Both sorted.
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct FlatPrediction {
  double score;
  std::size_t scene;
  std::size_t index_in_scene;  // emission order, breaks score ties deterministically
  const std::vector<Index>* points;
};

// Greedy score-ordered matching of one class's predictions at one IoU
// threshold; returns TP flags in sorted-prediction order plus the gt count.
struct MatchResult {
  std::vector<bool> tp;
  int n_gt = 0;
};

MatchResult greedy_match(const std::vector<FlatPrediction>& preds,
                         const std::vector<std::vector<GtInstance>>& gts_per_scene, int class_id,
                         double threshold) {
  MatchResult result;
  std::vector<std::vector<bool>> gt_used(gts_per_scene.size());
  for (std::size_t s = 0; s < gts_per_scene.size(); ++s) {
    gt_used[s].assign(gts_per_scene[s].size(), false);
    for (const auto& gt : gts_per_scene[s]) {
      if (gt.class_id == class_id) ++result.n_gt;
    }
  }
  result.tp.reserve(preds.size());
  for (const auto& pred : preds) {
    const auto& gts = gts_per_scene[pred.scene];
    double best_iou = 0.0;
    int best = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != class_id || gt_used[pred.scene][g]) continue;
      const double iou = index_set_iou(*pred.points, gts[g].point_indices);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= threshold) {
      gt_used[pred.scene][static_cast<std::size_t>(best)] = true;
      result.tp.push_back(true);
    } else {
      result.tp.push_back(false);
    }
  }
  return result;
}

// Area under the interpolated precision-recall curve.
double average_precision(const std::vector<bool>& tp, int n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  int tps = 0, fps = 0;
  for (bool hit : tp) {
    hit ? ++tps : ++fps;
    precision.push_back(static_cast<double>(tps) / (tps + fps));
    recall.push_back(static_cast<double>(tps) / n_gt);
  }
  double ap = 0.0;
  double max_prec = 0.0;
  double prev_recall = 0.0;
  // Sweep from the right so precision is the running max.
  std::vector<double> interp(precision.size());
  for (std::size_t i = precision.size(); i-- > 0;) {
    max_prec = std::max(max_prec, precision[i]);
    interp[i] = max_prec;
  }
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * interp[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::vector<FlatPrediction> sorted_class_predictions(
    const std::vector<std::vector<InstancePrediction>>& preds_per_scene, int class_id) {
  std::vector<FlatPrediction> flat;
  for (std::size_t s = 0; s < preds_per_scene.size(); ++s) {
    for (std::size_t i = 0; i < preds_per_scene[s].size(); ++i) {
      const auto& p = preds_per_scene[s][i];
      if (p.class_id == class_id) flat.push_back({p.score, s, i, &p.point_indices});
    }
  }
  std::stable_sort(flat.begin(), flat.end(), [](const FlatPrediction& a, const FlatPrediction& b) {
    return a.score > b.score;
  });
  return flat;
}

std::set<int> classes_with_gt(const std::vector<std::vector<GtInstance>>& gts_per_scene) {
  std::set<int> classes;
  for (const auto& gts : gts_per_scene) {
    for (const auto& gt : gts) classes.insert(gt.class_id);
  }
  return classes;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double mask_score(const Eigen::RowVectorXd& mask_probs) {
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index j = 0; j < mask_probs.size(); ++j) {
    if (mask_probs(j) > 0.5) {
      sum += mask_probs(j);
      ++count;
    }
  }
  return count > 0 ? sum / count : 0.0;
}

double final_score(double p_class, double s, double ms) {
  return std::cbrt(p_class * s * ms);
}

std::vector<InstancePrediction> rank_and_emit(const LayerPrediction& last_pred,
                                              const SuperpointPartition& partition,
                                              const RankConfig& config) {
  const Matrix& probs = last_pred.class_probs.value();
  const Matrix& masks = last_pred.masks.value();
  const Matrix& scores = last_pred.scores.value();
  const Index k = probs.rows();
  const int num_real_classes = static_cast<int>(probs.cols()) - 1;

  struct Candidate {
    double score;
    Index query;
    InstancePrediction pred;
  };
  std::vector<Candidate> candidates;
  for (Index i = 0; i < k; ++i) {
    int best_class = 0;
    for (int c = 1; c < num_real_classes; ++c) {
      if (probs(i, c) > probs(i, best_class)) best_class = c;
    }
    const double p = probs(i, best_class);
    const double ms = mask_score(masks.row(i));
    const double final = final_score(p, scores(i, 0), ms);

    InstancePrediction pred;
    pred.class_id = best_class;
    pred.score = final;
    for (std::size_t j = 0; j < partition.ids.size(); ++j) {
      if (masks(i, partition.ids[j]) >= 0.5) pred.point_indices.push_back(static_cast<Index>(j));
    }
    if (pred.point_indices.empty() || final < config.score_floor) continue;
    candidates.push_back({final, i, std::move(pred)});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  std::vector<InstancePrediction> out;
  for (auto& c : candidates) {
    if (config.top_n >= 0 && static_cast<int>(out.size()) >= config.top_n) break;
    out.push_back(std::move(c.pred));
  }
  return out;
}

std::vector<GtInstance> gt_instances_from_scene(const Scene& scene) {
  if (!scene.ground_truth) throw ContractError("gt_instances_from_scene: no ground truth");
  const auto& gt = *scene.ground_truth;
  std::vector<GtInstance> out(static_cast<std::size_t>(gt.instance_count()));
  for (std::size_t k = 0; k < out.size(); ++k) out[k].class_id = gt.instance_classes[k];
  for (std::size_t i = 0; i < gt.point_instance_ids.size(); ++i) {
    const int inst = gt.point_instance_ids[i];
    if (inst >= 0) out[static_cast<std::size_t>(inst)].point_indices.push_back(static_cast<Index>(i));
  }
  return out;
}

APResult compute_ap(const std::vector<std::vector<InstancePrediction>>& preds_per_scene,
                    const std::vector<std::vector<GtInstance>>& gts_per_scene) {
  APResult result;
  const std::set<int> classes = classes_with_gt(gts_per_scene);
  if (classes.empty()) return result;

  std::vector<double> grid;
  for (int t = 50; t <= 95; t += 5) grid.push_back(t / 100.0);

  double map_sum = 0.0, ap50_sum = 0.0, ap25_sum = 0.0;
  for (int c : classes) {
    const auto flat = sorted_class_predictions(preds_per_scene, c);
    double class_sum = 0.0;
    for (double t : grid) {
      const MatchResult m = greedy_match(flat, gts_per_scene, c, t);
      const double ap = average_precision(m.tp, m.n_gt);
      class_sum += ap;
      if (t == 0.50) result.per_class_ap50[c] = ap;
    }
    result.per_class_ap[c] = class_sum / static_cast<double>(grid.size());
    map_sum += result.per_class_ap[c];
    ap50_sum += result.per_class_ap50[c];
    const MatchResult m25 = greedy_match(flat, gts_per_scene, c, 0.25);
    ap25_sum += average_precision(m25.tp, m25.n_gt);
  }
  const double nc = static_cast<double>(classes.size());
  result.map = map_sum / nc;
  result.ap50 = ap50_sum / nc;
  result.ap25 = ap25_sum / nc;
  const auto [prec, rec] = precision_recall(preds_per_scene, gts_per_scene, 0.5);
  result.m_prec = prec;
  result.m_rec = rec;
  return result;
}

std::pair<double, double> precision_recall(
    const std::vector<std::vector<InstancePrediction>>& preds_per_scene,
    const std::vector<std::vector<GtInstance>>& gts_per_scene, double iou_threshold) {
  const std::set<int> classes = classes_with_gt(gts_per_scene);
  if (classes.empty()) return {0.0, 0.0};
  double prec_sum = 0.0, rec_sum = 0.0;
  for (int c : classes) {
    const auto flat = sorted_class_predictions(preds_per_scene, c);
    const MatchResult m = greedy_match(flat, gts_per_scene, c, iou_threshold);
    int tps = 0;
    for (bool hit : m.tp) tps += hit ? 1 : 0;
    // Precision with zero predictions is 0 by convention.
    prec_sum += m.tp.empty() ? 0.0 : static_cast<double>(tps) / static_cast<double>(m.tp.size());
    rec_sum += m.n_gt > 0 ? static_cast<double>(tps) / m.n_gt : 0.0;
  }
  const double nc = static_cast<double>(classes.size());
  return {prec_sum / nc, rec_sum / nc};
}

std::string predictions_to_string(const std::vector<InstancePrediction>& preds) {
  std::ostringstream os;
  for (const auto& p : preds) {
    os << p.class_id << " " << format_double(p.score);
    for (Index idx : p.point_indices) os << " " << idx;
    os << "\n";
  }
  return os.str();
}

void save_predictions(const std::vector<InstancePrediction>& preds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open for writing: " + path);
  out << predictions_to_string(preds);
}

std::vector<InstancePrediction> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open prediction file: " + path);
  std::vector<InstancePrediction> preds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    InstancePrediction p;
    if (!(ls >> p.class_id >> p.score)) {
      throw ParseError("prediction file " + path + ": malformed line " + std::to_string(line_no));
    }
    Index idx;
    while (ls >> idx) p.point_indices.push_back(idx);
    std::sort(p.point_indices.begin(), p.point_indices.end());
    preds.push_back(std::move(p));
  }
  return preds;
}

std::string format_metrics_report(const APResult& result) {
  std::ostringstream os;
  os << "class      AP      AP50\n";
  for (const auto& [c, ap] : result.per_class_ap) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-8d %.4f  %.4f\n", c, ap, result.per_class_ap50.at(c));
    os << buf;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "mAP   %.4f\nAP50  %.4f\nAP25  %.4f\nmPrec %.4f\nmRec  %.4f\n", result.map,
                result.ap50, result.ap25, result.m_prec, result.m_rec);
  os << buf;
  return os.str();
}

}  // namespace spf
