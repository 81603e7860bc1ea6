#pragma once

#include "spf/decoder.hpp"
#include "spf/scene.hpp"

#include <map>
#include <string>
#include <vector>

namespace spf {

/// One ranked instance proposal materialized to point level.
struct InstancePrediction {
  int class_id = 0;
  double score = 0.0;                 // final sorting score
  std::vector<Index> point_indices;   // sorted members of the binary point mask
};

struct GtInstance {
  int class_id = 0;
  std::vector<Index> point_indices;
};

struct APResult {
  double map = 0.0;
  double ap50 = 0.0;
  double ap25 = 0.0;
  double m_prec = 0.0;
  double m_rec = 0.0;
  std::map<int, double> per_class_ap;    // averaged over the 0.50..0.95 grid
  std::map<int, double> per_class_ap50;
};

struct RankConfig {
  double score_floor = 0.0;
  int top_n = -1;  // -1 = keep all
};

/// Mean of superpoint probabilities strictly above 0.5; 0 if none qualify.
double mask_score(const Eigen::RowVectorXd& mask_probs);

/// Cube root of p * s * ms.
double final_score(double p_class, double s, double ms);

/// NMS-free ranking of the last head's proposals.
std::vector<InstancePrediction> rank_and_emit(const LayerPrediction& last_pred,
                                              const SuperpointPartition& partition,
                                              const RankConfig& config = {});

std::vector<GtInstance> gt_instances_from_scene(const Scene& scene);

/// AP over IoU thresholds 0.50..0.95 step 0.05, plus AP50/AP25 and
/// precision/recall at IoU 0.5; greedy score-ordered matching per class.
APResult compute_ap(const std::vector<std::vector<InstancePrediction>>& preds_per_scene,
                    const std::vector<std::vector<GtInstance>>& gts_per_scene);

std::pair<double, double> precision_recall(
    const std::vector<std::vector<InstancePrediction>>& preds_per_scene,
    const std::vector<std::vector<GtInstance>>& gts_per_scene, double iou_threshold = 0.5);

// Prediction file: one line per instance, "class score idx idx ...".
std::string predictions_to_string(const std::vector<InstancePrediction>& preds);
void save_predictions(const std::vector<InstancePrediction>& preds, const std::string& path);
std::vector<InstancePrediction> load_predictions(const std::string& path);

std::string format_metrics_report(const APResult& result);

}  // namespace spf
