#pragma once

#include "spf/decoder.hpp"
#include "spf/scene.hpp"
#include "spf/tensor.hpp"

#include <utility>
#include <vector>

namespace spf {

struct LossCoefficients {
  double lambda_cls = 0.5;
  double lambda_mask = 1.0;
  double beta_cls = 0.5;
  double beta_s = 0.5;
  double beta_mask = 1.0;
};

/// Pairwise proposal/ground-truth matching cost, with the classification
/// and mask components kept separately for auditing.
struct CostMatrix {
  Matrix total;      // [K x N_gt]
  Matrix cls_term;   // -p_{i,c_k}
  Matrix mask_term;  // BCE + smoothed dice
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (proposal, gt), one per ground truth
  std::vector<int> unassigned_proposals;
};

struct LossTerms {
  DiffTensor cls, score, bce, dice, total;
};

struct LossBreakdown {
  LossTerms combined;
  std::vector<LossTerms> per_layer;
};

/// BCE + Laplace-smoothed dice between a [0,1] proposal mask and a binary
/// ground-truth mask, both length M.
double mask_matching_cost(const Eigen::RowVectorXd& proposal_mask,
                          const Eigen::RowVectorXd& gt_mask, double eps = 1e-7);

CostMatrix matching_cost_matrix(const LayerPrediction& pred,
                                const SuperpointInstanceMasks& gt_masks,
                                const std::vector<int>& gt_classes,
                                const LossCoefficients& coeffs = {});

/// Minimum-cost injective matching covering every ground truth (K >= N_gt).
Assignment hungarian_assign(const CostMatrix& cost);
Assignment hungarian_assign(const Matrix& cost);

DiffTensor classification_loss(const LayerPrediction& pred, const Assignment& assignment,
                               const std::vector<int>& gt_classes, int num_classes);

std::pair<DiffTensor, DiffTensor> mask_loss(const LayerPrediction& pred,
                                            const Assignment& assignment,
                                            const SuperpointInstanceMasks& gt_masks);

DiffTensor score_loss(const LayerPrediction& pred, const Assignment& assignment,
                      const SuperpointInstanceMasks& gt_masks);

/// Assignment plus the per-pair IoU targets of the score loss, both of which
/// are discrete choices held constant while differentiating.
struct FrozenMatch {
  Assignment assignment;
  std::vector<double> pair_ious;  // aligned with assignment.pairs
};

FrozenMatch freeze_match(const LayerPrediction& pred, const SuperpointInstanceMasks& gt_masks,
                         const std::vector<int>& gt_classes, const LossCoefficients& coeffs);

LossBreakdown total_loss_frozen(const std::vector<LayerPrediction>& predictions,
                                const std::vector<FrozenMatch>& matches,
                                const SuperpointInstanceMasks& gt_masks,
                                const std::vector<int>& gt_classes, int num_classes,
                                const LossCoefficients& coeffs = {});

/// Deep-supervised multi-task loss: independent matching per head, mean over
/// heads. With iterative_prediction off, only the last head is supervised.
LossBreakdown total_loss(const std::vector<LayerPrediction>& predictions,
                         const SuperpointInstanceMasks& gt_masks,
                         const std::vector<int>& gt_classes, int num_classes,
                         const LossCoefficients& coeffs = {},
                         bool iterative_prediction = true);

/// IoU of a binarized proposal mask (threshold 0.5) against a binary gt mask.
double binary_mask_iou(const Eigen::RowVectorXd& proposal_mask,
                       const Eigen::RowVectorXd& gt_mask);

}  // namespace spf
