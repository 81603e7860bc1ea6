#include "spf/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace spf {

namespace {

// Potential-based Hungarian method for n rows over m >= n columns,
// O(n^2 m). Returns the matched column per row.
std::vector<int> solve_assignment(const Matrix& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

DiffTensor scalar_zero() { return DiffTensor::scalar(0.0); }

}  // namespace

double mask_matching_cost(const Eigen::RowVectorXd& proposal_mask,
                          const Eigen::RowVectorXd& gt_mask, double eps) {
  if (proposal_mask.size() != gt_mask.size()) {
    throw ContractError("mask_matching_cost: mask lengths differ");
  }
  const auto m = proposal_mask.array().max(eps).min(1.0 - eps);
  const auto g = gt_mask.array();
  const double bce = -((g * m.log()) + (1.0 - g) * (1.0 - m).log()).mean();
  const double inter = (proposal_mask.array() * g).sum();
  const double dice = 1.0 - 2.0 * (inter + 1.0) / (proposal_mask.sum() + gt_mask.sum() + 1.0);
  return bce + dice;
}

CostMatrix matching_cost_matrix(const LayerPrediction& pred,
                                const SuperpointInstanceMasks& gt_masks,
                                const std::vector<int>& gt_classes,
                                const LossCoefficients& coeffs) {
  const Index k = pred.masks.rows();
  const Index n_gt = gt_masks.masks.rows();
  CostMatrix cost;
  cost.cls_term.resize(k, n_gt);
  cost.mask_term.resize(k, n_gt);
  cost.total.resize(k, n_gt);
  const Matrix& probs = pred.class_probs.value();
  const Matrix& masks = pred.masks.value();
  for (Index i = 0; i < k; ++i) {
    for (Index g = 0; g < n_gt; ++g) {
      cost.cls_term(i, g) = -probs(i, gt_classes[static_cast<std::size_t>(g)]);
      cost.mask_term(i, g) = mask_matching_cost(masks.row(i), gt_masks.masks.row(g));
      cost.total(i, g) =
          coeffs.lambda_cls * cost.cls_term(i, g) + coeffs.lambda_mask * cost.mask_term(i, g);
    }
  }
  return cost;
}

Assignment hungarian_assign(const Matrix& cost) {
  const int k = static_cast<int>(cost.rows());
  const int n_gt = static_cast<int>(cost.cols());
  if (k < 1) throw ContractError("hungarian_assign: need at least one proposal");
  if (n_gt > k) {
    throw ContractError("hungarian_assign: more ground truths (" + std::to_string(n_gt) +
                        ") than proposals (" + std::to_string(k) + ")");
  }
  Assignment out;
  std::vector<char> taken(static_cast<std::size_t>(k), 0);
  if (n_gt > 0) {
    // Rows are ground truths so every one gets covered.
    const std::vector<int> gt_to_proposal = solve_assignment(cost.transpose());
    for (int g = 0; g < n_gt; ++g) {
      out.pairs.emplace_back(gt_to_proposal[g], g);
      taken[static_cast<std::size_t>(gt_to_proposal[g])] = 1;
    }
    std::sort(out.pairs.begin(), out.pairs.end());
  }
  for (int i = 0; i < k; ++i) {
    if (!taken[static_cast<std::size_t>(i)]) out.unassigned_proposals.push_back(i);
  }
  return out;
}

Assignment hungarian_assign(const CostMatrix& cost) { return hungarian_assign(cost.total); }

DiffTensor classification_loss(const LayerPrediction& pred, const Assignment& assignment,
                               const std::vector<int>& gt_classes, int num_classes) {
  const Index k = pred.class_probs.rows();
  Matrix target = Matrix::Zero(k, pred.class_probs.cols());
  for (Index i = 0; i < k; ++i) target(i, num_classes) = 1.0;  // "no instance"
  for (const auto& [proposal, gt] : assignment.pairs) {
    target.row(proposal).setZero();
    target(proposal, gt_classes[static_cast<std::size_t>(gt)]) = 1.0;
  }
  DiffTensor picked = mul(DiffTensor::constant(std::move(target)),
                          log_clamped(pred.class_probs));
  return scale(sum(picked), -1.0 / static_cast<double>(k));
}

std::pair<DiffTensor, DiffTensor> mask_loss(const LayerPrediction& pred,
                                            const Assignment& assignment,
                                            const SuperpointInstanceMasks& gt_masks) {
  if (assignment.pairs.empty()) return {scalar_zero(), scalar_zero()};
  std::vector<DiffTensor> bces, dices;
  for (const auto& [proposal, gt] : assignment.pairs) {
    DiffTensor m = gather_rows(pred.masks, {proposal});
    Matrix g = gt_masks.masks.row(gt);
    bces.push_back(bce_mean(m, g));
    DiffTensor inter = sum(mul(m, DiffTensor::constant(g)));
    DiffTensor num = scale(add_scalar(inter, 1.0), 2.0);
    DiffTensor den = add_scalar(sum(m), g.sum() + 1.0);
    dices.push_back(add_scalar(scale(div(num, den), -1.0), 1.0));
  }
  const double inv = 1.0 / static_cast<double>(assignment.pairs.size());
  DiffTensor bce = scale(sum(concat_cols(bces)), inv);
  DiffTensor dice = scale(sum(concat_cols(dices)), inv);
  return {bce, dice};
}

double binary_mask_iou(const Eigen::RowVectorXd& proposal_mask,
                       const Eigen::RowVectorXd& gt_mask) {
  double inter = 0.0, uni = 0.0;
  for (Eigen::Index j = 0; j < proposal_mask.size(); ++j) {
    const bool a = proposal_mask(j) >= 0.5;
    const bool b = gt_mask(j) >= 0.5;
    inter += (a && b) ? 1.0 : 0.0;
    uni += (a || b) ? 1.0 : 0.0;
  }
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

DiffTensor score_loss_with_targets(const LayerPrediction& pred, const Assignment& assignment,
                                   const std::vector<double>& pair_ious) {
  std::vector<DiffTensor> terms;
  for (std::size_t n = 0; n < assignment.pairs.size(); ++n) {
    const double iou = pair_ious[n];
    if (iou <= 0.5) continue;  // only high-quality proposals supervise the score
    DiffTensor s = gather_rows(pred.scores, {assignment.pairs[n].first});
    DiffTensor d = add_scalar(s, -iou);
    terms.push_back(mul(d, d));
  }
  if (terms.empty()) return scalar_zero();
  return scale(sum(concat_cols(terms)), 1.0 / static_cast<double>(terms.size()));
}

std::vector<double> pair_ious_of(const LayerPrediction& pred, const Assignment& assignment,
                                 const SuperpointInstanceMasks& gt_masks) {
  std::vector<double> ious;
  ious.reserve(assignment.pairs.size());
  for (const auto& [proposal, gt] : assignment.pairs) {
    ious.push_back(binary_mask_iou(pred.masks.value().row(proposal), gt_masks.masks.row(gt)));
  }
  return ious;
}

}  // namespace

DiffTensor score_loss(const LayerPrediction& pred, const Assignment& assignment,
                      const SuperpointInstanceMasks& gt_masks) {
  return score_loss_with_targets(pred, assignment, pair_ious_of(pred, assignment, gt_masks));
}

FrozenMatch freeze_match(const LayerPrediction& pred, const SuperpointInstanceMasks& gt_masks,
                         const std::vector<int>& gt_classes, const LossCoefficients& coeffs) {
  FrozenMatch match;
  match.assignment = hungarian_assign(matching_cost_matrix(pred, gt_masks, gt_classes, coeffs));
  match.pair_ious = pair_ious_of(pred, match.assignment, gt_masks);
  return match;
}

LossBreakdown total_loss_frozen(const std::vector<LayerPrediction>& predictions,
                                const std::vector<FrozenMatch>& matches,
                                const SuperpointInstanceMasks& gt_masks,
                                const std::vector<int>& gt_classes, int num_classes,
                                const LossCoefficients& coeffs) {
  if (predictions.size() != matches.size() || predictions.empty()) {
    throw ContractError("total_loss_frozen: predictions/matches mismatch");
  }
  LossBreakdown out;
  std::vector<DiffTensor> totals, clss, scores, bces, dices;
  for (std::size_t l = 0; l < predictions.size(); ++l) {
    const LayerPrediction& pred = predictions[l];
    const Assignment& assignment = matches[l].assignment;
    LossTerms terms;
    terms.cls = classification_loss(pred, assignment, gt_classes, num_classes);
    auto [bce, dice] = mask_loss(pred, assignment, gt_masks);
    terms.bce = bce;
    terms.dice = dice;
    terms.score = score_loss_with_targets(pred, assignment, matches[l].pair_ious);
    terms.total = scale(terms.cls, coeffs.beta_cls) + scale(terms.score, coeffs.beta_s) +
                  scale(terms.bce + terms.dice, coeffs.beta_mask);
    totals.push_back(terms.total);
    clss.push_back(terms.cls);
    scores.push_back(terms.score);
    bces.push_back(terms.bce);
    dices.push_back(terms.dice);
    out.per_layer.push_back(std::move(terms));
  }
  const double inv = 1.0 / static_cast<double>(totals.size());
  out.combined.total = scale(sum(concat_cols(totals)), inv);
  out.combined.cls = scale(sum(concat_cols(clss)), inv);
  out.combined.score = scale(sum(concat_cols(scores)), inv);
  out.combined.bce = scale(sum(concat_cols(bces)), inv);
  out.combined.dice = scale(sum(concat_cols(dices)), inv);
  return out;
}

LossBreakdown total_loss(const std::vector<LayerPrediction>& predictions,
                         const SuperpointInstanceMasks& gt_masks,
                         const std::vector<int>& gt_classes, int num_classes,
                         const LossCoefficients& coeffs, bool iterative_prediction) {
  if (predictions.empty()) throw ContractError("total_loss: no predictions");
  std::vector<LayerPrediction> supervised =
      iterative_prediction ? predictions
                           : std::vector<LayerPrediction>{predictions.back()};
  std::vector<FrozenMatch> matches;
  matches.reserve(supervised.size());
  for (const auto& pred : supervised) {
    matches.push_back(freeze_match(pred, gt_masks, gt_classes, coeffs));
  }
  return total_loss_frozen(supervised, matches, gt_masks, gt_classes, num_classes, coeffs);
}

}  // namespace spf
