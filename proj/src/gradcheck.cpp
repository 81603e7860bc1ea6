#include "spf/gradcheck.hpp"

#include "spf/matching.hpp"
#include "spf/rng.hpp"
#include "spf/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace spf {

namespace {

Matrix random_matrix(Index rows, Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Detached copy of x scaled by 0.001: visible to central differences (the
// forward is rebuilt from the current values) but not to backward().
DiffTensor corruption_term(const DiffTensor& x) {
  return scale(sum(DiffTensor::constant(x.value())), 1e-3);
}

struct Check {
  std::string name;
  std::function<DiffTensor()> f;
  std::vector<DiffTensor> params;
  // Central differences balance truncation (grows with the step) against
  // roundoff in f (shrinks with it). No single step resolves every entry of
  // a deep composite: near-zero gradients need a large step to beat roundoff
  // at the relative-error floor, while entries that shift an activation
  // across the relu kink need a small one. Each entry passes if any listed
  // step confirms the analytic value; a wrong gradient fails at all of them.
  std::vector<double> steps = {1e-6};
};

double multi_step_check(const std::function<DiffTensor()>& f,
                        const std::vector<DiffTensor>& params,
                        const std::vector<double>& steps) {
  DiffTensor loss = f();
  Gradients grads = backward(loss);
  double max_rel = 0.0;
  for (const DiffTensor& param : params) {
    DiffTensor p = param;
    Matrix analytic =
        grads.contains(p) ? grads.at(p) : Matrix::Zero(p.rows(), p.cols());
    for (Index i = 0; i < p.rows(); ++i) {
      for (Index j = 0; j < p.cols(); ++j) {
        const double orig = p.mutable_value()(i, j);
        const double a = analytic(i, j);
        double best = std::numeric_limits<double>::infinity();
        for (double h : steps) {
          p.mutable_value()(i, j) = orig + h;
          const double fp = f().item();
          p.mutable_value()(i, j) = orig - h;
          const double fm = f().item();
          p.mutable_value()(i, j) = orig;
          const double numeric = (fp - fm) / (2.0 * h);
          const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
          best = std::min(best, std::abs(a - numeric) / denom);
        }
        max_rel = std::max(max_rel, best);
      }
    }
  }
  return max_rel;
}

/// 40 points, 20 two-point superpoints, 2 instances out of 3 classes.
Scene toy_scene(Rng& rng) {
  const Index n = 40;
  Scene scene;
  scene.cloud.positions.resize(n, 3);
  scene.cloud.colors.resize(n, 3);
  InstanceGroundTruth gt;
  gt.point_instance_ids.assign(n, -1);
  gt.instance_classes = {0, 1};
  SuperpointPartition part;
  part.count = 20;
  part.ids.resize(n);
  for (Index i = 0; i < n; ++i) {
    const int sp = static_cast<int>(i / 2);
    part.ids[static_cast<std::size_t>(i)] = sp;
    scene.cloud.positions(i, 0) = 0.08 * sp + rng.uniform(0.0, 0.02);
    scene.cloud.positions(i, 1) = rng.uniform(0.0, 0.02);
    scene.cloud.positions(i, 2) = rng.uniform(0.0, 0.02);
    for (int a = 0; a < 3; ++a) scene.cloud.colors(i, a) = rng.uniform(0.0, 1.0);
    if (sp < 7) gt.point_instance_ids[static_cast<std::size_t>(i)] = 0;
    else if (sp < 14) gt.point_instance_ids[static_cast<std::size_t>(i)] = 1;
  }
  scene.superpoints = std::move(part);
  scene.ground_truth = std::move(gt);
  return scene;
}

}  // namespace

bool GradcheckReport::passed() const {
  for (const auto& e : entries) {
    if (!(e.max_rel_error < tolerance)) return false;
  }
  return true;
}

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-18s max rel err %.3e  %s\n", e.kernel.c_str(),
                  e.max_rel_error, e.max_rel_error < tolerance ? "ok" : "FAIL");
    os << buf;
  }
  return os.str();
}

std::string GradcheckReport::first_failure() const {
  for (const auto& e : entries) {
    if (!(e.max_rel_error < tolerance)) return e.kernel;
  }
  return "";
}

GradcheckReport run_gradcheck(std::uint64_t seed, const std::string& corrupt_kernel) {
  Rng rng(seed);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<Check> checks;

  {
    DiffTensor a = DiffTensor::parameter(random_matrix(3, 4, rng));
    DiffTensor b = DiffTensor::parameter(random_matrix(4, 2, rng));
    checks.push_back({"matmul", [a, b] { return sum(sigmoid(matmul(a, b))); }, {a, b}});
  }
  {
    DiffTensor x = DiffTensor::parameter(random_matrix(4, 3, rng));
    checks.push_back({"sigmoid", [x] { return sum(sigmoid(x)); }, {x}});
  }
  {
    // Entries kept away from the kink at 0.
    Matrix init = random_matrix(4, 3, rng);
    init = (init.array().abs() + 0.2).matrix().cwiseProduct(
        (random_matrix(4, 3, rng).array().sign()).matrix());
    DiffTensor x = DiffTensor::parameter(init);
    checks.push_back({"relu", [x] { return sum(sigmoid(relu(x))); }, {x}});
  }
  {
    DiffTensor x = DiffTensor::parameter(random_matrix(3, 5, rng));
    Matrix mask = Matrix::Zero(3, 5);
    mask(0, 1) = -inf;
    mask(0, 3) = -inf;
    mask.row(2).setConstant(-inf);  // fully-masked row exercises the fallback
    Matrix weights = random_matrix(3, 5, rng);
    checks.push_back({"masked_softmax",
                      [x, mask, weights] {
                        return sum(mul(masked_softmax_rows(x, mask),
                                       DiffTensor::constant(weights)));
                      },
                      {x}});
  }
  {
    DiffTensor x = DiffTensor::parameter(random_matrix(4, 6, rng));
    DiffTensor g = DiffTensor::parameter(random_matrix(1, 6, rng, 0.5, 1.5));
    DiffTensor b = DiffTensor::parameter(random_matrix(1, 6, rng));
    Matrix weights = random_matrix(4, 6, rng);
    checks.push_back({"layer_norm",
                      [x, g, b, weights] {
                        return sum(mul(layer_norm(x, g, b), DiffTensor::constant(weights)));
                      },
                      {x, g, b}});
  }
  {
    DiffTensor features = DiffTensor::parameter(random_matrix(5, 3, rng));
    SuperpointPartition part;
    part.ids = {0, 0, 1, 1, 1};
    part.count = 2;
    checks.push_back({"superpoint_pool",
                      [features, part] {
                        return sum(sigmoid(superpoint_pool(features, part).features));
                      },
                      {features}});
  }
  {
    ModelConfig cfg;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    Rng attn_rng(rng.next_u64());
    AttentionParams p;
    p.wq = DiffTensor::parameter(init_linear(8, 8, attn_rng));
    p.bq = DiffTensor::parameter(random_matrix(1, 8, attn_rng, -0.1, 0.1));
    p.wk = DiffTensor::parameter(init_linear(8, 8, attn_rng));
    p.bk = DiffTensor::parameter(random_matrix(1, 8, attn_rng, -0.1, 0.1));
    p.wv = DiffTensor::parameter(init_linear(8, 8, attn_rng));
    p.bv = DiffTensor::parameter(random_matrix(1, 8, attn_rng, -0.1, 0.1));
    p.wo = DiffTensor::parameter(init_linear(8, 8, attn_rng));
    p.bo = DiffTensor::parameter(random_matrix(1, 8, attn_rng, -0.1, 0.1));
    DiffTensor z = DiffTensor::parameter(random_matrix(3, 8, attn_rng));
    DiffTensor s = DiffTensor::parameter(random_matrix(5, 8, attn_rng));
    Matrix mask = Matrix::Zero(3, 5);
    mask(0, 2) = -inf;
    mask.row(1).setConstant(-inf);
    checks.push_back({"cross_attention",
                      [p, z, s, mask] {
                        return sum(sigmoid(superpoint_cross_attention(p, 2, z, s, mask)));
                      },
                      {p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo, z, s},
                      {1e-5, 3e-4}});
  }
  {
    // Full multi-task loss on the toy scene with frozen matching and
    // frozen attention gates.
    Rng scene_rng(rng.next_u64());
    auto scene = std::make_shared<Scene>(toy_scene(scene_rng));
    ModelConfig cfg;
    cfg.hidden = 8;
    cfg.channels = 8;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.ffn_width = 16;
    cfg.layers = 2;
    cfg.queries = 8;
    cfg.num_classes = 3;
    auto model = std::make_shared<Model>(Model::init(cfg, rng.next_u64()));
    // Fresh initialization leaves the attention logit weights with gradients
    // around 1e-8: the pooled features are tiny, which suppresses both the
    // keys and the values. Gradients that small sit at the relative-error
    // floor where central differences cannot resolve them, so push the test
    // point to a region where every live parameter has a measurable gradient.
    for (auto& [name, p] : model->named_params()) {
      if (name == "backbone.w3" || name == "backbone.b3") p.mutable_value() *= 20.0;
      if (name.find("cross.wq") != std::string::npos ||
          name.find("cross.wk") != std::string::npos) {
        p.mutable_value() *= 3.0;
      }
    }
    auto gt_masks = std::make_shared<SuperpointInstanceMasks>(
        project_instance_to_superpoints(*scene));
    auto classes = scene->ground_truth->instance_classes;
    const LossCoefficients coeffs;

    DecoderOutput base = model->forward(*scene);
    auto fixed_masks = std::make_shared<std::vector<Matrix>>();
    for (std::size_t l = 0; l + 1 < base.predictions.size(); ++l) {
      fixed_masks->push_back(build_attention_mask(base.predictions[l].masks.value(), cfg.tau));
    }
    auto matches = std::make_shared<std::vector<FrozenMatch>>();
    for (const auto& pred : base.predictions) {
      matches->push_back(freeze_match(pred, *gt_masks, classes, coeffs));
    }
    std::vector<DiffTensor> params;
    for (const auto& [name, p] : model->named_params()) params.push_back(p);
    checks.push_back(
        {"full_loss",
         [model, scene, gt_masks, classes, coeffs, fixed_masks, matches, cfg] {
           DiffTensor point_features = encode_points(model->backbone, scene->cloud);
           SuperpointFeatures s = superpoint_pool(point_features, *scene->superpoints);
           DecoderOutput out = forward_decoder(cfg, model->decoder, s, fixed_masks.get());
           return total_loss_frozen(out.predictions, *matches, *gt_masks, classes,
                                    cfg.num_classes, coeffs)
               .combined.total;
         },
         params,
         {1e-6, 5e-5, 3e-4, 1e-3}});
  }

  GradcheckReport report;
  for (auto& check : checks) {
    std::function<DiffTensor()> f = check.f;
    if (check.name == corrupt_kernel) {
      DiffTensor victim = check.params.front();
      auto inner = check.f;
      f = [inner, victim] { return inner() + corruption_term(victim); };
    }
    report.entries.push_back({check.name, multi_step_check(f, check.params, check.steps)});
  }
  return report;
}

}  // namespace spf
