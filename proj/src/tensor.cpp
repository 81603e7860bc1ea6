#include "spf/tensor.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace spf {

namespace detail {

std::int64_t next_node_id() {
  static std::atomic<std::int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

NodePtr make_node(Matrix value, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->id = detail::next_node_id();
  return n;
}

DiffTensor make_op(Matrix value, std::vector<DiffTensor> parents,
                   std::function<void(const Matrix&, Gradients&)> backprop) {
  bool any_grad = false;
  for (const auto& p : parents) any_grad = any_grad || p.requires_grad();
  auto n = make_node(std::move(value), any_grad);
  if (any_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return DiffTensor(n);
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  }
}

Matrix masked_softmax_impl(const Matrix& logits, const Matrix& add_mask) {
  Matrix out(logits.rows(), logits.cols());
  const Matrix zero_mask = Matrix::Zero(1, logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    bool all_masked = true;
    for (Index j = 0; j < logits.cols(); ++j) {
      if (add_mask(i, j) == 0.0) {
        all_masked = false;
        break;
      }
    }
    // Fully-masked rows fall back to the unmasked distribution.
    Eigen::RowVectorXd z = logits.row(i);
    if (!all_masked) z += add_mask.row(i);
    const double m = z.maxCoeff();
    Eigen::RowVectorXd e = (z.array() - m).exp();
    if (!all_masked) {
      // Eigen's vectorized exp maps -inf to a denormal, not 0; the contract
      // is exactly zero weight on masked entries.
      for (Index j = 0; j < e.size(); ++j) {
        if (add_mask(i, j) != 0.0) e(j) = 0.0;
      }
    }
    out.row(i) = e / e.sum();
  }
  return out;
}

}  // namespace

DiffTensor DiffTensor::constant(Matrix value) { return DiffTensor(make_node(std::move(value), false)); }

DiffTensor DiffTensor::parameter(Matrix value) { return DiffTensor(make_node(std::move(value), true)); }

DiffTensor DiffTensor::scalar(double value, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return DiffTensor(make_node(std::move(m), requires_grad));
}

double DiffTensor::item() const {
  if (rows() != 1 || cols() != 1) {
    throw ContractError("item(): tensor is not scalar, shape " + shape_str(node_->value));
  }
  return node_->value(0, 0);
}

void Gradients::accumulate(const NodePtr& node, const Matrix& g) {
  if (!node->requires_grad) return;
  auto it = grads_.find(node->id);
  if (it == grads_.end()) {
    grads_.emplace(node->id, g);
  } else {
    it->second += g;
  }
}

const Matrix& Gradients::at(const DiffTensor& t) const {
  auto it = grads_.find(t.node_id());
  if (it == grads_.end()) throw ContractError("Gradients::at: no gradient for node");
  return it->second;
}

Matrix* Gradients::find(const DiffTensor& t) {
  auto it = grads_.find(t.node_id());
  return it == grads_.end() ? nullptr : &it->second;
}

DiffTensor matmul(const DiffTensor& a, const DiffTensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  auto an = a.node();
  auto bn = b.node();
  return make_op(std::move(out), {a, b}, [an, bn](const Matrix& g, Gradients& grads) {
    grads.accumulate(an, g * bn->value.transpose());
    grads.accumulate(bn, an->value.transpose() * g);
  });
}

DiffTensor transpose(const DiffTensor& a) {
  auto an = a.node();
  return make_op(a.value().transpose(), {a}, [an](const Matrix& g, Gradients& grads) {
    grads.accumulate(an, g.transpose());
  });
}

DiffTensor add(const DiffTensor& a, const DiffTensor& b) {
  require_same_shape("add", a.value(), b.value());
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.value() + b.value(), {a, b}, [an, bn](const Matrix& g, Gradients& grads) {
    grads.accumulate(an, g);
    grads.accumulate(bn, g);
  });
}

DiffTensor sub(const DiffTensor& a, const DiffTensor& b) {
  require_same_shape("sub", a.value(), b.value());
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.value() - b.value(), {a, b}, [an, bn](const Matrix& g, Gradients& grads) {
    grads.accumulate(an, g);
    grads.accumulate(bn, -g);
  });
}

DiffTensor mul(const DiffTensor& a, const DiffTensor& b) {
  require_same_shape("mul", a.value(), b.value());
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.value().cwiseProduct(b.value()), {a, b},
                 [an, bn](const Matrix& g, Gradients& grads) {
                   grads.accumulate(an, g.cwiseProduct(bn->value));
                   grads.accumulate(bn, g.cwiseProduct(an->value));
                 });
}

DiffTensor div(const DiffTensor& a, const DiffTensor& b) {
  require_same_shape("div", a.value(), b.value());
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.value().cwiseQuotient(b.value()), {a, b},
                 [an, bn](const Matrix& g, Gradients& grads) {
                   grads.accumulate(an, g.cwiseQuotient(bn->value));
                   Matrix db = -g.cwiseProduct(an->value).cwiseQuotient(
                       bn->value.cwiseProduct(bn->value));
                   grads.accumulate(bn, db);
                 });
}

DiffTensor scale(const DiffTensor& a, double s) {
  auto an = a.node();
  return make_op(s * a.value(), {a}, [an, s](const Matrix& g, Gradients& grads) {
    grads.accumulate(an, s * g);
  });
}

DiffTensor add_scalar(const DiffTensor& a, double s) {
  auto an = a.node();
  return make_op(a.value().array() + s, {a}, [an](const Matrix& g, Gradients& grads) {
    grads.accumulate(an, g);
  });
}

DiffTensor add_row_broadcast(const DiffTensor& a, const DiffTensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row_broadcast: " + shape_str(a.value()) + " vs " +
                     shape_str(row.value()));
  }
  Matrix out = a.value().rowwise() + Eigen::RowVectorXd(row.value().row(0));
  auto an = a.node();
  auto rn = row.node();
  return make_op(std::move(out), {a, row}, [an, rn](const Matrix& g, Gradients& grads) {
    grads.accumulate(an, g);
    grads.accumulate(rn, g.colwise().sum());
  });
}

DiffTensor sigmoid(const DiffTensor& x) {
  Matrix y = 1.0 / (1.0 + (-x.value().array()).exp());
  auto xn = x.node();
  Matrix y_copy = y;
  return make_op(std::move(y), {x}, [xn, y_copy](const Matrix& g, Gradients& grads) {
    Matrix d = g.cwiseProduct(y_copy.cwiseProduct(Matrix(1.0 - y_copy.array())));
    grads.accumulate(xn, d);
  });
}

DiffTensor relu(const DiffTensor& x) {
  Matrix y = x.value().cwiseMax(0.0);
  auto xn = x.node();
  return make_op(std::move(y), {x}, [xn](const Matrix& g, Gradients& grads) {
    Matrix d = (xn->value.array() > 0.0).cast<double>() * g.array();
    grads.accumulate(xn, d);
  });
}

DiffTensor log_clamped(const DiffTensor& x, double eps) {
  Matrix y = x.value().cwiseMax(eps).array().log();
  auto xn = x.node();
  return make_op(std::move(y), {x}, [xn, eps](const Matrix& g, Gradients& grads) {
    Matrix d = (xn->value.array() >= eps).cast<double>() * g.array() /
               xn->value.cwiseMax(eps).array();
    grads.accumulate(xn, d);
  });
}

DiffTensor sum(const DiffTensor& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  auto xn = x.node();
  return make_op(std::move(out), {x}, [xn](const Matrix& g, Gradients& grads) {
    grads.accumulate(xn, Matrix::Constant(xn->value.rows(), xn->value.cols(), g(0, 0)));
  });
}

DiffTensor mean_all(const DiffTensor& x) {
  const double n = static_cast<double>(x.rows() * x.cols());
  Matrix out(1, 1);
  out(0, 0) = x.value().sum() / n;
  auto xn = x.node();
  return make_op(std::move(out), {x}, [xn, n](const Matrix& g, Gradients& grads) {
    grads.accumulate(xn, Matrix::Constant(xn->value.rows(), xn->value.cols(), g(0, 0) / n));
  });
}

DiffTensor masked_softmax_rows(const DiffTensor& logits, const Matrix& add_mask) {
  require_same_shape("masked_softmax_rows", logits.value(), add_mask);
  Matrix y = masked_softmax_impl(logits.value(), add_mask);
  auto xn = logits.node();
  Matrix y_copy = y;
  return make_op(std::move(y), {logits}, [xn, y_copy](const Matrix& g, Gradients& grads) {
    Matrix d(y_copy.rows(), y_copy.cols());
    for (Index i = 0; i < y_copy.rows(); ++i) {
      const double dot = g.row(i).cwiseProduct(y_copy.row(i)).sum();
      d.row(i) = y_copy.row(i).cwiseProduct(Matrix(g.row(i).array() - dot));
    }
    grads.accumulate(xn, d);
  });
}

DiffTensor softmax_rows(const DiffTensor& logits) {
  return masked_softmax_rows(logits, Matrix::Zero(logits.rows(), logits.cols()));
}

DiffTensor layer_norm(const DiffTensor& x, const DiffTensor& gain, const DiffTensor& bias) {
  constexpr double kEps = 1e-5;
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: gain/bias must be [1x" + std::to_string(d) + "]");
  }
  Matrix xhat(x.rows(), d);
  Eigen::VectorXd inv_sigma(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_sigma(i) = is;
    xhat.row(i) = (x.value().row(i).array() - mu) * is;
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return make_op(std::move(out), {x, gain, bias},
                 [xn, gn, bn, xhat, inv_sigma](const Matrix& g, Gradients& grads) {
                   const Index d = xhat.cols();
                   Matrix dx(xhat.rows(), d);
                   Eigen::RowVectorXd dgain = Eigen::RowVectorXd::Zero(d);
                   Eigen::RowVectorXd dbias = Eigen::RowVectorXd::Zero(d);
                   for (Index i = 0; i < xhat.rows(); ++i) {
                     dgain += g.row(i).cwiseProduct(xhat.row(i));
                     dbias += g.row(i);
                     Eigen::RowVectorXd gy =
                         g.row(i).cwiseProduct(gn->value.row(0));
                     const double mean_gy = gy.mean();
                     const double mean_gy_xhat = gy.cwiseProduct(xhat.row(i)).mean();
                     dx.row(i) = inv_sigma(i) *
                                 (gy.array() - mean_gy - xhat.row(i).array() * mean_gy_xhat);
                   }
                   grads.accumulate(xn, dx);
                   grads.accumulate(gn, dgain);
                   grads.accumulate(bn, dbias);
                 });
}

DiffTensor slice_cols(const DiffTensor& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  Matrix out = x.value().middleCols(start, count);
  auto xn = x.node();
  return make_op(std::move(out), {x}, [xn, start, count](const Matrix& g, Gradients& grads) {
    Matrix d = Matrix::Zero(xn->value.rows(), xn->value.cols());
    d.middleCols(start, count) = g;
    grads.accumulate(xn, d);
  });
}

DiffTensor concat_cols(const std::vector<DiffTensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input");
  const Index rows = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts disagree");
    total += p.cols();
  }
  Matrix out(rows, total);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  return make_op(std::move(out), parts, [nodes, widths](const Matrix& g, Gradients& grads) {
    Index off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      grads.accumulate(nodes[k], g.middleCols(off, widths[k]));
      off += widths[k];
    }
  });
}

DiffTensor gather_rows(const DiffTensor& x, const std::vector<Index>& indices) {
  Matrix out(static_cast<Index>(indices.size()), x.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= x.rows()) {
      throw ContractError("gather_rows: index out of range");
    }
    out.row(static_cast<Index>(k)) = x.value().row(indices[k]);
  }
  auto xn = x.node();
  return make_op(std::move(out), {x}, [xn, indices](const Matrix& g, Gradients& grads) {
    Matrix d = Matrix::Zero(xn->value.rows(), xn->value.cols());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      d.row(indices[k]) += g.row(static_cast<Index>(k));
    }
    grads.accumulate(xn, d);
  });
}

DiffTensor bce_mean(const DiffTensor& pred, const Matrix& target, double eps) {
  require_same_shape("bce_mean", pred.value(), target);
  const double n = static_cast<double>(pred.rows() * pred.cols());
  Eigen::ArrayXXd m = pred.value().array().max(eps).min(1.0 - eps);
  const double loss =
      -((target.array() * m.log()) + (1.0 - target.array()) * (1.0 - m).log()).sum() / n;
  Matrix out(1, 1);
  out(0, 0) = loss;
  auto pn = pred.node();
  return make_op(std::move(out), {pred}, [pn, target, eps, n](const Matrix& g, Gradients& grads) {
    Eigen::ArrayXXd raw = pn->value.array();
    Eigen::ArrayXXd m = raw.max(eps).min(1.0 - eps);
    Eigen::ArrayXXd inside = ((raw >= eps) && (raw <= 1.0 - eps)).cast<double>();
    Eigen::ArrayXXd d = inside * (-target.array() / m + (1.0 - target.array()) / (1.0 - m)) / n;
    grads.accumulate(pn, Matrix(g(0, 0) * d));
  });
}

Gradients backward(const DiffTensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.value()));
  }
  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<NodePtr> order;
  std::unordered_set<std::int64_t> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  if (loss.requires_grad()) {
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node_id());
  }
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      const NodePtr& p = node->parents[child++];
      if (p->requires_grad && visited.insert(p->id).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Gradients grads;
  grads.accumulate(loss.node(), Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& node = *it;
    if (!node->backprop) continue;
    DiffTensor handle(node);
    Matrix* g = grads.find(handle);
    if (g == nullptr) continue;
    node->backprop(*g, grads);
  }
  return grads;
}

double finite_diff_check(const std::function<DiffTensor()>& f,
                         const std::vector<DiffTensor>& params, double step) {
  if (!(step > 0.0 && step <= 1e-3)) {
    throw ContractError("finite_diff_check: step must be in (0, 1e-3]");
  }
  DiffTensor loss = f();
  if (!std::isfinite(loss.item())) {
    throw ContractError("finite_diff_check: non-finite loss at base point");
  }
  Gradients grads = backward(loss);
  double max_rel = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    DiffTensor param = params[p];
    Matrix analytic = grads.contains(param)
                          ? grads.at(param)
                          : Matrix::Zero(param.rows(), param.cols());
    for (Index i = 0; i < param.rows(); ++i) {
      for (Index j = 0; j < param.cols(); ++j) {
        const double orig = param.mutable_value()(i, j);
        param.mutable_value()(i, j) = orig + step;
        const double fp = f().item();
        param.mutable_value()(i, j) = orig - step;
        const double fm = f().item();
        param.mutable_value()(i, j) = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
          throw ContractError("finite_diff_check: non-finite f at param " + std::to_string(p) +
                              " entry (" + std::to_string(i) + "," + std::to_string(j) + ")");
        }
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic(i, j);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
      }
    }
  }
  return max_rel;
}

}  // namespace spf
