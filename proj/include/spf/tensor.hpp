#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace spf {

// Row-major to match the serialized buffer layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Gradients;

namespace detail {

struct TensorNode {
  Matrix value;
  bool requires_grad = false;
  std::int64_t id = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Accumulates parent gradients given this node's gradient.
  std::function<void(const Matrix& grad_out, Gradients& grads)> backprop;
};

std::int64_t next_node_id();

}  // namespace detail

/// Dense 2-D tensor participating in a reverse-mode computation graph.
/// Value-semantic handle; copies share the underlying node.
class DiffTensor {
 public:
  DiffTensor() = default;
  explicit DiffTensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

  static DiffTensor constant(Matrix value);
  static DiffTensor parameter(Matrix value);
  static DiffTensor scalar(double value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  std::int64_t node_id() const { return node_->id; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  double item() const;
  bool valid() const { return node_ != nullptr; }

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// node_id -> gradient buffer, populated by backward().
class Gradients {
 public:
  void accumulate(const std::shared_ptr<detail::TensorNode>& node, const Matrix& g);
  bool contains(const DiffTensor& t) const { return grads_.count(t.node_id()) > 0; }
  const Matrix& at(const DiffTensor& t) const;
  Matrix* find(const DiffTensor& t);
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::int64_t, Matrix> grads_;
};

// ---- kernels ---------------------------------------------------------------

DiffTensor matmul(const DiffTensor& a, const DiffTensor& b);
DiffTensor transpose(const DiffTensor& a);

DiffTensor add(const DiffTensor& a, const DiffTensor& b);
DiffTensor sub(const DiffTensor& a, const DiffTensor& b);
DiffTensor mul(const DiffTensor& a, const DiffTensor& b);  // elementwise
DiffTensor div(const DiffTensor& a, const DiffTensor& b);  // elementwise
DiffTensor scale(const DiffTensor& a, double s);
DiffTensor add_scalar(const DiffTensor& a, double s);
// [R x C] + [1 x C], broadcast over rows (bias add).
DiffTensor add_row_broadcast(const DiffTensor& a, const DiffTensor& row);

DiffTensor sigmoid(const DiffTensor& x);
DiffTensor relu(const DiffTensor& x);
// log of x clamped to [eps, +inf); gradient is zero where the clamp is active.
DiffTensor log_clamped(const DiffTensor& x, double eps = 1e-7);

DiffTensor sum(const DiffTensor& x);       // -> 1x1
DiffTensor mean_all(const DiffTensor& x);  // -> 1x1

// Row-wise softmax of (logits + add_mask), add_mask entries in {0, -inf}.
// Rows whose mask is entirely -inf fall back to the unmasked softmax.
DiffTensor masked_softmax_rows(const DiffTensor& logits, const Matrix& add_mask);
DiffTensor softmax_rows(const DiffTensor& logits);

// Per-row normalization to zero mean / unit variance (eps 1e-5), then affine.
// gain and bias are [1 x D].
DiffTensor layer_norm(const DiffTensor& x, const DiffTensor& gain, const DiffTensor& bias);

DiffTensor slice_cols(const DiffTensor& x, Index start, Index count);
DiffTensor concat_cols(const std::vector<DiffTensor>& parts);
DiffTensor gather_rows(const DiffTensor& x, const std::vector<Index>& indices);

// Mean binary cross-entropy of pred against a constant {0,1} target, with
// pred clamped to [eps, 1-eps] before the logarithms.
DiffTensor bce_mean(const DiffTensor& pred, const Matrix& target, double eps = 1e-7);

inline DiffTensor operator+(const DiffTensor& a, const DiffTensor& b) { return add(a, b); }
inline DiffTensor operator-(const DiffTensor& a, const DiffTensor& b) { return sub(a, b); }
inline DiffTensor operator*(const DiffTensor& a, const DiffTensor& b) { return mul(a, b); }
inline DiffTensor operator*(double s, const DiffTensor& a) { return scale(a, s); }

// ---- reverse pass ----------------------------------------------------------

/// Reverse-mode accumulation over the graph reachable from a scalar loss.
Gradients backward(const DiffTensor& loss);

/// Central-difference check of backward() for a scalar-valued forward pass.
/// f must rebuild its graph from the params' current values on every call.
/// Returns the max relative error, denominator max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<DiffTensor()>& f,
                         const std::vector<DiffTensor>& params, double step = 1e-6);

}  // namespace spf
