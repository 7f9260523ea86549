#pragma once

// Minimal reverse-mode automatic differentiation over row-major double
// matrices. Every value is 2-D; sequences of a batch are stacked along rows.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace r2d2 {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Matrix& grad_buffer();
};

/// Handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;
  void zero_grad();

  /// Returns a constant tensor sharing no graph history.
  Tensor detach() const;

  /// Runs reverse accumulation from this (scalar) tensor.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Creates the output node of an op. If grad mode is off or no input
  /// requires grad, the node is a constant and `backward_fn` is dropped.
  static Tensor make_result(Matrix value, std::vector<Tensor> inputs,
                            std::function<void(Node&)> backward_fn);

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x · W + b, with W stored [in, out] and b [1, out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Adds a constant matrix of the same shape.
Tensor add_constant(const Tensor& a, const Matrix& c);
/// Row r of x receives table row (r mod table.rows()).
Tensor add_tiled(const Tensor& x, const Tensor& table);
/// Multiplies row r by the constant factor[r].
Tensor scale_rows(const Tensor& x, std::span<const double> factor);
/// Divides every entry by a learnable [1,1] scalar.
Tensor div_scalar(const Tensor& x, const Tensor& s);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& x);

Tensor embedding(const Tensor& table, std::span<const int32_t> ids);
Tensor gather_rows(const Tensor& x, std::span<const Eigen::Index> rows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, Eigen::Index start, Eigen::Index count);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean over rows of −Σ_c target_rc · log softmax(logits)_rc.
/// The target is a constant (no gradient flows into it).
Tensor soft_cross_entropy(const Tensor& logits, const Matrix& target);
/// Mean over rows of −log softmax(logits)_{r, label_r}.
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> labels);

/// Attention probabilities recorded by `attention` for inspection.
struct AttentionProbs {
  Eigen::Index batch = 0, query_len = 0, key_len = 0, heads = 0;
  // [batch * heads] matrices of shape [query_len, key_len]
  std::vector<Matrix> probs;
  const Matrix& at(Eigen::Index b, Eigen::Index h) const { return probs[b * heads + h]; }
};

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences. q is [batch*query_len, d]; k and v are [batch*key_len, d].
/// key_mask (optional, [batch*key_len]) marks valid keys; every query must
/// see at least one valid key.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Eigen::Index batch,
                 Eigen::Index heads, std::span<const uint8_t> key_mask,
                 std::shared_ptr<AttentionProbs>* probs_out = nullptr);

}  // namespace ops

}  // namespace r2d2
