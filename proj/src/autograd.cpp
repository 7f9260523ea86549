#include "r2d2/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace r2d2 {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

Matrix& input_grad(Node& self, size_t i) { return self.inputs[i]->grad_buffer(); }
bool wants_grad(const Node& self, size_t i) { return self.inputs[i]->requires_grad; }
const Matrix& input_value(const Node& self, size_t i) { return self.inputs[i]->value; }

}  // namespace

Matrix& Node::grad_buffer() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
  return grad;
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), requires_grad);
}

double Tensor::item() const {
  require(rows() == 1 && cols() == 1, "item() needs a 1x1 tensor");
  return node_->value(0, 0);
}

void Tensor::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

Tensor Tensor::detach() const { return Tensor(node_->value, false); }

Tensor Tensor::make_result(Matrix value, std::vector<Tensor> inputs,
                           std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

void Tensor::backward() const {
  require(rows() == 1 && cols() == 1, "backward() needs a scalar loss");
  if (!node_->requires_grad) return;

  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer().setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out;
  out.noalias() = a.value() * b.value();
  return Tensor::make_result(std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0).noalias() += self.grad * input_value(self, 1).transpose();
    if (wants_grad(self, 1)) input_grad(self, 1).noalias() += input_value(self, 0).transpose() * self.grad;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix out;
  out.noalias() = a.value() * b.value().transpose();
  return Tensor::make_result(std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0).noalias() += self.grad * input_value(self, 1);
    if (wants_grad(self, 1)) input_grad(self, 1).noalias() += self.grad.transpose() * input_value(self, 0);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.cols() == weight.rows(), "linear: input width does not match weight");
  require(bias.rows() == 1 && bias.cols() == weight.cols(), "linear: bad bias shape");
  Matrix out;
  out.noalias() = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return Tensor::make_result(std::move(out), {x, weight, bias}, [](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0).noalias() += self.grad * input_value(self, 1).transpose();
    if (wants_grad(self, 1)) input_grad(self, 1).noalias() += input_value(self, 0).transpose() * self.grad;
    if (wants_grad(self, 2)) input_grad(self, 2) += self.grad.colwise().sum();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return Tensor::make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0) += self.grad;
    if (wants_grad(self, 1)) input_grad(self, 1) += self.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return Tensor::make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0) += self.grad;
    if (wants_grad(self, 1)) input_grad(self, 1) -= self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  return Tensor::make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0) += self.grad.cwiseProduct(input_value(self, 1));
    if (wants_grad(self, 1)) input_grad(self, 1) += self.grad.cwiseProduct(input_value(self, 0));
  });
}

Tensor scale(const Tensor& a, double s) {
  return Tensor::make_result(a.value() * s, {a}, [s](Node& self) { input_grad(self, 0) += self.grad * s; });
}

Tensor add_constant(const Tensor& a, const Matrix& c) {
  require(a.rows() == c.rows() && a.cols() == c.cols(), "add_constant: shape mismatch");
  return Tensor::make_result(a.value() + c, {a}, [](Node& self) { input_grad(self, 0) += self.grad; });
}

Tensor add_tiled(const Tensor& x, const Tensor& table) {
  const Eigen::Index period = table.rows();
  require(period > 0 && x.rows() % period == 0 && x.cols() == table.cols(), "add_tiled: bad shapes");
  Matrix out = x.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) += table.value().row(r % period);
  return Tensor::make_result(std::move(out), {x, table}, [period](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0) += self.grad;
    if (wants_grad(self, 1)) {
      Matrix& g = input_grad(self, 1);
      for (Eigen::Index r = 0; r < self.grad.rows(); ++r) g.row(r % period) += self.grad.row(r);
    }
  });
}

Tensor scale_rows(const Tensor& x, std::span<const double> factor) {
  require(static_cast<Eigen::Index>(factor.size()) == x.rows(), "scale_rows: factor length");
  Eigen::Map<const Eigen::VectorXd> f(factor.data(), static_cast<Eigen::Index>(factor.size()));
  Eigen::VectorXd fv = f;
  Matrix out = fv.asDiagonal() * x.value();
  return Tensor::make_result(std::move(out), {x}, [fv](Node& self) {
    input_grad(self, 0) += fv.asDiagonal() * self.grad;
  });
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
  require(s.rows() == 1 && s.cols() == 1, "div_scalar: divisor must be 1x1");
  const double d = s.value()(0, 0);
  return Tensor::make_result(x.value() / d, {x, s}, [](Node& self) {
    const double d = input_value(self, 1)(0, 0);
    if (wants_grad(self, 0)) input_grad(self, 0) += self.grad / d;
    if (wants_grad(self, 1)) {
      input_grad(self, 1)(0, 0) -= self.grad.cwiseProduct(input_value(self, 0)).sum() / (d * d);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Eigen::Index n = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
          "layer_norm: parameter shape");
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return Tensor::make_result(std::move(out), {x, gamma, beta},
                             [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const Matrix& dy = self.grad;
    if (wants_grad(self, 1)) input_grad(self, 1) += dy.cwiseProduct(xhat).colwise().sum();
    if (wants_grad(self, 2)) input_grad(self, 2) += dy.colwise().sum();
    if (wants_grad(self, 0)) {
      const auto gamma_row = input_value(self, 1).row(0).array();
      const double n = static_cast<double>(dy.cols());
      Matrix& dx = input_grad(self, 0);
      for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        Eigen::ArrayXd dxhat = (dy.row(r).array() * gamma_row).transpose();
        Eigen::ArrayXd xh = xhat.row(r).array().transpose();
        const double s1 = dxhat.sum();
        const double s2 = (dxhat * xh).sum();
        dx.row(r).array() += (inv_std(r) / n) * (n * dxhat - s1 - xh * s2).transpose();
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  Matrix cdf = x.value().unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)); });
  Matrix out = x.value().cwiseProduct(cdf);
  return Tensor::make_result(std::move(out), {x}, [cdf = std::move(cdf)](Node& self) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const auto v = input_value(self, 0).array();
    const Matrix d = cdf.array() + v * inv_sqrt_2pi * (-0.5 * v.square()).exp();
    input_grad(self, 0) += self.grad.cwiseProduct(d);
  });
}

Tensor embedding(const Tensor& table, std::span<const int32_t> ids) {
  std::vector<Eigen::Index> rows(ids.begin(), ids.end());
  for (auto r : rows) require(r >= 0 && r < table.rows(), "embedding: id out of range");
  return gather_rows(table, rows);
}

Tensor gather_rows(const Tensor& x, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < x.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(rows[i]);
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return Tensor::make_result(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Matrix& g = input_grad(self, 0);
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    require(p.cols() == parts.front().cols(), "concat_rows: width mismatch");
    total += p.rows();
  }
  Matrix out(total, parts.front().cols());
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return Tensor::make_result(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (size_t i = 0; i < self.inputs.size(); ++i) {
      if (!wants_grad(self, i)) continue;
      Matrix& g = input_grad(self, i);
      g += self.grad.middleRows(offsets[i], g.rows());
    }
  });
}

Tensor slice_rows(const Tensor& x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows: out of range");
  return Tensor::make_result(x.value().middleRows(start, count), {x}, [start, count](Node& self) {
    input_grad(self, 0).middleRows(start, count) += self.grad;
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts.front().rows(), "concat_cols: height mismatch");
    total += p.cols();
  }
  Matrix out(parts.front().rows(), total);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return Tensor::make_result(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (size_t i = 0; i < self.inputs.size(); ++i) {
      if (!wants_grad(self, i)) continue;
      Matrix& g = input_grad(self, i);
      g += self.grad.middleCols(offsets[i], g.cols());
    }
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  Eigen::VectorXd norms = x.value().rowwise().norm();
  norms = norms.cwiseMax(eps);
  Matrix out = norms.cwiseInverse().asDiagonal() * x.value();
  return Tensor::make_result(out, {x}, [out, norms](Node& self) {
    Eigen::VectorXd dots = self.grad.cwiseProduct(out).rowwise().sum();
    Matrix dx = self.grad - dots.asDiagonal() * out;
    input_grad(self, 0) += norms.cwiseInverse().asDiagonal() * dx;
  });
}

namespace {

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    // vectorized exp clamps its argument, so -inf would come back subnormal
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (x(r, c) == -std::numeric_limits<double>::infinity()) out(r, c) = 0.0;
    }
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix row_log_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  Matrix out = row_softmax(x.value());
  return Tensor::make_result(out, {x}, [out](Node& self) {
    Eigen::VectorXd dots = self.grad.cwiseProduct(out).rowwise().sum();
    Matrix tmp = self.grad;
    tmp.colwise() -= dots;
    input_grad(self, 0) += out.cwiseProduct(tmp);
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  Matrix out = row_log_softmax(x.value());
  return Tensor::make_result(out, {x}, [out](Node& self) {
    Matrix p = out.array().exp();
    Eigen::VectorXd sums = self.grad.rowwise().sum();
    input_grad(self, 0) += self.grad - sums.asDiagonal() * p;
  });
}

Tensor sum(const Tensor& x) {
  return Tensor::make_result(Matrix::Constant(1, 1, x.value().sum()), {x}, [](Node& self) {
    input_grad(self, 0).array() += self.grad(0, 0);
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.value().size());
  require(n > 0, "mean: empty tensor");
  return Tensor::make_result(Matrix::Constant(1, 1, x.value().sum() / n), {x}, [n](Node& self) {
    input_grad(self, 0).array() += self.grad(0, 0) / n;
  });
}

Tensor soft_cross_entropy(const Tensor& logits, const Matrix& target) {
  require(logits.rows() == target.rows() && logits.cols() == target.cols(),
          "soft_cross_entropy: target shape mismatch");
  require(logits.rows() > 0, "soft_cross_entropy: empty batch");
  Matrix logp = row_log_softmax(logits.value());
  const double rows = static_cast<double>(logits.rows());
  const double loss = -(target.cwiseProduct(logp)).sum() / rows;
  return Tensor::make_result(Matrix::Constant(1, 1, loss), {logits},
                             [logp = std::move(logp), target, rows](Node& self) {
    Matrix p = logp.array().exp();
    Eigen::VectorXd mass = target.rowwise().sum();
    input_grad(self, 0) += (self.grad(0, 0) / rows) * (mass.asDiagonal() * p - target);
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "cross_entropy: label count");
  Matrix target = Matrix::Zero(logits.rows(), logits.cols());
  for (size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < logits.cols(), "cross_entropy: label out of range");
    target(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return soft_cross_entropy(logits, target);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Eigen::Index batch,
                 Eigen::Index heads, std::span<const uint8_t> key_mask,
                 std::shared_ptr<AttentionProbs>* probs_out) {
  const Eigen::Index d = q.cols();
  require(batch > 0 && heads > 0 && d % heads == 0, "attention: bad head split");
  require(k.cols() == d && v.cols() == d, "attention: feature width mismatch");
  require(q.rows() % batch == 0 && k.rows() % batch == 0 && v.rows() == k.rows(),
          "attention: rows not divisible by batch");
  const Eigen::Index lq = q.rows() / batch;
  const Eigen::Index lk = k.rows() / batch;
  const Eigen::Index dh = d / heads;
  require(key_mask.empty() || static_cast<Eigen::Index>(key_mask.size()) == k.rows(),
          "attention: key mask length");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<AttentionProbs>();
  probs->batch = batch;
  probs->query_len = lq;
  probs->key_len = lk;
  probs->heads = heads;
  probs->probs.resize(static_cast<size_t>(batch * heads));

  Matrix out(q.rows(), d);
  Matrix scores(lq, lk);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      auto qb = q.value().block(b * lq, h * dh, lq, dh);
      auto kb = k.value().block(b * lk, h * dh, lk, dh);
      auto vb = v.value().block(b * lk, h * dh, lk, dh);
      scores.noalias() = qb * kb.transpose();
      scores *= scale;
      if (!key_mask.empty()) {
        bool any = false;
        for (Eigen::Index j = 0; j < lk; ++j) {
          if (!key_mask[static_cast<size_t>(b * lk + j)]) {
            scores.col(j).setConstant(-std::numeric_limits<double>::infinity());
          } else {
            any = true;
          }
        }
        require(any, "attention: sequence without any valid key");
      }
      Matrix p = row_softmax(scores);
      out.block(b * lq, h * dh, lq, dh).noalias() = p * vb;
      probs->probs[static_cast<size_t>(b * heads + h)] = std::move(p);
    }
  }
  if (probs_out) *probs_out = probs;

  return Tensor::make_result(std::move(out), {q, k, v},
                             [probs, batch, heads, lq, lk, dh, scale](Node& self) {
    const Matrix& qv = input_value(self, 0);
    const Matrix& kv = input_value(self, 1);
    const Matrix& vv = input_value(self, 2);
    const bool gq = wants_grad(self, 0), gk = wants_grad(self, 1), gv = wants_grad(self, 2);
    Matrix* dq = gq ? &input_grad(self, 0) : nullptr;
    Matrix* dk = gk ? &input_grad(self, 1) : nullptr;
    Matrix* dv = gv ? &input_grad(self, 2) : nullptr;
    Matrix dp(lq, lk), ds(lq, lk);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        const Matrix& p = probs->at(b, h);
        auto dout = self.grad.block(b * lq, h * dh, lq, dh);
        auto vb = vv.block(b * lk, h * dh, lk, dh);
        if (dv) dv->block(b * lk, h * dh, lk, dh).noalias() += p.transpose() * dout;
        if (!dq && !dk) continue;
        dp.noalias() = dout * vb.transpose();
        Eigen::VectorXd dots = dp.cwiseProduct(p).rowwise().sum();
        ds = dp;
        ds.colwise() -= dots;
        ds = ds.cwiseProduct(p) * scale;
        if (dq) dq->block(b * lq, h * dh, lq, dh).noalias() += ds * kv.block(b * lk, h * dh, lk, dh);
        if (dk) dk->block(b * lk, h * dh, lk, dh).noalias() += ds.transpose() * qv.block(b * lq, h * dh, lq, dh);
      }
    }
  });
}

}  // namespace ops
}  // namespace r2d2
