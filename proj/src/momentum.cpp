#include "r2d2/momentum.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace r2d2 {

void ema_update(std::span<const NamedParameter> student, std::span<const NamedParameter> teacher, double m) {
  if (m < 0.0 || m > 1.0) throw std::invalid_argument("ema_update: momentum outside [0, 1]");
  if (student.size() != teacher.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  for (size_t i = 0; i < student.size(); ++i) {
    const auto& s = student[i];
    const auto& t = teacher[i];
    if (s.name != t.name || s.tensor.rows() != t.tensor.rows() || s.tensor.cols() != t.tensor.cols()) {
      throw std::invalid_argument("ema_update: shape mismatch at '" + s.name + "'");
    }
  }
  for (size_t i = 0; i < student.size(); ++i) {
    Tensor t = teacher[i].tensor;
    if (m == 1.0) continue;
    if (m == 0.0) {
      t.mutable_value() = student[i].tensor.value();
      continue;
    }
    t.mutable_value() = m * t.value() + (1.0 - m) * student[i].tensor.value();
  }
}

void ema_update(const Model& student, Model& teacher, double m) {
  auto s = student.parameters();
  auto t = teacher.parameters();
  ema_update(s, t, m);
}

FeatureQueue::FeatureQueue(int capacity, int dim, double decay)
    : capacity_(capacity),
      dim_(dim),
      decay_(decay),
      features_(Matrix::Zero(capacity, dim)),
      weights_(Eigen::VectorXd::Zero(capacity)),
      ages_(static_cast<size_t>(capacity), -1),
      serials_(static_cast<size_t>(capacity), -1) {
  if (capacity < 0 || dim <= 0) throw std::invalid_argument("FeatureQueue: bad shape");
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("FeatureQueue: decay must lie in (0, 1]");
}

void FeatureQueue::enqueue(const Matrix& features) {
  const auto n = static_cast<int>(features.rows());
  if (n > capacity_) throw std::invalid_argument("FeatureQueue: more rows than capacity");
  if (n > 0 && features.cols() != dim_) throw std::invalid_argument("FeatureQueue: feature width mismatch");

  for (int i = 0; i < fill_; ++i) {
    ++ages_[static_cast<size_t>(i)];
    weights_(i) = std::pow(decay_, static_cast<double>(ages_[static_cast<size_t>(i)]));
  }
  for (int r = 0; r < n; ++r) {
    RowVector row = features.row(r);
    const double norm = row.norm();
    if (std::abs(norm - 1.0) > 1e-6) {
      if (renormalized_ == 0) std::cerr << "warning: FeatureQueue normalizing non-unit feature rows\n";
      ++renormalized_;
      if (norm > 0.0) row /= norm;
    }
    features_.row(head_) = row;
    weights_(head_) = 1.0;
    ages_[static_cast<size_t>(head_)] = 0;
    serials_[static_cast<size_t>(head_)] = next_serial_++;
    head_ = (head_ + 1) % capacity_;
    if (fill_ < capacity_) ++fill_;
  }
}

bool FeatureQueue::consistent(double norm_tol) const {
  for (int i = 0; i < fill_; ++i) {
    const auto age = ages_[static_cast<size_t>(i)];
    if (age < 0) return false;
    const double w = weights_(i);
    if (w != std::pow(decay_, static_cast<double>(age))) return false;
    if (!(w > 0.0 && w <= 1.0)) return false;
    if (std::abs(features_.row(i).norm() - 1.0) > norm_tol) return false;
  }
  return true;
}

void FeatureQueue::restore(Matrix features, std::vector<int64_t> ages, std::vector<int64_t> serials, int fill,
                           int head, int64_t next_serial) {
  if (features.rows() != capacity_ || features.cols() != dim_ || ages.size() != static_cast<size_t>(capacity_) ||
      serials.size() != static_cast<size_t>(capacity_) || fill < 0 || fill > capacity_ || head < 0 ||
      (capacity_ > 0 && head >= capacity_)) {
    throw std::invalid_argument("FeatureQueue::restore: inconsistent state");
  }
  features_ = std::move(features);
  ages_ = std::move(ages);
  serials_ = std::move(serials);
  fill_ = fill;
  head_ = head;
  next_serial_ = next_serial;
  weights_ = Eigen::VectorXd::Zero(capacity_);
  for (int i = 0; i < fill_; ++i) weights_(i) = std::pow(decay_, static_cast<double>(ages_[static_cast<size_t>(i)]));
}

void Center::update(const Matrix& batch, double momentum) {
  if (batch.rows() < 1) throw std::invalid_argument("Center::update: empty batch");
  if (batch.cols() != mu.cols()) throw std::invalid_argument("Center::update: width mismatch");
  mu = momentum * mu + (1.0 - momentum) * batch.colwise().mean();
}

MomentumBank::MomentumBank(const Model& student)
    : teacher(student.clone()),
      image_queue(student.config().queue_capacity, student.config().hidden_dim, student.config().queue_decay),
      text_queue(student.config().queue_capacity, student.config().hidden_dim, student.config().queue_decay),
      image_center(student.config().hidden_dim),
      text_center(student.config().hidden_dim) {
  teacher->set_trainable(false);
}

}  // namespace r2d2
