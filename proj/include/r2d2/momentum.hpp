#pragma once

#include "r2d2/model.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace r2d2 {

/// teacher ← m·teacher + (1−m)·student for every parameter pair.
/// Throws std::invalid_argument when the lists disagree in names or shapes.
void ema_update(std::span<const NamedParameter> student, std::span<const NamedParameter> teacher, double m);
void ema_update(const Model& student, Model& teacher, double m);

/// Fixed-capacity FIFO ring of unit-norm features. Each slot carries an age
/// (enqueue calls survived) and a reliability weight decay^age.
class FeatureQueue {
 public:
  FeatureQueue() = default;
  FeatureQueue(int capacity, int dim, double decay);

  /// Ages every occupied slot by one and writes the new rows (weight 1,
  /// age 0) over the oldest slots. Rows that are not unit-norm are
  /// normalized and counted in renormalized_rows().
  void enqueue(const Matrix& features);

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int fill() const { return fill_; }
  double decay() const { return decay_; }
  bool empty() const { return fill_ == 0; }

  /// Occupied slots in slot order, [fill, dim].
  Matrix occupied_features() const { return features_.topRows(fill_); }
  Eigen::VectorXd occupied_weights() const { return weights_.head(fill_); }
  const std::vector<int64_t>& ages() const { return ages_; }
  /// Monotonic insertion serial of each slot (−1 when empty).
  const std::vector<int64_t>& serials() const { return serials_; }
  int head() const { return head_; }
  int64_t renormalized_rows() const { return renormalized_; }

  /// weight == decay^age, 0 < weight ≤ 1 and unit norm for every occupied slot.
  bool consistent(double norm_tol = 1e-9) const;

  // raw state for checkpointing
  const Matrix& raw_features() const { return features_; }
  const Eigen::VectorXd& raw_weights() const { return weights_; }
  int64_t next_serial() const { return next_serial_; }
  void restore(Matrix features, std::vector<int64_t> ages, std::vector<int64_t> serials, int fill, int head,
               int64_t next_serial);

 private:
  int capacity_ = 0;
  int dim_ = 0;
  double decay_ = 1.0;
  int fill_ = 0;
  int head_ = 0;
  int64_t next_serial_ = 0;
  int64_t renormalized_ = 0;
  Matrix features_;
  Eigen::VectorXd weights_;
  std::vector<int64_t> ages_;
  std::vector<int64_t> serials_;
};

/// Momentum-updated mean of teacher outputs.
struct Center {
  RowVector mu;

  explicit Center(int dim = 0) : mu(RowVector::Zero(dim)) {}
  /// mu ← momentum·mu + (1−momentum)·mean(rows of batch)
  void update(const Matrix& batch, double momentum);
};

/// EMA teacher, weighted feature queues and distillation centers.
struct MomentumBank {
  std::unique_ptr<Model> teacher;
  int64_t steps = 0;
  FeatureQueue image_queue;
  FeatureQueue text_queue;
  Center image_center;
  Center text_center;

  /// Teacher initialized as an exact copy of the student.
  explicit MomentumBank(const Model& student);
};

}  // namespace r2d2
