#pragma once

#include "r2d2/config.hpp"
#include "r2d2/data.hpp"
#include "r2d2/model.hpp"
#include "r2d2/momentum.hpp"
#include "r2d2/objectives.hpp"

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2d2 {

/// Linear warmup from 0 to `peak`, then cosine decay towards 0.
double learning_rate(int64_t step, int64_t total_steps, double peak, double warmup_fraction);
int64_t warmup_steps(int64_t total_steps, double warmup_fraction);

/// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<NamedParameter> params, const TrainConfig& cfg);

  /// Scales every gradient so the global norm is at most `max_norm`;
  /// returns the norm before clipping.
  double clip_grad_norm(double max_norm);
  void zero_grad();
  /// Parameters without a gradient this step are left untouched.
  void step(double lr);

  int64_t steps() const { return t_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  std::vector<NamedParameter> params_;
  std::vector<Matrix> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
  int64_t t_ = 0;
};

enum class Objective { pretrain, retrieval, matching };
std::string to_string(Objective o);

/// Everything a run needs to continue bit-exactly.
struct TrainingState {
  RunConfig config;
  Objective objective = Objective::pretrain;
  std::unique_ptr<Model> model;
  std::unique_ptr<MomentumBank> bank;
  AdamW optimizer;
  int64_t step = 0;
  int64_t total_steps = 0;

  /// New model initialized from config.train.seed.
  static std::unique_ptr<TrainingState> fresh(const RunConfig& config, Objective objective = Objective::pretrain);
};

/// Switches a (pre-trained) state to a fine-tuning objective: new train
/// config, fresh optimizer, step counter reset. Model and bank are kept.
void begin_finetune(TrainingState& state, Objective objective, const TrainConfig& train);

struct StepLog {
  int64_t step = 0;
  int64_t epoch = 0;
  LossBundle losses;
  double lr = 0.0;
  double tau = 0.0;
  double grad_norm = 0.0;
  int queue_fill = 0;
};

/// Version of the metric stream written by write_metric.
inline constexpr int kMetricVersion = 1;
std::string metric_line(const StepLog& log);

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, LossBundle bundle, int64_t step)
      : std::runtime_error(what), bundle_(bundle), step_(step) {}
  const LossBundle& bundle() const { return bundle_; }
  int64_t step() const { return step_; }

 private:
  LossBundle bundle_;
  int64_t step_;
};

struct TrainOptions {
  std::ostream* metrics = nullptr;            // JSONL, one line per step
  std::string abort_checkpoint;               // last-good state is saved here on abort
  int64_t max_steps = -1;                     // stop early (the schedule still spans all epochs)
  std::function<void(const StepLog&)> on_step;
};

/// One optimizer step on explicit inputs. `labels` is required for the
/// matching objective and ignored otherwise.
StepLog train_step(TrainingState& state, const StepInputs& inputs, const std::vector<int32_t>* labels = nullptr);

/// Epoch-based loop over `data` (partial last batches are dropped). Batch
/// order, text-field choice and masks derive from (seed, step), so a resumed
/// state continues exactly where it stopped. Throws TrainingAborted on a
/// non-finite loss or gradient.
std::vector<StepLog> run_training(TrainingState& state, const std::vector<const RawRecord*>& data,
                                  const TrainOptions& options = {});

std::vector<StepLog> pretrain(TrainingState& state, const std::vector<const RawRecord*>& data,
                              const TrainOptions& options = {});
std::vector<StepLog> finetune_retrieval(TrainingState& state, const std::vector<const RawRecord*>& data,
                                        const TrainConfig& train, const TrainOptions& options = {});
/// Labels come from RawRecord::is_match.
std::vector<StepLog> finetune_matching(TrainingState& state, const std::vector<const RawRecord*>& data,
                                       const TrainConfig& train, const TrainOptions& options = {});

int64_t steps_per_epoch(size_t records, int batch_size);

/// Binary checkpoint: magic, format version, JSON header, raw float64 arrays.
inline constexpr int kCheckpointVersion = 1;
void save_checkpoint(const TrainingState& state, const std::string& path);
std::unique_ptr<TrainingState> load_checkpoint(const std::string& path);

}  // namespace r2d2
