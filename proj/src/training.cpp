#include "r2d2/training.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>

namespace r2d2 {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

int64_t warmup_steps(int64_t total_steps, double warmup_fraction) {
  if (warmup_fraction <= 0.0 || total_steps <= 0) return 0;
  return std::max<int64_t>(1, std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

double learning_rate(int64_t step, int64_t total_steps, double peak, double warmup_fraction) {
  const int64_t warm = warmup_steps(total_steps, warmup_fraction);
  if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<int64_t>(1, total_steps - warm));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::vector<NamedParameter> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    v_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (p.tensor.requires_grad() && p.tensor.grad().size()) sq += p.tensor.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (auto& p : params_) {
      Tensor t = p.tensor;
      if (t.requires_grad() && t.grad().size()) t.mutable_grad() *= s;
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor t = params_[i].tensor;
    if (!t.requires_grad() || t.grad().size() == 0) continue;
    const Matrix& g = t.grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
    Matrix& w = t.mutable_value();
    if (params_[i].weight_decay && weight_decay_ > 0.0) w *= 1.0 - lr * weight_decay_;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::pretrain:
      return "pretrain";
    case Objective::retrieval:
      return "retrieval";
    case Objective::matching:
      return "matching";
  }
  return "?";
}

namespace {

Objective parse_objective(const std::string& s) {
  if (s == "pretrain") return Objective::pretrain;
  if (s == "retrieval") return Objective::retrieval;
  if (s == "matching") return Objective::matching;
  throw std::runtime_error("unknown objective '" + s + "' in checkpoint");
}

std::mt19937_64 step_rng(uint64_t seed, int64_t step, uint32_t salt) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(step),
                    static_cast<uint32_t>(static_cast<uint64_t>(step) >> 32), salt};
  return std::mt19937_64(seq);
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int64_t epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  auto rng = step_rng(seed, epoch, 0xe90c);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

std::unique_ptr<TrainingState> TrainingState::fresh(const RunConfig& config, Objective objective) {
  config.model.validate();
  config.train.validate();
  auto s = std::make_unique<TrainingState>();
  s->config = config;
  s->objective = objective;
  s->model = std::make_unique<Model>(config.model, config.train.seed);
  s->bank = std::make_unique<MomentumBank>(*s->model);
  s->optimizer = AdamW(s->model->parameters(), config.train);
  return s;
}

void begin_finetune(TrainingState& state, Objective objective, const TrainConfig& train) {
  train.validate();
  state.config.train = train;
  if (objective == Objective::retrieval) {
    state.config.train.ablation.mlm = false;
    state.config.train.ablation.fgd = false;
  }
  state.objective = objective;
  state.optimizer = AdamW(state.model->parameters(), state.config.train);
  state.step = 0;
  state.total_steps = 0;
}

std::string metric_line(const StepLog& log) {
  nlohmann::json j;
  j["v"] = kMetricVersion;
  j["step"] = log.step;
  j["epoch"] = log.epoch;
  j["gcpr"] = log.losses.gcpr;
  j["fgr"] = log.losses.fgr;
  j["fgd"] = log.losses.fgd;
  j["mlm"] = log.losses.mlm;
  j["total"] = log.losses.total;
  j["lr"] = log.lr;
  j["tau"] = log.tau;
  j["grad_norm"] = log.grad_norm;
  j["queue_fill"] = log.queue_fill;
  return j.dump();
}

StepLog train_step(TrainingState& state, const StepInputs& inputs, const std::vector<int32_t>* labels) {
  const auto& tc = state.config.train;
  const auto& mc = state.config.model;
  Model& model = *state.model;
  MomentumBank& bank = *state.bank;

  state.optimizer.zero_grad();
  StepOutput out;
  if (state.objective == Objective::matching) {
    if (!labels) throw std::invalid_argument("train_step: matching needs labels");
    out = matching_loss(model, inputs.images, inputs.texts, *labels);
  } else {
    LossOptions opt;
    opt.flags = tc.ablation;
    opt.shards = tc.shards;
    out = total_loss(model, bank, inputs, opt);
  }
  out.total.backward();
  StepLog log;
  log.step = state.step;
  log.losses = out.losses;
  log.grad_norm = state.optimizer.clip_grad_norm(tc.grad_clip);
  if (!std::isfinite(log.grad_norm)) throw NonFiniteLoss("non-finite gradient norm", out.losses);

  log.lr = learning_rate(state.step, state.total_steps, tc.learning_rate, tc.warmup_fraction);
  state.optimizer.step(log.lr);
  model.clamp_tau();

  if (state.objective != Objective::matching) {
    ema_update(model, *bank.teacher, mc.ema_momentum);
    bank.image_queue.enqueue(out.teacher_image);
    bank.text_queue.enqueue(out.teacher_text);
    if (tc.ablation.fgd) {
      bank.image_center.update(out.teacher_image, mc.center_momentum);
      bank.text_center.update(out.teacher_text, mc.center_momentum);
    }
    ++bank.steps;
  }
  ++state.step;
  log.tau = model.tau().item();
  log.queue_fill = bank.text_queue.fill();
  return log;
}

int64_t steps_per_epoch(size_t records, int batch_size) {
  if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2");
  const auto spe = static_cast<int64_t>(records / static_cast<size_t>(batch_size));
  if (spe == 0) {
    throw std::invalid_argument("dataset of " + std::to_string(records) + " records is smaller than one batch of " +
                                std::to_string(batch_size));
  }
  return spe;
}

std::vector<StepLog> run_training(TrainingState& state, const std::vector<const RawRecord*>& data,
                                  const TrainOptions& options) {
  const auto& tc = state.config.train;
  const int64_t spe = steps_per_epoch(data.size(), tc.batch_size);
  if (state.total_steps == 0) state.total_steps = tc.epochs * spe;
  int64_t end = state.total_steps;
  if (options.max_steps >= 0) end = std::min(end, options.max_steps);

  std::vector<StepLog> logs;
  int64_t cached_epoch = -1;
  std::vector<size_t> order;
  const auto salt = static_cast<uint32_t>(state.objective);
  while (state.step < end) {
    const int64_t epoch = state.step / spe;
    if (epoch != cached_epoch) {
      order = epoch_order(data.size(), tc.seed, epoch);
      cached_epoch = epoch;
    }
    auto rng = step_rng(tc.seed, state.step, salt);
    const size_t first = static_cast<size_t>((state.step % spe) * tc.batch_size);
    std::vector<const ImageInput*> images;
    std::vector<const TokenSequence*> texts;
    std::vector<int32_t> labels;
    for (size_t i = first; i < first + static_cast<size_t>(tc.batch_size); ++i) {
      const RawRecord& r = *data[order[i]];
      images.push_back(&r.image);
      texts.push_back(&sample_text_field(r, rng, tc.field_mode));
      labels.push_back(r.is_match ? 1 : 0);
    }
    StepInputs inputs = state.objective == Objective::matching
                            ? StepInputs{images, texts, {}, {}}
                            : make_step_inputs(images, texts, state.config.model, rng);
    StepLog log;
    try {
      log = train_step(state, inputs, &labels);
    } catch (const NonFiniteLoss& e) {
      if (!options.abort_checkpoint.empty()) save_checkpoint(state, options.abort_checkpoint);
      throw TrainingAborted(std::string("training aborted at step ") + std::to_string(state.step) + ": " + e.what(),
                            e.bundle(), state.step);
    }
    log.epoch = epoch;
    if (options.metrics) *options.metrics << metric_line(log) << '\n';
    if (options.on_step) options.on_step(log);
    logs.push_back(log);
  }
  if (options.metrics) options.metrics->flush();
  return logs;
}

std::vector<StepLog> pretrain(TrainingState& state, const std::vector<const RawRecord*>& data,
                              const TrainOptions& options) {
  if (state.objective != Objective::pretrain) throw std::invalid_argument("pretrain: state is set up for fine-tuning");
  return run_training(state, data, options);
}

std::vector<StepLog> finetune_retrieval(TrainingState& state, const std::vector<const RawRecord*>& data,
                                        const TrainConfig& train, const TrainOptions& options) {
  begin_finetune(state, Objective::retrieval, train);
  return run_training(state, data, options);
}

std::vector<StepLog> finetune_matching(TrainingState& state, const std::vector<const RawRecord*>& data,
                                       const TrainConfig& train, const TrainOptions& options) {
  begin_finetune(state, Objective::matching, train);
  return run_training(state, data, options);
}

namespace {

constexpr char kMagic[8] = {'R', '2', 'D', '2', 'C', 'K', 'P', 'T'};

struct ArrayOut {
  std::string name;
  Matrix data;
};

Matrix int_column(const std::vector<int64_t>& v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  for (size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = static_cast<double>(v[i]);
  return m;
}

std::vector<int64_t> int_vector(const Matrix& m) {
  std::vector<int64_t> v(static_cast<size_t>(m.size()));
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int64_t>(m.data()[i]);
  return v;
}

void add_queue(std::vector<ArrayOut>& arrays, nlohmann::json& header, const std::string& name, const FeatureQueue& q) {
  arrays.push_back({name + "/features", q.raw_features()});
  arrays.push_back({name + "/ages", int_column(q.ages())});
  arrays.push_back({name + "/serials", int_column(q.serials())});
  header["queues"][name] = {{"fill", q.fill()}, {"head", q.head()}, {"next_serial", q.next_serial()}};
}

}  // namespace

void save_checkpoint(const TrainingState& state, const std::string& path) {
  std::vector<ArrayOut> arrays;
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["objective"] = to_string(state.objective);
  header["step"] = state.step;
  header["total_steps"] = state.total_steps;
  header["optimizer_steps"] = state.optimizer.steps();
  header["bank_steps"] = state.bank->steps;
  header["config"] = dump_config(state.config);

  for (const auto& p : state.model->parameters()) arrays.push_back({"student/" + p.name, p.tensor.value()});
  for (const auto& p : state.bank->teacher->parameters()) arrays.push_back({"teacher/" + p.name, p.tensor.value()});
  const auto& params = state.optimizer.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    arrays.push_back({"adam_m/" + params[i].name, state.optimizer.first_moments()[i]});
    arrays.push_back({"adam_v/" + params[i].name, state.optimizer.second_moments()[i]});
  }
  add_queue(arrays, header, "image_queue", state.bank->image_queue);
  add_queue(arrays, header, "text_queue", state.bank->text_queue);
  arrays.push_back({"center/image", state.bank->image_center.mu});
  arrays.push_back({"center/text", state.bank->text_center.mu});

  for (const auto& a : arrays) {
    header["arrays"].push_back({{"name", a.name}, {"rows", a.data.rows()}, {"cols", a.data.cols()}});
  }
  const std::string h = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(kMagic, sizeof kMagic);
    const auto version = static_cast<uint32_t>(kCheckpointVersion);
    const auto len = static_cast<uint64_t>(h.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& a : arrays) {
      out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write on checkpoint " + path);
  }
  std::rename(tmp.c_str(), path.c_str());
}

std::unique_ptr<TrainingState> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  uint32_t version = 0;
  uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error(path + " is not a checkpoint");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " is not supported");
  }
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(h);

  std::map<std::string, Matrix> arrays;
  for (const auto& a : header["arrays"]) {
    Matrix m(a["rows"].get<Eigen::Index>(), a["cols"].get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    arrays[a["name"].get<std::string>()] = std::move(m);
  }
  if (!in) throw std::runtime_error("checkpoint " + path + " is truncated");
  auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) -> Matrix& {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw std::runtime_error("checkpoint lacks array '" + name + "'");
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw std::runtime_error("checkpoint array '" + name + "' has the wrong shape");
    }
    return it->second;
  };

  const RunConfig config = parse_config_text(header["config"].get<std::string>(), RunConfig{});
  auto state = TrainingState::fresh(config, parse_objective(header["objective"]));
  state->step = header["step"];
  state->total_steps = header["total_steps"];
  state->bank->steps = header["bank_steps"];
  for (auto& p : state->model->parameters()) {
    Tensor t = p.tensor;
    t.mutable_value() = take("student/" + p.name, t.rows(), t.cols());
  }
  for (auto& p : state->bank->teacher->parameters()) {
    Tensor t = p.tensor;
    t.mutable_value() = take("teacher/" + p.name, t.rows(), t.cols());
  }
  const auto& params = state->optimizer.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto r = params[i].tensor.rows(), c = params[i].tensor.cols();
    state->optimizer.first_moments()[i] = take("adam_m/" + params[i].name, r, c);
    state->optimizer.second_moments()[i] = take("adam_v/" + params[i].name, r, c);
  }
  state->optimizer.set_steps(header["optimizer_steps"]);
  auto restore = [&](const std::string& name, FeatureQueue& q) {
    const auto& meta = header["queues"][name];
    q.restore(take(name + "/features", q.capacity(), q.dim()), int_vector(take(name + "/ages", q.capacity(), 1)),
              int_vector(take(name + "/serials", q.capacity(), 1)), meta["fill"], meta["head"], meta["next_serial"]);
  };
  restore("image_queue", state->bank->image_queue);
  restore("text_queue", state->bank->text_queue);
  const int d = config.model.hidden_dim;
  state->bank->image_center.mu = take("center/image", 1, d);
  state->bank->text_center.mu = take("center/text", 1, d);
  return state;
}

}  // namespace r2d2
