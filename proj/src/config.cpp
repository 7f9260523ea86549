#include "r2d2/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace r2d2 {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key, "expected an unsigned integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Setting {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define R2D2_INT(field, name)                                                          \
  Setting{name, [](RunConfig& c, const std::string& v) { c.field = parse_int(name, v); }, \
          [](const RunConfig& c) { return std::to_string(c.field); }}
#define R2D2_REAL(field, name)                                                          \
  Setting{name, [](RunConfig& c, const std::string& v) { c.field = parse_real(name, v); }, \
          [](const RunConfig& c) { return fmt_real(c.field); }}
#define R2D2_BOOL(field, name)                                                          \
  Setting{name, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }, \
          [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}

const std::vector<Setting>& settings() {
  static const std::vector<Setting> table = {
      R2D2_INT(model.hidden_dim, "hidden_dim"),
      R2D2_INT(model.num_heads, "num_heads"),
      R2D2_INT(model.text_layers, "text_layers"),
      R2D2_INT(model.image_layers, "image_layers"),
      R2D2_INT(model.cross_layers, "cross_layers"),
      R2D2_INT(model.ffn_multiplier, "ffn_multiplier"),
      R2D2_INT(model.image_patch_size, "image_patch_size"),
      R2D2_INT(model.image_resolution, "image_resolution"),
      R2D2_INT(model.image_channels, "image_channels"),
      R2D2_INT(model.vocab_size, "vocab_size"),
      R2D2_INT(model.max_text_len, "max_text_len"),
      R2D2_REAL(model.init_std, "init_std"),
      R2D2_REAL(model.tau_init, "tau_init"),
      R2D2_REAL(model.tau_min, "tau_min"),
      R2D2_REAL(model.tau_s, "tau_s"),
      R2D2_REAL(model.tau_t, "tau_t"),
      R2D2_REAL(model.ema_momentum, "ema_momentum"),
      R2D2_INT(model.queue_capacity, "queue_capacity"),
      R2D2_REAL(model.queue_decay, "queue_decay"),
      R2D2_REAL(model.mask_ratio, "mask_ratio"),
      R2D2_REAL(model.image_mask_ratio, "image_mask_ratio"),
      R2D2_REAL(model.tgd_alpha, "tgd_alpha"),
      R2D2_REAL(model.center_momentum, "center_momentum"),
      R2D2_BOOL(model.freeze_image_encoder, "freeze_image_encoder"),
      R2D2_INT(model.attention_map_layer, "attention_map_layer"),
      R2D2_INT(train.epochs, "epochs"),
      R2D2_INT(train.batch_size, "batch_size"),
      R2D2_INT(train.shards, "shards"),
      R2D2_REAL(train.learning_rate, "learning_rate"),
      R2D2_REAL(train.warmup_fraction, "warmup_fraction"),
      R2D2_REAL(train.weight_decay, "weight_decay"),
      R2D2_REAL(train.beta1, "beta1"),
      R2D2_REAL(train.beta2, "beta2"),
      R2D2_REAL(train.adam_eps, "adam_eps"),
      R2D2_REAL(train.grad_clip, "grad_clip"),
      Setting{"seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); },
              [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      Setting{"field_mode", [](RunConfig& c, const std::string& v) { c.train.field_mode = parse_field_mode(v); },
              [](const RunConfig& c) { return to_string(c.train.field_mode); }},
      R2D2_BOOL(train.ablation.enhanced_training, "enhanced_training"),
      R2D2_BOOL(train.ablation.mlm, "use_mlm"),
      R2D2_BOOL(train.ablation.tgd, "use_tgd"),
      R2D2_BOOL(train.ablation.fgd, "use_fgd"),
      R2D2_BOOL(train.ablation.cross_encoders, "use_cross_encoders"),
      R2D2_BOOL(train.ablation.gcpr, "use_gcpr"),
      R2D2_BOOL(train.ablation.fgr, "use_fgr"),
  };
  return table;
}

#undef R2D2_INT
#undef R2D2_REAL
#undef R2D2_BOOL

void check(bool ok, const char* key, const std::string& msg) {
  if (!ok) throw ConfigError(key, msg);
}

bool unit_interval(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

void ModelConfig::validate() const {
  check(hidden_dim > 0, "hidden_dim", "must be positive");
  check(num_heads > 0, "num_heads", "must be positive");
  check(hidden_dim % num_heads == 0, "num_heads", "hidden_dim must be divisible by num_heads");
  check(text_layers >= 1, "text_layers", "must be at least 1");
  check(image_layers >= 1, "image_layers", "must be at least 1");
  check(cross_layers >= 1, "cross_layers", "must be at least 1");
  check(ffn_multiplier >= 1, "ffn_multiplier", "must be at least 1");
  check(image_patch_size > 0, "image_patch_size", "must be positive");
  check(image_resolution > 0 && image_resolution % image_patch_size == 0, "image_resolution",
        "must be a positive multiple of image_patch_size");
  check(image_channels > 0, "image_channels", "must be positive");
  check(vocab_size >= 4, "vocab_size", "must hold the special tokens");
  check(max_text_len >= 2, "max_text_len", "must be at least 2");
  check(init_std > 0.0, "init_std", "must be positive");
  check(tau_init > 0.0, "tau_init", "must be positive");
  check(tau_min > 0.0 && tau_min <= tau_init, "tau_min", "must lie in (0, tau_init]");
  check(tau_s > 0.0, "tau_s", "must be positive");
  check(tau_t > 0.0, "tau_t", "must be positive");
  check(unit_interval(ema_momentum), "ema_momentum", "must lie in [0, 1]");
  check(queue_capacity >= 0, "queue_capacity", "must be non-negative");
  check(unit_interval(queue_decay) && queue_decay > 0.0, "queue_decay", "must lie in (0, 1]");
  check(unit_interval(mask_ratio), "mask_ratio", "must lie in [0, 1]");
  check(unit_interval(image_mask_ratio), "image_mask_ratio", "must lie in [0, 1]");
  check(unit_interval(tgd_alpha), "tgd_alpha", "must lie in [0, 1]");
  check(unit_interval(center_momentum), "center_momentum", "must lie in [0, 1]");
  check(attention_map_layer < cross_layers, "attention_map_layer", "must be below cross_layers");
}

void TrainConfig::validate() const {
  check(epochs >= 0, "epochs", "must be non-negative");
  check(batch_size >= 2, "batch_size", "must be at least 2");
  check(shards >= 1, "shards", "must be at least 1");
  check(batch_size % shards == 0, "shards", "batch_size must be divisible by shards");
  check(learning_rate >= 0.0, "learning_rate", "must be non-negative");
  check(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "warmup_fraction", "must lie in [0, 1)");
  check(weight_decay >= 0.0, "weight_decay", "must be non-negative");
  check(beta1 >= 0.0 && beta1 < 1.0, "beta1", "must lie in [0, 1)");
  check(beta2 >= 0.0 && beta2 < 1.0, "beta2", "must lie in [0, 1)");
  check(adam_eps > 0.0, "adam_eps", "must be positive");
  check(grad_clip >= 0.0, "grad_clip", "must be non-negative (0 disables)");
}

std::vector<AblationRow> ablation_table() {
  std::vector<AblationRow> rows;
  AblationFlags full;
  rows.push_back({"PRD2", [] {
                    AblationFlags f;
                    f.cross_encoders = false;
                    f.fgr = false;
                    f.mlm = false;
                    return f;
                  }()});
  rows.push_back({"R2D2", full});
  rows.push_back({"R2D2 w/o ET", parse_ablation_list("no-et")});
  rows.push_back({"R2D2 w/o MLM", parse_ablation_list("no-mlm")});
  rows.push_back({"R2D2 w/o TwD", parse_ablation_list("no-twd")});
  rows.push_back({"R2D2 w/o TgD", parse_ablation_list("no-tgd")});
  rows.push_back({"R2D2 w/o FgD", parse_ablation_list("no-fgd")});
  return rows;
}

AblationFlags parse_ablation_list(const std::string& list, AblationFlags base) {
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    if (item == "no-et") base.enhanced_training = false;
    else if (item == "no-mlm") base.mlm = false;
    else if (item == "no-tgd") base.tgd = false;
    else if (item == "no-fgd") base.fgd = false;
    else if (item == "no-twd") base.tgd = base.fgd = false;
    else if (item == "no-gcpr") base.gcpr = false;
    else if (item == "no-fgr") base.fgr = false;
    else if (item == "prd2" || item == "no-cross") {
      base.cross_encoders = false;
      base.fgr = false;
      base.mlm = false;
    } else {
      throw ConfigError("ablation", "unknown flag '" + item + "'");
    }
  }
  return base;
}

FieldMode parse_field_mode(const std::string& s) {
  if (s == "all") return FieldMode::all;
  if (s == "title_only") return FieldMode::title_only;
  if (s == "content_only") return FieldMode::content_only;
  if (s == "query_only") return FieldMode::query_only;
  if (s == "no_title") return FieldMode::no_title;
  if (s == "no_content") return FieldMode::no_content;
  if (s == "no_query") return FieldMode::no_query;
  throw ConfigError("field_mode", "unknown mode '" + s + "'");
}

std::string to_string(FieldMode mode) {
  switch (mode) {
    case FieldMode::all: return "all";
    case FieldMode::title_only: return "title_only";
    case FieldMode::content_only: return "content_only";
    case FieldMode::query_only: return "query_only";
    case FieldMode::no_title: return "no_title";
    case FieldMode::no_content: return "no_content";
    case FieldMode::no_query: return "no_query";
  }
  return "all";
}

namespace presets {

ModelConfig paper_model() {
  ModelConfig m;
  m.hidden_dim = 768;
  m.num_heads = 12;
  m.text_layers = 12;
  m.image_layers = 12;
  m.cross_layers = 6;
  m.image_patch_size = 16;
  m.image_resolution = 224;
  m.vocab_size = 21128;
  m.max_text_len = 130;
  m.tau_init = 0.07;
  m.tau_s = 0.1;
  m.tau_t = 0.04;
  m.ema_momentum = 0.995;
  m.queue_capacity = 36864;
  m.queue_decay = 0.99;
  m.mask_ratio = 0.15;
  m.freeze_image_encoder = true;
  return m;
}

TrainConfig paper_pretrain() {
  TrainConfig t;
  t.epochs = 15;
  t.batch_size = 4096;
  t.shards = 128;
  t.learning_rate = 5e-4;
  return t;
}

ModelConfig desk_model() { return ModelConfig{}; }

TrainConfig desk_pretrain() { return TrainConfig{}; }

TrainConfig retrieval_finetune(bool paper_scale) {
  TrainConfig t = paper_scale ? paper_pretrain() : desk_pretrain();
  t.epochs = 20;
  t.batch_size = 32;
  t.shards = 1;
  t.learning_rate = 1e-5;
  t.ablation.mlm = false;
  t.ablation.fgd = false;
  t.ablation.tgd = false;
  return t;
}

TrainConfig matching_finetune(bool paper_scale) {
  TrainConfig t = paper_scale ? paper_pretrain() : desk_pretrain();
  t.epochs = 5;
  t.batch_size = 64;
  t.shards = 1;
  t.learning_rate = 1e-5;
  if (!paper_scale) {
    // a short desk pre-training leaves the matching head near its prior
    t.epochs = 20;
    t.learning_rate = 5e-4;
  }
  t.ablation.gcpr = false;
  t.ablation.mlm = false;
  t.ablation.fgd = false;
  t.ablation.tgd = false;
  return t;
}

RunConfig by_name(const std::string& name) {
  if (name == "paper") return {paper_model(), paper_pretrain()};
  if (name == "desk") return {desk_model(), desk_pretrain()};
  throw ConfigError("preset", "unknown preset '" + name + "' (expected paper or desk)");
}

}  // namespace presets

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& s : settings()) {
    if (s.key == key) {
      s.set(cfg, value);
      return;
    }
  }
  throw ConfigError(key, "unknown configuration key");
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(line, "line " + std::to_string(lineno) + " is not key=value");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

void apply_env_overrides(RunConfig& cfg, const std::string& prefix) {
  for (const auto& s : settings()) {
    std::string env = prefix;
    for (char c : s.key) env.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (const char* v = std::getenv(env.c_str())) s.set(cfg, trim(v));
  }
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& s : settings()) out += s.key + "=" + s.get(cfg) + "\n";
  return out;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const auto& s : settings()) keys.push_back(s.key);
  return keys;
}

}  // namespace r2d2
