#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2d2 {

/// Architecture and loss hyperparameters.
struct ModelConfig {
  int hidden_dim = 64;
  int num_heads = 4;
  int text_layers = 2;
  int image_layers = 2;
  int cross_layers = 2;
  int ffn_multiplier = 4;
  int image_patch_size = 8;
  int image_resolution = 32;
  int image_channels = 3;
  int vocab_size = 40;
  int max_text_len = 24;
  double init_std = 0.02;

  double tau_init = 0.07;
  double tau_min = 0.01;
  double tau_s = 0.1;
  double tau_t = 0.04;
  double ema_momentum = 0.995;
  int queue_capacity = 256;
  double queue_decay = 0.99;
  double mask_ratio = 0.15;
  double image_mask_ratio = 0.25;
  double tgd_alpha = 0.4;
  double center_momentum = 0.9;
  bool freeze_image_encoder = false;
  /// Cross layer used for attention maps; negative selects the third layer
  /// when available and the last one otherwise.
  int attention_map_layer = -1;

  int patches_per_side() const { return image_resolution / image_patch_size; }
  int image_tokens() const { return patches_per_side() * patches_per_side() + 1; }
  int patch_dim() const { return image_channels * image_patch_size * image_patch_size; }

  /// Throws ConfigError naming the first offending key.
  void validate() const;
};

/// Which pre-training terms are active. Defaults are the full objective.
struct AblationFlags {
  bool enhanced_training = true;
  bool mlm = true;
  bool tgd = true;
  bool fgd = true;
  bool cross_encoders = true;  // false gives the PRD2 configuration
  bool gcpr = true;
  bool fgr = true;

  bool operator==(const AblationFlags&) const = default;
};

/// Named rows of the component ablation table, in table order.
struct AblationRow {
  std::string name;
  AblationFlags flags;
};
std::vector<AblationRow> ablation_table();

/// Parses a comma-separated list such as "no-et,no-tgd" on top of `base`.
AblationFlags parse_ablation_list(const std::string& list, AblationFlags base = {});

enum class FieldMode { all, title_only, content_only, query_only, no_title, no_content, no_query };
FieldMode parse_field_mode(const std::string& s);
std::string to_string(FieldMode mode);

struct TrainConfig {
  int epochs = 15;
  int batch_size = 32;
  int shards = 1;
  double learning_rate = 5e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  uint64_t seed = 0;
  FieldMode field_mode = FieldMode::all;
  AblationFlags ablation;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

namespace presets {

/// Large-scale reference values; documents that setting and is
/// not meant to run on a desk machine.
ModelConfig paper_model();
TrainConfig paper_pretrain();
ModelConfig desk_model();
TrainConfig desk_pretrain();
/// Retrieval fine-tuning: GCPR + FGR, 20 epochs, lr 1e-5.
TrainConfig retrieval_finetune(bool paper_scale);
/// Matching fine-tuning: FGR only, 5 epochs, batch 64, lr 1e-5.
TrainConfig matching_finetune(bool paper_scale);
RunConfig by_name(const std::string& name);

}  // namespace presets

/// Applies a single key=value setting. Unknown keys and malformed values
/// throw ConfigError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Reads a flat key=value file ('#' starts a comment) over `base`.
RunConfig load_config_file(const std::string& path, RunConfig base);
RunConfig parse_config_text(const std::string& text, RunConfig base);

/// Applies every environment variable `<prefix><KEY>` whose lower-cased key
/// is a known setting (e.g. R2D2_HIDDEN_DIM=32).
void apply_env_overrides(RunConfig& cfg, const std::string& prefix = "R2D2_");

/// Every setting as key=value lines, loadable by parse_config_text.
std::string dump_config(const RunConfig& cfg);
std::vector<std::string> known_keys();

}  // namespace r2d2
