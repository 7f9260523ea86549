#pragma once

#include "r2d2/autograd.hpp"
#include "r2d2/config.hpp"

#include <atomic>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace r2d2 {

inline constexpr int32_t kPadId = 0;
inline constexpr int32_t kClsId = 1;
inline constexpr int32_t kMaskId = 2;
inline constexpr int32_t kFirstWordId = 3;

/// One tokenized text. ids[0] is [CLS]; attention_mask marks real tokens.
struct TokenSequence {
  std::vector<int32_t> ids;
  std::vector<uint8_t> attention_mask;

  static TokenSequence from_ids(std::vector<int32_t> ids);
  size_t size() const { return ids.size(); }
  /// Number of non-special tokens.
  int word_count() const;
  std::vector<size_t> mask_positions() const;
};

/// Channel-major pixels in [0, 1].
struct ImageInput {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int c, int y, int x) const { return pixels[(static_cast<size_t>(c) * height + y) * width + x]; }
};

/// Texts padded to a common length.
struct TextBatch {
  Eigen::Index batch = 0;
  Eigen::Index length = 0;
  std::vector<int32_t> ids;
  std::vector<uint8_t> mask;

  /// Pads to the longest text, or to `pad_to` when that is longer.
  static TextBatch from(std::span<const TokenSequence> texts, Eigen::Index pad_to = 0);
  static TextBatch from(std::span<const TokenSequence* const> texts, Eigen::Index pad_to = 0);
};

struct ImageBatch {
  Eigen::Index batch = 0;
  int channels = 0;
  int size = 0;
  Matrix pixels;  // [batch, channels*size*size]

  static ImageBatch from(std::span<const ImageInput> images);
  static ImageBatch from(std::span<const ImageInput* const> images);
};

/// Hidden states of `batch` sequences of `length` tokens stacked along rows.
struct Stream {
  Tensor hidden;  // [batch*length, d]
  Eigen::Index batch = 0;
  Eigen::Index length = 0;
  std::vector<uint8_t> mask;  // [batch*length]

  /// Re-batches by sequence index; gradients flow back to the source rows.
  Stream select(std::span<const Eigen::Index> sequences) const;
  static Stream concat(const std::vector<Stream>& parts);
};

struct EncodedStream {
  Stream stream;
  Tensor pooled;  // [batch, d], projected [CLS] state, unit norm
};

struct FusionOutput {
  Stream sequence;  // primary stream
  Tensor cls;       // [batch, d]
  /// Cross-attention probabilities per layer (filled when requested).
  std::vector<std::shared_ptr<ops::AttentionProbs>> cross_attention;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool weight_decay = false;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, double init_std, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

  Tensor weight;  // [in, out]
  Tensor bias;    // [1, out]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

  Tensor gamma, beta;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, double init_std, std::mt19937_64& rng);
  Tensor operator()(const Tensor& queries, const Stream& keys_values, Eigen::Index batch,
                    std::shared_ptr<ops::AttentionProbs>* probs = nullptr) const;
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  int heads_ = 1;
  Linear q_, k_, v_, o_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(int dim, int hidden, double init_std, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return down_(ops::gelu(up_(x))); }
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  Linear up_, down_;
};

/// Pre-norm transformer block; with `cross` it also attends to a second
/// stream after self-attention.
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(const ModelConfig& cfg, bool cross, std::mt19937_64& rng);
  Stream operator()(const Stream& x, const Stream* other = nullptr,
                    std::shared_ptr<ops::AttentionProbs>* cross_probs = nullptr) const;
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  bool cross_ = false;
  LayerNorm ln_self_, ln_cross_, ln_ffn_;
  MultiHeadAttention self_attn_, cross_attn_;
  FeedForward ffn_;
};

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const ModelConfig& cfg, std::mt19937_64& rng);
  EncodedStream operator()(const TextBatch& batch) const;
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  int vocab_size_ = 0;
  int max_len_ = 0;
  Tensor token_embedding_, position_embedding_;
  std::vector<TransformerLayer> layers_;
  LayerNorm final_norm_;
  Linear projection_;
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ModelConfig& cfg, std::mt19937_64& rng);
  /// `dropped_patches` (optional, [batch*patches]) zeroes patch embeddings.
  EncodedStream operator()(const ImageBatch& batch, std::span<const uint8_t> dropped_patches = {}) const;
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  int patch_ = 0, side_ = 0, resolution_ = 0, channels_ = 0;
  Linear patch_embedding_;
  Tensor cls_token_, position_embedding_;
  std::vector<TransformerLayer> layers_;
  LayerNorm final_norm_;
  Linear projection_;
};

class CrossEncoder {
 public:
  CrossEncoder() = default;
  CrossEncoder(const ModelConfig& cfg, std::mt19937_64& rng);
  FusionOutput operator()(const Stream& primary, const Stream& other, bool record_attention) const;
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;
  size_t depth() const { return layers_.size(); }

 private:
  std::vector<TransformerLayer> layers_;
  LayerNorm final_norm_;
};

class MlmHead {
 public:
  MlmHead() = default;
  MlmHead(const ModelConfig& cfg, std::mt19937_64& rng);
  Tensor operator()(const Tensor& hidden) const { return decoder_(norm_(ops::gelu(transform_(hidden)))); }
  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  Linear transform_;
  LayerNorm norm_;
  Linear decoder_;
};

/// Dual-stream encoders, the two cross encoders and the task heads.
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = delete;

  /// Deep copy with fresh parameter leaves.
  std::unique_ptr<Model> clone() const;

  const ModelConfig& config() const { return cfg_; }

  EncodedStream encode_text(const TextBatch& batch) const;
  EncodedStream encode_text(const TokenSequence& tokens) const;
  EncodedStream encode_image(const ImageBatch& batch, std::span<const uint8_t> dropped_patches = {}) const;
  EncodedStream encode_image(const ImageInput& image) const;

  /// Image tokens attend to text hidden states; cls is h_I[CLS].
  FusionOutput cross_encode_image_primary(const Stream& image, const Stream& text,
                                          bool record_attention = false) const;
  /// Text tokens attend to image hidden states; cls is h_T[CLS].
  FusionOutput cross_encode_text_primary(const Stream& text, const Stream& image,
                                         bool record_attention = false) const;

  /// Two-class logits [rows, 2]; column 1 is "matched". Shared by both
  /// cross encoders.
  Tensor matching_head(const Tensor& cls) const;
  Tensor mlm_logits(const Tensor& hidden) const { return mlm_head_(hidden); }

  const Tensor& tau() const { return tau_; }
  /// Clamps the learnable temperature to its configured floor.
  void clamp_tau();

  /// Every parameter in a fixed order with a stable name.
  std::vector<NamedParameter> parameters() const;
  std::vector<NamedParameter> image_encoder_parameters() const;

  /// Marks every leaf as requiring (or not) gradients; image-encoder
  /// parameters stay frozen when the config says so.
  void set_trainable(bool trainable);

  struct FusionCounters {
    std::atomic<int64_t> text_primary_passes{0};
    std::atomic<int64_t> text_primary_sequences{0};
    std::atomic<int64_t> image_primary_passes{0};
  };
  FusionCounters& counters() const { return counters_; }
  void reset_counters() const;

 private:
  ModelConfig cfg_;
  TextEncoder text_;
  ImageEncoder image_;
  CrossEncoder image_text_;  // image primary
  CrossEncoder text_image_;  // text primary
  Linear matching_;
  MlmHead mlm_head_;
  Tensor tau_;
  mutable FusionCounters counters_;
};

/// Copies parameter values from `src` into `dst` (same architecture).
void copy_parameters(const Model& src, Model& dst);

}  // namespace r2d2
