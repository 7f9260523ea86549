#include "r2d2/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace r2d2 {

namespace {

Tensor random_normal(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return Tensor(std::move(m), true);
}

void add_param(std::vector<NamedParameter>& out, const std::string& name, const Tensor& t, bool decay) {
  out.push_back({name, t, decay});
}

}  // namespace

// ---------------------------------------------------------------------------
// Inputs

TokenSequence TokenSequence::from_ids(std::vector<int32_t> ids) {
  TokenSequence t;
  t.attention_mask.assign(ids.size(), 1);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kPadId) t.attention_mask[i] = 0;
  }
  t.ids = std::move(ids);
  return t;
}

int TokenSequence::word_count() const {
  int n = 0;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (attention_mask[i] && ids[i] >= kFirstWordId) ++n;
  }
  return n;
}

std::vector<size_t> TokenSequence::mask_positions() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kMaskId) out.push_back(i);
  }
  return out;
}

TextBatch TextBatch::from(std::span<const TokenSequence* const> texts, Eigen::Index pad_to) {
  TextBatch b;
  b.batch = static_cast<Eigen::Index>(texts.size());
  b.length = pad_to;
  for (const auto* t : texts) b.length = std::max<Eigen::Index>(b.length, static_cast<Eigen::Index>(t->size()));
  b.ids.assign(static_cast<size_t>(b.batch * b.length), kPadId);
  b.mask.assign(b.ids.size(), 0);
  for (Eigen::Index i = 0; i < b.batch; ++i) {
    const auto& t = *texts[static_cast<size_t>(i)];
    if (t.ids.size() != t.attention_mask.size()) throw std::invalid_argument("token sequence: mask length");
    for (size_t j = 0; j < t.size(); ++j) {
      b.ids[static_cast<size_t>(i * b.length) + j] = t.ids[j];
      b.mask[static_cast<size_t>(i * b.length) + j] = t.attention_mask[j];
    }
  }
  return b;
}

TextBatch TextBatch::from(std::span<const TokenSequence> texts, Eigen::Index pad_to) {
  std::vector<const TokenSequence*> ptrs;
  for (const auto& t : texts) ptrs.push_back(&t);
  return from(std::span<const TokenSequence* const>(ptrs), pad_to);
}

ImageBatch ImageBatch::from(std::span<const ImageInput* const> images) {
  ImageBatch b;
  b.batch = static_cast<Eigen::Index>(images.size());
  if (images.empty()) return b;
  b.channels = images.front()->channels;
  b.size = images.front()->height;
  const Eigen::Index n = static_cast<Eigen::Index>(b.channels) * b.size * b.size;
  b.pixels.resize(b.batch, n);
  for (Eigen::Index i = 0; i < b.batch; ++i) {
    const auto& img = *images[static_cast<size_t>(i)];
    if (img.height != img.width || img.height != b.size || img.channels != b.channels ||
        static_cast<Eigen::Index>(img.pixels.size()) != n) {
      throw std::invalid_argument("image batch: inconsistent image shapes");
    }
    b.pixels.row(i) = Eigen::Map<const RowVector>(img.pixels.data(), n);
  }
  return b;
}

ImageBatch ImageBatch::from(std::span<const ImageInput> images) {
  std::vector<const ImageInput*> ptrs;
  for (const auto& t : images) ptrs.push_back(&t);
  return from(std::span<const ImageInput* const>(ptrs));
}

Stream Stream::select(std::span<const Eigen::Index> sequences) const {
  std::vector<Eigen::Index> rows;
  Stream out;
  out.batch = static_cast<Eigen::Index>(sequences.size());
  out.length = length;
  rows.reserve(sequences.size() * static_cast<size_t>(length));
  for (auto s : sequences) {
    if (s < 0 || s >= batch) throw std::out_of_range("stream select: sequence index");
    for (Eigen::Index j = 0; j < length; ++j) {
      rows.push_back(s * length + j);
      out.mask.push_back(mask[static_cast<size_t>(s * length + j)]);
    }
  }
  out.hidden = ops::gather_rows(hidden, rows);
  return out;
}

Stream Stream::concat(const std::vector<Stream>& parts) {
  if (parts.empty()) throw std::invalid_argument("stream concat: nothing to join");
  Stream out;
  out.length = parts.front().length;
  std::vector<Tensor> hs;
  for (const auto& p : parts) {
    if (p.length != out.length) throw std::invalid_argument("stream concat: length mismatch");
    out.batch += p.batch;
    out.mask.insert(out.mask.end(), p.mask.begin(), p.mask.end());
    hs.push_back(p.hidden);
  }
  out.hidden = ops::concat_rows(hs);
  return out;
}

// ---------------------------------------------------------------------------
// Layers

Linear::Linear(int in, int out, double init_std, std::mt19937_64& rng)
    : weight(random_normal(in, out, init_std, rng)), bias(Tensor::zeros(1, out, true)) {}

void Linear::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  add_param(out, prefix + ".weight", weight, true);
  add_param(out, prefix + ".bias", bias, false);
}

LayerNorm::LayerNorm(int dim)
    : gamma(Tensor(Matrix::Ones(1, dim), true)), beta(Tensor::zeros(1, dim, true)) {}

void LayerNorm::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  add_param(out, prefix + ".gamma", gamma, false);
  add_param(out, prefix + ".beta", beta, false);
}

MultiHeadAttention::MultiHeadAttention(int dim, int heads, double init_std, std::mt19937_64& rng)
    : heads_(heads),
      q_(dim, dim, init_std, rng),
      k_(dim, dim, init_std, rng),
      v_(dim, dim, init_std, rng),
      o_(dim, dim, init_std, rng) {}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Stream& kv, Eigen::Index batch,
                                      std::shared_ptr<ops::AttentionProbs>* probs) const {
  Tensor ctx = ops::attention(q_(queries), k_(kv.hidden), v_(kv.hidden), batch, heads_, kv.mask, probs);
  return o_(ctx);
}

void MultiHeadAttention::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  q_.collect(out, prefix + ".query");
  k_.collect(out, prefix + ".key");
  v_.collect(out, prefix + ".value");
  o_.collect(out, prefix + ".output");
}

FeedForward::FeedForward(int dim, int hidden, double init_std, std::mt19937_64& rng)
    : up_(dim, hidden, init_std, rng), down_(hidden, dim, init_std, rng) {}

void FeedForward::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  up_.collect(out, prefix + ".up");
  down_.collect(out, prefix + ".down");
}

TransformerLayer::TransformerLayer(const ModelConfig& cfg, bool cross, std::mt19937_64& rng)
    : cross_(cross),
      ln_self_(cfg.hidden_dim),
      ln_cross_(cfg.hidden_dim),
      ln_ffn_(cfg.hidden_dim),
      self_attn_(cfg.hidden_dim, cfg.num_heads, cfg.init_std, rng),
      ffn_(cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_multiplier, cfg.init_std, rng) {
  if (cross_) cross_attn_ = MultiHeadAttention(cfg.hidden_dim, cfg.num_heads, cfg.init_std, rng);
}

Stream TransformerLayer::operator()(const Stream& x, const Stream* other,
                                    std::shared_ptr<ops::AttentionProbs>* cross_probs) const {
  Stream normed{ln_self_(x.hidden), x.batch, x.length, x.mask};
  Tensor h = ops::add(x.hidden, self_attn_(normed.hidden, normed, x.batch));
  if (cross_) {
    if (!other) throw std::invalid_argument("cross layer needs a second stream");
    if (other->batch != x.batch) throw std::invalid_argument("cross layer: batch mismatch");
    h = ops::add(h, cross_attn_(ln_cross_(h), *other, x.batch, cross_probs));
  }
  h = ops::add(h, ffn_(ln_ffn_(h)));
  return Stream{h, x.batch, x.length, x.mask};
}

void TransformerLayer::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  ln_self_.collect(out, prefix + ".ln_self");
  self_attn_.collect(out, prefix + ".self_attn");
  if (cross_) {
    ln_cross_.collect(out, prefix + ".ln_cross");
    cross_attn_.collect(out, prefix + ".cross_attn");
  }
  ln_ffn_.collect(out, prefix + ".ln_ffn");
  ffn_.collect(out, prefix + ".ffn");
}

// ---------------------------------------------------------------------------
// Encoders

TextEncoder::TextEncoder(const ModelConfig& cfg, std::mt19937_64& rng)
    : vocab_size_(cfg.vocab_size),
      max_len_(cfg.max_text_len),
      token_embedding_(random_normal(cfg.vocab_size, cfg.hidden_dim, cfg.init_std, rng)),
      position_embedding_(random_normal(cfg.max_text_len, cfg.hidden_dim, cfg.init_std, rng)),
      final_norm_(cfg.hidden_dim),
      projection_(cfg.hidden_dim, cfg.hidden_dim, cfg.init_std, rng) {
  for (int i = 0; i < cfg.text_layers; ++i) layers_.emplace_back(cfg, false, rng);
}

EncodedStream TextEncoder::operator()(const TextBatch& batch) const {
  if (batch.batch == 0) throw std::invalid_argument("encode_text: empty batch");
  if (batch.length > max_len_) {
    throw std::length_error("encode_text: sequence length " + std::to_string(batch.length) +
                            " exceeds max_text_len " + std::to_string(max_len_));
  }
  for (size_t i = 0; i < batch.ids.size(); ++i) {
    if (batch.ids[i] < 0 || batch.ids[i] >= vocab_size_) throw std::out_of_range("encode_text: token id outside vocabulary");
  }
  for (Eigen::Index b = 0; b < batch.batch; ++b) {
    if (batch.ids[static_cast<size_t>(b * batch.length)] != kClsId || !batch.mask[static_cast<size_t>(b * batch.length)]) {
      throw std::invalid_argument("encode_text: sequence must start with [CLS]");
    }
  }
  Tensor x = ops::embedding(token_embedding_, batch.ids);
  x = ops::add_tiled(x, ops::slice_rows(position_embedding_, 0, batch.length));
  Stream s{x, batch.batch, batch.length, batch.mask};
  for (const auto& layer : layers_) s = layer(s);
  s.hidden = final_norm_(s.hidden);

  std::vector<Eigen::Index> cls_rows;
  for (Eigen::Index b = 0; b < batch.batch; ++b) cls_rows.push_back(b * batch.length);
  Tensor pooled = ops::l2_normalize_rows(projection_(ops::gather_rows(s.hidden, cls_rows)));
  return EncodedStream{std::move(s), std::move(pooled)};
}

void TextEncoder::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  add_param(out, prefix + ".token_embedding", token_embedding_, true);
  add_param(out, prefix + ".position_embedding", position_embedding_, false);
  for (size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".layer" + std::to_string(i));
  final_norm_.collect(out, prefix + ".final_norm");
  projection_.collect(out, prefix + ".projection");
}

ImageEncoder::ImageEncoder(const ModelConfig& cfg, std::mt19937_64& rng)
    : patch_(cfg.image_patch_size),
      side_(cfg.patches_per_side()),
      resolution_(cfg.image_resolution),
      channels_(cfg.image_channels),
      patch_embedding_(cfg.patch_dim(), cfg.hidden_dim, cfg.init_std, rng),
      cls_token_(random_normal(1, cfg.hidden_dim, cfg.init_std, rng)),
      position_embedding_(random_normal(cfg.image_tokens(), cfg.hidden_dim, cfg.init_std, rng)),
      final_norm_(cfg.hidden_dim),
      projection_(cfg.hidden_dim, cfg.hidden_dim, cfg.init_std, rng) {
  for (int i = 0; i < cfg.image_layers; ++i) layers_.emplace_back(cfg, false, rng);
}

EncodedStream ImageEncoder::operator()(const ImageBatch& batch, std::span<const uint8_t> dropped) const {
  if (batch.batch == 0) throw std::invalid_argument("encode_image: empty batch");
  if (batch.size != resolution_ || batch.channels != channels_) {
    throw std::invalid_argument("encode_image: expected " + std::to_string(channels_) + "x" +
                                std::to_string(resolution_) + "x" + std::to_string(resolution_) + " input, got " +
                                std::to_string(batch.channels) + "x" + std::to_string(batch.size) + "x" +
                                std::to_string(batch.size));
  }
  const Eigen::Index patches = static_cast<Eigen::Index>(side_) * side_;
  const Eigen::Index tokens = patches + 1;
  if (!dropped.empty() && static_cast<Eigen::Index>(dropped.size()) != batch.batch * patches) {
    throw std::invalid_argument("encode_image: dropped-patch mask length");
  }

  // [batch*patches, channels*patch*patch], channel-major within a patch
  Matrix flat(batch.batch * patches, static_cast<Eigen::Index>(channels_) * patch_ * patch_);
  for (Eigen::Index b = 0; b < batch.batch; ++b) {
    for (int py = 0; py < side_; ++py) {
      for (int px = 0; px < side_; ++px) {
        const Eigen::Index row = b * patches + py * side_ + px;
        Eigen::Index col = 0;
        for (int c = 0; c < channels_; ++c) {
          for (int y = 0; y < patch_; ++y) {
            const Eigen::Index src = (static_cast<Eigen::Index>(c) * resolution_ + py * patch_ + y) * resolution_ + px * patch_;
            flat.row(row).segment(col, patch_) = batch.pixels.row(b).segment(src, patch_);
            col += patch_;
          }
        }
      }
    }
  }
  Tensor emb = patch_embedding_(Tensor(std::move(flat)));
  if (!dropped.empty()) {
    std::vector<double> keep(dropped.size());
    for (size_t i = 0; i < dropped.size(); ++i) keep[i] = dropped[i] ? 0.0 : 1.0;
    emb = ops::scale_rows(emb, keep);
  }

  // interleave [CLS] ahead of each image's patches
  std::vector<Tensor> parts{emb, cls_token_};
  Tensor joined = ops::concat_rows(parts);
  std::vector<Eigen::Index> order;
  order.reserve(static_cast<size_t>(batch.batch * tokens));
  for (Eigen::Index b = 0; b < batch.batch; ++b) {
    order.push_back(batch.batch * patches);
    for (Eigen::Index p = 0; p < patches; ++p) order.push_back(b * patches + p);
  }
  Tensor x = ops::add_tiled(ops::gather_rows(joined, order), position_embedding_);

  Stream s{x, batch.batch, tokens, std::vector<uint8_t>(static_cast<size_t>(batch.batch * tokens), 1)};
  for (const auto& layer : layers_) s = layer(s);
  s.hidden = final_norm_(s.hidden);

  std::vector<Eigen::Index> cls_rows;
  for (Eigen::Index b = 0; b < batch.batch; ++b) cls_rows.push_back(b * tokens);
  Tensor pooled = ops::l2_normalize_rows(projection_(ops::gather_rows(s.hidden, cls_rows)));
  return EncodedStream{std::move(s), std::move(pooled)};
}

void ImageEncoder::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  patch_embedding_.collect(out, prefix + ".patch_embedding");
  add_param(out, prefix + ".cls_token", cls_token_, false);
  add_param(out, prefix + ".position_embedding", position_embedding_, false);
  for (size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".layer" + std::to_string(i));
  final_norm_.collect(out, prefix + ".final_norm");
  projection_.collect(out, prefix + ".projection");
}

CrossEncoder::CrossEncoder(const ModelConfig& cfg, std::mt19937_64& rng) : final_norm_(cfg.hidden_dim) {
  for (int i = 0; i < cfg.cross_layers; ++i) layers_.emplace_back(cfg, true, rng);
}

FusionOutput CrossEncoder::operator()(const Stream& primary, const Stream& other, bool record_attention) const {
  if (primary.hidden.cols() != other.hidden.cols()) {
    throw std::invalid_argument("cross encoder: feature width mismatch (" + std::to_string(primary.hidden.cols()) +
                                " vs " + std::to_string(other.hidden.cols()) + ")");
  }
  FusionOutput out;
  Stream s = primary;
  for (const auto& layer : layers_) {
    std::shared_ptr<ops::AttentionProbs> probs;
    s = layer(s, &other, record_attention ? &probs : nullptr);
    if (record_attention) out.cross_attention.push_back(std::move(probs));
  }
  s.hidden = final_norm_(s.hidden);
  std::vector<Eigen::Index> cls_rows;
  for (Eigen::Index b = 0; b < s.batch; ++b) cls_rows.push_back(b * s.length);
  out.cls = ops::gather_rows(s.hidden, cls_rows);
  out.sequence = std::move(s);
  return out;
}

void CrossEncoder::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  for (size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".layer" + std::to_string(i));
  final_norm_.collect(out, prefix + ".final_norm");
}

MlmHead::MlmHead(const ModelConfig& cfg, std::mt19937_64& rng)
    : transform_(cfg.hidden_dim, cfg.hidden_dim, cfg.init_std, rng),
      norm_(cfg.hidden_dim),
      decoder_(cfg.hidden_dim, cfg.vocab_size, cfg.init_std, rng) {}

void MlmHead::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  transform_.collect(out, prefix + ".transform");
  norm_.collect(out, prefix + ".norm");
  decoder_.collect(out, prefix + ".decoder");
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  text_ = TextEncoder(cfg_, rng);
  image_ = ImageEncoder(cfg_, rng);
  image_text_ = CrossEncoder(cfg_, rng);
  text_image_ = CrossEncoder(cfg_, rng);
  matching_ = Linear(cfg_.hidden_dim, 2, cfg_.init_std, rng);
  mlm_head_ = MlmHead(cfg_, rng);
  tau_ = Tensor::scalar(cfg_.tau_init, true);
  set_trainable(true);
}

std::unique_ptr<Model> Model::clone() const {
  auto copy = std::make_unique<Model>(cfg_, 0);
  copy_parameters(*this, *copy);
  return copy;
}

EncodedStream Model::encode_text(const TextBatch& batch) const { return text_(batch); }

EncodedStream Model::encode_text(const TokenSequence& tokens) const {
  return text_(TextBatch::from(std::span<const TokenSequence>(&tokens, 1)));
}

EncodedStream Model::encode_image(const ImageBatch& batch, std::span<const uint8_t> dropped) const {
  return image_(batch, dropped);
}

EncodedStream Model::encode_image(const ImageInput& image) const {
  return image_(ImageBatch::from(std::span<const ImageInput>(&image, 1)));
}

FusionOutput Model::cross_encode_image_primary(const Stream& image, const Stream& text, bool record) const {
  counters_.image_primary_passes.fetch_add(1, std::memory_order_relaxed);
  return image_text_(image, text, record);
}

FusionOutput Model::cross_encode_text_primary(const Stream& text, const Stream& image, bool record) const {
  counters_.text_primary_passes.fetch_add(1, std::memory_order_relaxed);
  counters_.text_primary_sequences.fetch_add(text.batch, std::memory_order_relaxed);
  return text_image_(text, image, record);
}

Tensor Model::matching_head(const Tensor& cls) const {
  if (cls.cols() != cfg_.hidden_dim) throw std::invalid_argument("matching_head: input width must equal hidden_dim");
  return matching_(cls);
}

void Model::clamp_tau() {
  auto& v = tau_.mutable_value();
  v(0, 0) = std::max(v(0, 0), cfg_.tau_min);
}

std::vector<NamedParameter> Model::parameters() const {
  std::vector<NamedParameter> out;
  text_.collect(out, "text_encoder");
  image_.collect(out, "image_encoder");
  image_text_.collect(out, "image_text_cross");
  text_image_.collect(out, "text_image_cross");
  matching_.collect(out, "matching_head");
  mlm_head_.collect(out, "mlm_head");
  add_param(out, "tau", tau_, false);
  return out;
}

std::vector<NamedParameter> Model::image_encoder_parameters() const {
  std::vector<NamedParameter> out;
  image_.collect(out, "image_encoder");
  return out;
}

void Model::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
  if (cfg_.freeze_image_encoder) {
    for (auto& p : image_encoder_parameters()) p.tensor.set_requires_grad(false);
  }
}

void Model::reset_counters() const {
  counters_.text_primary_passes = 0;
  counters_.text_primary_sequences = 0;
  counters_.image_primary_passes = 0;
}

void copy_parameters(const Model& src, Model& dst) {
  auto a = src.parameters();
  auto b = dst.parameters();
  if (a.size() != b.size()) throw std::invalid_argument("copy_parameters: architecture mismatch");
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.rows() != b[i].tensor.rows() || a[i].tensor.cols() != b[i].tensor.cols()) {
      throw std::invalid_argument("copy_parameters: parameter '" + a[i].name + "' differs");
    }
    b[i].tensor.mutable_value() = a[i].tensor.value();
  }
}

}  // namespace r2d2
