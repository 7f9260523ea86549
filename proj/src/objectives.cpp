#include "r2d2/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace r2d2 {

namespace {

void check_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).norm() - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string(what) + ": embeddings must be unit-norm");
    }
  }
}

void check_distribution_rows(const Matrix& t, const char* what) {
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    if ((t.row(r).array() < 0.0).any() || std::abs(t.row(r).sum() - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string(what) + ": target row " + std::to_string(r) +
                                  " is not a probability distribution");
    }
  }
}

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Tensor add_all(const std::vector<Tensor>& terms) {
  Tensor acc = terms.front();
  for (size_t i = 1; i < terms.size(); ++i) acc = ops::add(acc, terms[i]);
  return acc;
}

std::vector<Eigen::Index> iota(Eigen::Index begin, Eigen::Index end) {
  std::vector<Eigen::Index> v(static_cast<size_t>(end - begin));
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

SimilarityMatrix similarity_scores(const Tensor& local, const Tensor& gathered, const FeatureQueue* queue,
                                   const Tensor& tau) {
  if (local.cols() != gathered.cols()) throw std::invalid_argument("similarity_scores: width mismatch");
  if (tau.rows() != 1 || tau.cols() != 1 || !(tau.item() > 0.0)) {
    throw std::invalid_argument("similarity_scores: temperature must be positive");
  }
  check_unit_rows(local.value(), "similarity_scores");
  check_unit_rows(gathered.value(), "similarity_scores");

  SimilarityMatrix sm;
  sm.tau = tau.item();
  sm.batch_candidates = gathered.rows();
  Tensor raw = ops::matmul_nt(local, gathered);
  Matrix log_weights;
  if (queue && queue->fill() > 0) {
    if (queue->dim() != local.cols()) throw std::invalid_argument("similarity_scores: queue width mismatch");
    sm.queue_candidates = queue->fill();
    Tensor queued(queue->occupied_features());
    raw = ops::concat_cols({raw, ops::matmul_nt(local, queued)});
    log_weights = Matrix::Zero(local.rows(), sm.candidates());
    const Eigen::VectorXd w = queue->occupied_weights();
    for (Eigen::Index j = 0; j < sm.queue_candidates; ++j) {
      log_weights.col(sm.batch_candidates + j).setConstant(std::log(w(j)));
    }
  }
  sm.raw = raw.value();
  sm.logits = ops::div_scalar(raw, tau);
  if (log_weights.size() > 0) sm.logits = ops::add_constant(sm.logits, log_weights);
  sm.scores = row_softmax(sm.logits.value());
  return sm;
}

Matrix one_hot_targets(Eigen::Index rows, Eigen::Index cols, Eigen::Index offset) {
  if (offset < 0 || offset + rows > cols) throw std::invalid_argument("one_hot_targets: positives outside candidates");
  Matrix t = Matrix::Zero(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) t(i, offset + i) = 1.0;
  return t;
}

Tensor gcpr_loss(const SimilarityMatrix& i2t, const SimilarityMatrix& t2i, const Matrix& targets_i2t,
                 const Matrix& targets_t2i) {
  check_distribution_rows(targets_i2t, "gcpr_loss");
  check_distribution_rows(targets_t2i, "gcpr_loss");
  Tensor a = ops::soft_cross_entropy(i2t.logits, targets_i2t);
  Tensor b = ops::soft_cross_entropy(t2i.logits, targets_t2i);
  return ops::scale(ops::add(a, b), 0.5);
}

Matrix tgd_pseudo_targets(const Matrix& teacher_scores, const Matrix& one_hot, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("tgd_pseudo_targets: alpha outside [0, 1]");
  if (teacher_scores.rows() != one_hot.rows() || teacher_scores.cols() != one_hot.cols()) {
    throw std::invalid_argument("tgd_pseudo_targets: shape mismatch");
  }
  if (alpha == 0.0) return one_hot;
  if (alpha == 1.0) return teacher_scores;
  return alpha * teacher_scores + (1.0 - alpha) * one_hot;
}

HardNegatives mine_hard_negatives(const Matrix& scores) {
  const Eigen::Index n = scores.rows();
  if (scores.cols() != n) throw std::invalid_argument("mine_hard_negatives: scores must be square");
  if (n < 2) throw std::invalid_argument("mine_hard_negatives: need at least two pairs");
  HardNegatives out;
  out.text_for_image.resize(static_cast<size_t>(n));
  out.image_for_text.resize(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (best < 0 || scores(i, j) > scores(i, best)) best = j;
    }
    out.text_for_image[static_cast<size_t>(i)] = best;
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index best = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i == j) continue;
      if (best < 0 || scores(i, j) > scores(best, j)) best = i;
    }
    out.image_for_text[static_cast<size_t>(j)] = best;
  }
  return out;
}

Tensor fgr_loss(const Tensor& image_primary_logits, const Tensor& text_primary_logits,
                std::span<const int32_t> labels) {
  if (labels.empty()) throw std::invalid_argument("fgr_loss: empty batch");
  if (image_primary_logits.cols() != 2 || text_primary_logits.cols() != 2) {
    throw std::invalid_argument("fgr_loss: expected two-class logits");
  }
  Tensor a = ops::cross_entropy(image_primary_logits, labels);
  Tensor b = ops::cross_entropy(text_primary_logits, labels);
  return ops::scale(ops::add(a, b), 0.5);
}

Matrix fgd_teacher_distribution(const Matrix& teacher, const RowVector& mu, double tau_t) {
  if (!(tau_t > 0.0)) throw std::invalid_argument("fgd: tau_t must be positive");
  if (mu.cols() != teacher.cols()) throw std::invalid_argument("fgd: center width mismatch");
  Matrix centered = teacher;
  centered.rowwise() -= mu;
  return row_softmax(centered / tau_t);
}

Tensor fgd_loss(const Tensor& student, const Matrix& teacher, const RowVector& mu, double tau_s, double tau_t) {
  if (!(tau_s > 0.0)) throw std::invalid_argument("fgd: tau_s must be positive");
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw std::invalid_argument("fgd: student/teacher shape mismatch");
  }
  Matrix target = fgd_teacher_distribution(teacher, mu, tau_t);
  return ops::soft_cross_entropy(ops::scale(student, 1.0 / tau_s), target);
}

int masked_token_count(int words, double ratio) {
  if (words <= 0) return 0;
  const auto n = static_cast<int>(std::llround(ratio * words));
  return std::clamp(n, 1, words);
}

MaskedText mask_tokens(const TokenSequence& text, double ratio, std::mt19937_64& rng) {
  std::vector<int32_t> eligible;
  for (size_t i = 0; i < text.size(); ++i) {
    if (text.attention_mask[i] && text.ids[i] >= kFirstWordId) eligible.push_back(static_cast<int32_t>(i));
  }
  if (eligible.empty()) throw std::invalid_argument("mask_tokens: sequence holds only special tokens");
  const int count = masked_token_count(static_cast<int>(eligible.size()), ratio);
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<size_t> pick(static_cast<size_t>(i), eligible.size() - 1);
    std::swap(eligible[static_cast<size_t>(i)], eligible[pick(rng)]);
  }
  eligible.resize(static_cast<size_t>(count));
  std::sort(eligible.begin(), eligible.end());

  MaskedText out;
  out.tokens = text;
  out.positions = eligible;
  for (auto p : eligible) {
    out.labels.push_back(text.ids[static_cast<size_t>(p)]);
    out.tokens.ids[static_cast<size_t>(p)] = kMaskId;
  }
  return out;
}

std::vector<uint8_t> sample_patch_drop(Eigen::Index batch, int patches, double ratio, std::mt19937_64& rng) {
  std::vector<uint8_t> out(static_cast<size_t>(batch * patches), 0);
  const int count = std::clamp(static_cast<int>(std::llround(ratio * patches)), 0, patches);
  std::vector<int> idx(static_cast<size_t>(patches));
  for (Eigen::Index b = 0; b < batch; ++b) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < count; ++i) {
      std::uniform_int_distribution<int> pick(i, patches - 1);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(pick(rng))]);
      out[static_cast<size_t>(b * patches + idx[static_cast<size_t>(i)])] = 1;
    }
  }
  return out;
}

PairSet fgr_pairs(const HardNegatives& negatives) {
  const auto n = static_cast<Eigen::Index>(negatives.text_for_image.size());
  PairSet p;
  for (Eigen::Index i = 0; i < n; ++i) {
    p.image.push_back(i);
    p.text.push_back(i);
    p.labels.push_back(1);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    p.image.push_back(i);
    p.text.push_back(negatives.text_for_image[static_cast<size_t>(i)]);
    p.labels.push_back(0);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    p.image.push_back(negatives.image_for_text[static_cast<size_t>(j)]);
    p.text.push_back(j);
    p.labels.push_back(0);
  }
  p.mlm_pairs = n;
  return p;
}

FusionTerms fusion_terms(const Model& model, const Stream& image, const Stream& text, const Stream* masked_text,
                         std::span<const MaskedText> masks, const PairSet& pairs, bool use_fgr, bool use_mlm,
                         bool enhanced_training) {
  FusionTerms out;
  if (pairs.size() == 0) throw std::invalid_argument("fusion_terms: empty batch");
  if (use_mlm && (!masked_text || masks.size() != static_cast<size_t>(text.batch))) {
    throw std::invalid_argument("fusion_terms: MLM needs a masked text stream and one mask per text");
  }
  const bool shared = enhanced_training && use_mlm && use_fgr;
  Stream image_sel = image.select(pairs.image);

  Stream mlm_sequence;
  if (use_fgr) {
    Stream text_sel = text.select(pairs.text);
    FusionOutput fi = model.cross_encode_image_primary(image_sel, text_sel);
    FusionOutput ft = model.cross_encode_text_primary(shared ? masked_text->select(pairs.text) : text_sel, image_sel);
    out.image_primary_logits = model.matching_head(fi.cls);
    out.text_primary_logits = model.matching_head(ft.cls);
    out.fgr = fgr_loss(out.image_primary_logits, out.text_primary_logits, pairs.labels);
    if (shared) mlm_sequence = ft.sequence;
  }

  if (use_mlm) {
    const Eigen::Index m = pairs.mlm_pairs;
    if (m <= 0 || m > static_cast<Eigen::Index>(pairs.size())) throw std::invalid_argument("fusion_terms: no MLM pairs");
    if (!shared) {
      std::vector<Eigen::Index> img(pairs.image.begin(), pairs.image.begin() + m);
      std::vector<Eigen::Index> txt(pairs.text.begin(), pairs.text.begin() + m);
      mlm_sequence = model.cross_encode_text_primary(masked_text->select(txt), image.select(img)).sequence;
    }
    std::vector<Eigen::Index> rows;
    std::vector<int32_t> labels;
    for (Eigen::Index p = 0; p < m; ++p) {
      const auto& mask = masks[static_cast<size_t>(pairs.text[static_cast<size_t>(p)])];
      for (size_t i = 0; i < mask.positions.size(); ++i) {
        rows.push_back(p * mlm_sequence.length + mask.positions[i]);
        labels.push_back(mask.labels[i]);
      }
    }
    if (rows.empty()) throw std::invalid_argument("fusion_terms: no masked positions");
    out.mlm = ops::cross_entropy(model.mlm_logits(ops::gather_rows(mlm_sequence.hidden, rows)), labels);
  }
  return out;
}

StepInputs make_step_inputs(std::vector<const ImageInput*> images, std::vector<const TokenSequence*> texts,
                            const ModelConfig& cfg, std::mt19937_64& rng) {
  StepInputs in;
  in.images = std::move(images);
  in.texts = std::move(texts);
  for (const auto* t : in.texts) in.masked.push_back(mask_tokens(*t, cfg.mask_ratio, rng));
  const int patches = cfg.patches_per_side() * cfg.patches_per_side();
  in.dropped_patches = sample_patch_drop(static_cast<Eigen::Index>(in.images.size()), patches, cfg.image_mask_ratio, rng);
  return in;
}

namespace {

Tensor gathered_for(const std::vector<Tensor>& shards, size_t local, GatherMode mode) {
  if (mode == GatherMode::global) return ops::concat_rows(shards);
  std::vector<Tensor> parts;
  for (size_t s = 0; s < shards.size(); ++s) parts.push_back(s == local ? shards[s] : shards[s].detach());
  return ops::concat_rows(parts);
}

void finalize(StepOutput& out) {
  std::vector<Tensor> terms;
  auto take = [&](const Tensor& t, double& slot) {
    if (!t.defined()) return;
    slot = t.item();
    terms.push_back(t);
  };
  take(out.gcpr, out.losses.gcpr);
  take(out.fgd, out.losses.fgd);
  take(out.fgr, out.losses.fgr);
  take(out.mlm, out.losses.mlm);
  if (terms.empty()) throw std::invalid_argument("total_loss: every objective is disabled");
  out.total = add_all(terms);
  out.losses.total = out.total.item();
  const auto& l = out.losses;
  if (!std::isfinite(l.gcpr) || !std::isfinite(l.fgd) || !std::isfinite(l.fgr) || !std::isfinite(l.mlm) ||
      !std::isfinite(l.total)) {
    std::ostringstream os;
    os << "non-finite loss: gcpr=" << l.gcpr << " fgd=" << l.fgd << " fgr=" << l.fgr << " mlm=" << l.mlm
       << " total=" << l.total;
    throw NonFiniteLoss(os.str(), l);
  }
}

}  // namespace

StepOutput total_loss(const Model& student, const MomentumBank& bank, const StepInputs& in,
                      const LossOptions& options) {
  const auto& cfg = student.config();
  const auto& flags = options.flags;
  const auto batch = static_cast<Eigen::Index>(in.images.size());
  if (batch < 2 || static_cast<Eigen::Index>(in.texts.size()) != batch) {
    throw std::invalid_argument("total_loss: need at least two aligned image-text pairs");
  }
  const int k = options.shards;
  if (k < 1 || batch % k != 0) throw std::invalid_argument("total_loss: batch not divisible by shard count");
  const Eigen::Index n = batch / k;

  const bool cross = flags.cross_encoders && (flags.fgr || flags.mlm);
  const bool need_masked_text = flags.fgd || (cross && flags.mlm);
  if (need_masked_text && static_cast<Eigen::Index>(in.masked.size()) != batch) {
    throw std::invalid_argument("total_loss: masked texts missing");
  }
  const int patches = cfg.patches_per_side() * cfg.patches_per_side();
  if (flags.fgd && static_cast<Eigen::Index>(in.dropped_patches.size()) != batch * patches) {
    throw std::invalid_argument("total_loss: dropped-patch mask missing");
  }

  Eigen::Index pad = 0;
  for (const auto* t : in.texts) pad = std::max<Eigen::Index>(pad, static_cast<Eigen::Index>(t->size()));

  // per-device unimodal forwards
  std::vector<EncodedStream> img(k), txt(k), txt_masked(k), img_masked(k);
  for (int s = 0; s < k; ++s) {
    const auto lo = static_cast<size_t>(s * n), hi = static_cast<size_t>((s + 1) * n);
    std::span<const ImageInput* const> images(in.images.data() + lo, hi - lo);
    std::span<const TokenSequence* const> texts(in.texts.data() + lo, hi - lo);
    ImageBatch ib = ImageBatch::from(images);
    img[static_cast<size_t>(s)] = student.encode_image(ib);
    txt[static_cast<size_t>(s)] = student.encode_text(TextBatch::from(texts, pad));
    if (need_masked_text) {
      std::vector<const TokenSequence*> masked;
      for (size_t i = lo; i < hi; ++i) masked.push_back(&in.masked[i].tokens);
      txt_masked[static_cast<size_t>(s)] = student.encode_text(TextBatch::from(masked, pad));
    }
    if (flags.fgd) {
      std::span<const uint8_t> drop(in.dropped_patches.data() + lo * static_cast<size_t>(patches),
                                    (hi - lo) * static_cast<size_t>(patches));
      img_masked[static_cast<size_t>(s)] = student.encode_image(ib, drop);
    }
  }

  StepOutput out;
  {
    NoGradGuard no_grad;
    out.teacher_image = bank.teacher->encode_image(ImageBatch::from(in.images)).pooled.value();
    out.teacher_text = bank.teacher->encode_text(TextBatch::from(in.texts, pad)).pooled.value();
  }

  std::vector<Tensor> img_pooled, txt_pooled;
  for (int s = 0; s < k; ++s) {
    img_pooled.push_back(img[static_cast<size_t>(s)].pooled);
    txt_pooled.push_back(txt[static_cast<size_t>(s)].pooled);
  }
  out.student_similarity = ops::concat_rows(img_pooled).value() * ops::concat_rows(txt_pooled).value().transpose();

  if (flags.gcpr) {
    std::vector<Tensor> per_device;
    for (int s = 0; s < k; ++s) {
      const auto su = static_cast<size_t>(s);
      SimilarityMatrix i2t = similarity_scores(img_pooled[su], gathered_for(txt_pooled, su, options.gather),
                                               &bank.text_queue, student.tau());
      SimilarityMatrix t2i = similarity_scores(txt_pooled[su], gathered_for(img_pooled, su, options.gather),
                                               &bank.image_queue, student.tau());
      Matrix target_i2t = one_hot_targets(n, i2t.candidates(), s * n);
      Matrix target_t2i = one_hot_targets(n, t2i.candidates(), s * n);
      if (flags.tgd) {
        NoGradGuard no_grad;
        Tensor t_img(out.teacher_image.middleRows(s * n, n));
        Tensor t_txt(out.teacher_text.middleRows(s * n, n));
        Tensor all_img(out.teacher_image), all_txt(out.teacher_text);
        const Tensor& t_tau = bank.teacher->tau();
        target_i2t = tgd_pseudo_targets(similarity_scores(t_img, all_txt, &bank.text_queue, t_tau).scores,
                                        target_i2t, cfg.tgd_alpha);
        target_t2i = tgd_pseudo_targets(similarity_scores(t_txt, all_img, &bank.image_queue, t_tau).scores,
                                        target_t2i, cfg.tgd_alpha);
      }
      per_device.push_back(gcpr_loss(i2t, t2i, target_i2t, target_t2i));
    }
    out.gcpr = ops::scale(add_all(per_device), 1.0 / k);
  }

  if (cross) {
    std::vector<Stream> image_parts, text_parts, masked_parts;
    for (int s = 0; s < k; ++s) {
      image_parts.push_back(img[static_cast<size_t>(s)].stream);
      text_parts.push_back(txt[static_cast<size_t>(s)].stream);
      if (need_masked_text) masked_parts.push_back(txt_masked[static_cast<size_t>(s)].stream);
    }
    Stream image_stream = Stream::concat(image_parts);
    Stream text_stream = Stream::concat(text_parts);
    Stream masked_stream;
    if (need_masked_text) masked_stream = Stream::concat(masked_parts);

    PairSet pairs;
    if (flags.fgr) {
      out.negatives = mine_hard_negatives(out.student_similarity);
      pairs = fgr_pairs(out.negatives);
    } else {
      pairs.image = iota(0, batch);
      pairs.text = iota(0, batch);
      pairs.labels.assign(static_cast<size_t>(batch), 1);
      pairs.mlm_pairs = batch;
    }
    FusionTerms terms = fusion_terms(student, image_stream, text_stream, need_masked_text ? &masked_stream : nullptr,
                                     in.masked, pairs, flags.fgr, flags.mlm, flags.enhanced_training);
    out.fgr = terms.fgr;
    out.mlm = terms.mlm;
  }

  if (flags.fgd) {
    std::vector<Tensor> s_img, s_txt;
    for (int s = 0; s < k; ++s) {
      s_img.push_back(img_masked[static_cast<size_t>(s)].pooled);
      s_txt.push_back(txt_masked[static_cast<size_t>(s)].pooled);
    }
    Tensor a = fgd_loss(ops::concat_rows(s_img), out.teacher_image, bank.image_center.mu, cfg.tau_s, cfg.tau_t);
    Tensor b = fgd_loss(ops::concat_rows(s_txt), out.teacher_text, bank.text_center.mu, cfg.tau_s, cfg.tau_t);
    out.fgd = ops::scale(ops::add(a, b), 0.5);
  }

  finalize(out);
  return out;
}

StepOutput matching_loss(const Model& model, std::span<const ImageInput* const> images,
                         std::span<const TokenSequence* const> texts, std::span<const int32_t> labels) {
  if (images.empty() || images.size() != texts.size() || labels.size() != images.size()) {
    throw std::invalid_argument("matching_loss: need aligned, non-empty images, texts and labels");
  }
  const auto batch = static_cast<Eigen::Index>(images.size());
  EncodedStream img = model.encode_image(ImageBatch::from(images));
  EncodedStream txt = model.encode_text(TextBatch::from(texts));
  PairSet pairs;
  pairs.image = iota(0, batch);
  pairs.text = iota(0, batch);
  pairs.labels.assign(labels.begin(), labels.end());
  FusionTerms terms = fusion_terms(model, img.stream, txt.stream, nullptr, {}, pairs, true, false, false);
  StepOutput out;
  out.fgr = terms.fgr;
  finalize(out);
  return out;
}

}  // namespace r2d2
