#pragma once

#include "r2d2/config.hpp"
#include "r2d2/model.hpp"
#include "r2d2/momentum.hpp"

#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace r2d2 {

/// Cosine similarities of local rows against n×k gathered candidates plus
/// M' queued ones, and the row-softmax scores built from them.
struct SimilarityMatrix {
  Tensor logits;  // sim/τ, with log w added on queue columns
  Matrix raw;     // cosine similarities [n, C]
  Matrix scores;  // softmax of logits [n, C]
  Eigen::Index batch_candidates = 0;
  Eigen::Index queue_candidates = 0;
  double tau = 0.0;

  Eigen::Index candidates() const { return batch_candidates + queue_candidates; }
};

/// Queue reliability weights multiply the exponentiated similarities of
/// queue candidates; gathered candidates carry weight 1. Queue features
/// receive no gradient.
SimilarityMatrix similarity_scores(const Tensor& local, const Tensor& gathered, const FeatureQueue* queue,
                                   const Tensor& tau);

/// One-hot targets: row i is hot at column offset + i.
Matrix one_hot_targets(Eigen::Index rows, Eigen::Index cols, Eigen::Index offset);

/// ½(L_w(i2t) + L_w(t2i)), each a mean over rows of −Σ target · log score.
Tensor gcpr_loss(const SimilarityMatrix& i2t, const SimilarityMatrix& t2i, const Matrix& targets_i2t,
                 const Matrix& targets_t2i);

/// alpha·teacher + (1−alpha)·one_hot.
Matrix tgd_pseudo_targets(const Matrix& teacher_scores, const Matrix& one_hot, double alpha);

struct HardNegatives {
  std::vector<Eigen::Index> text_for_image;  // per image anchor
  std::vector<Eigen::Index> image_for_text;  // per text anchor
};

/// scores(i, j) = similarity of image i to text j. For every anchor picks
/// the highest-scoring non-diagonal partner; ties go to the lowest index.
HardNegatives mine_hard_negatives(const Matrix& scores);

/// ½(CE(g(h_I), y) + CE(g(h_T), y)) averaged over pairs; label 1 = matched.
Tensor fgr_loss(const Tensor& image_primary_logits, const Tensor& text_primary_logits,
                std::span<const int32_t> labels);

/// Cross-entropy of softmax(student/τ_s) against the constant target
/// softmax((teacher − μ)/τ_t) over the feature dimensions, mean over rows.
Tensor fgd_loss(const Tensor& student, const Matrix& teacher, const RowVector& mu, double tau_s, double tau_t);
Matrix fgd_teacher_distribution(const Matrix& teacher, const RowVector& mu, double tau_t);

/// Masked copy of a text plus the positions and original ids it hides.
struct MaskedText {
  TokenSequence tokens;
  std::vector<int32_t> positions;
  std::vector<int32_t> labels;
};

/// Replaces round(ratio·words) (at least one) word tokens with [MASK].
MaskedText mask_tokens(const TokenSequence& text, double ratio, std::mt19937_64& rng);
int masked_token_count(int words, double ratio);

/// Marks round(ratio·patches) patches per image for dropping.
std::vector<uint8_t> sample_patch_drop(Eigen::Index batch, int patches, double ratio, std::mt19937_64& rng);

/// Cross-encoder pairs: image and text sequence indices and match labels.
struct PairSet {
  std::vector<Eigen::Index> image;
  std::vector<Eigen::Index> text;
  std::vector<int32_t> labels;
  /// The first `mlm_pairs` pairs are positives whose masked text feeds MLM.
  Eigen::Index mlm_pairs = 0;

  size_t size() const { return labels.size(); }
};

/// Positives first, then (image i, hardest text), then (hardest image, text j).
PairSet fgr_pairs(const HardNegatives& negatives);

struct FusionTerms {
  Tensor fgr;  // undefined when disabled
  Tensor mlm;  // undefined when disabled
  Tensor image_primary_logits;
  Tensor text_primary_logits;
};

/// Runs the cross encoders over `pairs`. With enhanced training the
/// text-primary encoder sees the masked text once and serves both FGR and
/// MLM; without it FGR uses `text` and MLM gets its own masked pass.
FusionTerms fusion_terms(const Model& model, const Stream& image, const Stream& text, const Stream* masked_text,
                         std::span<const MaskedText> masks, const PairSet& pairs, bool use_fgr, bool use_mlm,
                         bool enhanced_training);

struct LossBundle {
  double gcpr = 0.0;
  double fgr = 0.0;
  double fgd = 0.0;
  double mlm = 0.0;
  double total = 0.0;
};

/// One step's worth of inputs. Masks are drawn by the caller so that the
/// step is a pure function of (model, bank, inputs).
struct StepInputs {
  std::vector<const ImageInput*> images;
  std::vector<const TokenSequence*> texts;
  std::vector<MaskedText> masked;        // one per pair
  std::vector<uint8_t> dropped_patches;  // [batch*patches]
};

StepInputs make_step_inputs(std::vector<const ImageInput*> images, std::vector<const TokenSequence*> texts,
                            const ModelConfig& cfg, std::mt19937_64& rng);

/// local_only reproduces per-device back-propagation: candidates gathered
/// from other shards are treated as constants.
enum class GatherMode { global, local_only };

struct LossOptions {
  AblationFlags flags;
  int shards = 1;
  GatherMode gather = GatherMode::global;
};

struct StepOutput {
  LossBundle losses;
  Tensor total;
  Tensor gcpr, fgr, fgd, mlm;  // undefined when disabled
  Matrix teacher_image;        // [batch, d] teacher pooled features
  Matrix teacher_text;
  Matrix student_similarity;   // [batch, batch] image-to-text cosine
  HardNegatives negatives;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, LossBundle bundle) : std::runtime_error(what), bundle_(bundle) {}
  const LossBundle& bundle() const { return bundle_; }

 private:
  LossBundle bundle_;
};

/// L = L_GCPR^TgD + L_FgD + L_FGR + L_MLM over a batch sharded across
/// `shards` simulated devices. Throws NonFiniteLoss on NaN/inf.
StepOutput total_loss(const Model& student, const MomentumBank& bank, const StepInputs& inputs,
                      const LossOptions& options);

/// FGR only, on given pairs with given labels (no mining).
StepOutput matching_loss(const Model& model, std::span<const ImageInput* const> images,
                         std::span<const TokenSequence* const> texts, std::span<const int32_t> labels);

}  // namespace r2d2
