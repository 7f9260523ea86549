#pragma once

#include "r2d2/data.hpp"
#include "r2d2/model.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace r2d2 {

struct RerankConfig {
  int k = 8;
};

using RankedList = std::vector<int64_t>;

/// Cosine ranking of every candidate for every query (rows of both inputs
/// must be unit norm). Descending score, ties to the lower index.
std::vector<RankedList> dual_retrieve(const Matrix& queries, const Matrix& candidates);

/// Orders `candidates` by the mean of the two cross-encoder match
/// probabilities. Equal means keep their input order.
RankedList rerank_by_scores(const RankedList& candidates, const std::vector<double>& image_primary,
                            const std::vector<double>& text_primary);

/// Pooled dual-stream features of a whole set, [n, d].
Matrix embed_images(const Model& model, const std::vector<const ImageInput*>& images, int batch_size = 64);
Matrix embed_texts(const Model& model, const std::vector<const TokenSequence*>& texts, int batch_size = 64);

/// Match probability (softmax column 1) from each cross encoder for the
/// pairs (images[i], texts[j]) in `pairs`.
struct PairScores {
  std::vector<double> image_primary;
  std::vector<double> text_primary;
  std::vector<double> mean() const;
};
PairScores match_scores(const Model& model, const std::vector<const ImageInput*>& images,
                        const std::vector<const TokenSequence*>& texts,
                        const std::vector<std::pair<size_t, size_t>>& pairs);

struct DirectionRecall {
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
};

struct RetrievalResult {
  std::vector<RankedList> image_to_text;
  std::vector<RankedList> text_to_image;
  DirectionRecall i2t, t2i;
  double mean_recall = 0.0;
};

/// Percent of queries with any gold id in the top k, for each k.
std::vector<double> recall_at_k(const std::vector<RankedList>& ranked, const std::vector<std::vector<int64_t>>& gold,
                                const std::vector<int>& ks = {1, 5, 10});
/// Mean of the six directional recalls.
double mean_recall(const DirectionRecall& i2t, const DirectionRecall& t2i);
double mean_recall(const std::vector<double>& six);

/// Image-text retrieval over paired lists. Texts with identical tokens are
/// interchangeable golds. With `rerank`, the top-K of each dual-stream list
/// is reordered by the cross encoders and the tail is kept as is.
RetrievalResult evaluate_retrieval(const Model& model, const std::vector<const ImageInput*>& images,
                                   const std::vector<const TokenSequence*>& texts, bool rerank,
                                   const RerankConfig& cfg = {});

/// Rank-based AUC; tied positive/negative pairs count ½.
double auc(const std::vector<double>& scores, const std::vector<int32_t>& labels);

/// argmax of image-label cosine similarity, ties to the lower index.
int zero_shot_classify(const Model& model, const ImageInput& image, const std::vector<TokenSequence>& label_texts);

struct AttentionMap {
  int rows = 0, cols = 0;
  int layer = 0;
  Matrix values;  // [rows, cols], averaged over heads and entity tokens
  std::pair<int, int> argmax() const;
};

/// Cross-attention from the entity token positions of `text` to the image
/// patches in the text-primary cross encoder. Throws std::invalid_argument
/// when no entity token occurs in `text`.
AttentionMap attention_map(const Model& model, const ImageInput& image, const TokenSequence& text,
                           const std::vector<int32_t>& entity_tokens);

/// Binary PGM, values rescaled to 0..255 and each patch drawn `scale` pixels wide.
void write_heatmap_pgm(const AttentionMap& map, const std::string& path, int scale = 16);

/// Fixed text field per record for evaluation sets.
std::vector<const TokenSequence*> eval_texts(const std::vector<const RawRecord*>& records,
                                             TextField field = TextField::content);
std::vector<const ImageInput*> eval_images(const std::vector<const RawRecord*>& records);

/// Match probability averaged over both cross encoders, one per pair.
std::vector<double> pair_match_scores(const Model& model, const std::vector<const ImageInput*>& images,
                                      const std::vector<const TokenSequence*>& texts);

struct MatchingResult {
  double auc = 0.0;
  std::vector<double> scores;
  std::vector<int32_t> labels;
};
/// AUC of the averaged match probability against RawRecord::is_match.
MatchingResult evaluate_matching(const Model& model, const std::vector<const RawRecord*>& records,
                                 TextField field = TextField::content);

/// Each image against its own caption and `ways − 1` captions of other
/// records (distinct token sequences), in a seeded random order. Percent correct.
double zero_shot_accuracy(const Model& model, const std::vector<const RawRecord*>& records, int ways, uint64_t seed,
                          TextField field = TextField::title);

/// Percent of single-object records whose attention-map argmax lies in the
/// object's quadrant; the entity tokens are the object's color and shape.
double attention_localization(const Model& model, const std::vector<const RawRecord*>& records,
                              TextField field = TextField::content);

std::string retrieval_record(const RetrievalResult& r, const std::string& label);
void print_retrieval_table(std::ostream& out, const std::vector<std::pair<std::string, RetrievalResult>>& rows);

}  // namespace r2d2
