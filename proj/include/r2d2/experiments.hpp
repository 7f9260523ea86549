#pragma once

#include "r2d2/config.hpp"
#include "r2d2/data.hpp"
#include "r2d2/evaluation.hpp"

#include <optional>
#include <string>
#include <vector>

namespace r2d2 {

/// Records plus split views into them. Move-only: the views point into
/// `records`.
struct Corpus {
  std::vector<RawRecord> records;
  std::vector<const RawRecord*> train, val, test;

  Corpus() = default;
  explicit Corpus(std::vector<RawRecord> recs);
  Corpus(Corpus&&) noexcept = default;
  Corpus& operator=(Corpus&&) noexcept = default;
  Corpus(const Corpus&) = delete;
  Corpus& operator=(const Corpus&) = delete;

  /// Test records whose texts describe their image.
  std::vector<const RawRecord*> matched_test() const;
};

/// generate_pairs followed by an 8:1:1 split, both under `seed`.
Corpus synthetic_corpus(int count, double noise_rate, uint64_t seed, int resolution = 32);

struct AblationOutcome {
  std::string name;
  uint64_t seed = 0;
  RetrievalResult dual;
  std::optional<RetrievalResult> rerank;  // absent without cross encoders
  double seconds = 0.0;
};

/// Pre-trains from scratch with `row.flags` and the seed of `base`, then
/// scores retrieval on the matched test records of `data`.
AblationOutcome run_ablation_row(const RunConfig& base, const AblationRow& row, const Corpus& data,
                                 TextField field = TextField::content, const RerankConfig& rerank = {});

std::string ablation_record(const AblationOutcome& o);

}  // namespace r2d2
