#include "r2d2/experiments.hpp"

#include "r2d2/training.hpp"

#include <chrono>

#include <json.hpp>

namespace r2d2 {

Corpus::Corpus(std::vector<RawRecord> recs) : records(std::move(recs)) {
  train = select_split(records, Split::train);
  val = select_split(records, Split::val);
  test = select_split(records, Split::test);
}

std::vector<const RawRecord*> Corpus::matched_test() const {
  std::vector<const RawRecord*> out;
  for (const auto* r : test) {
    if (r->is_match) out.push_back(r);
  }
  return out;
}

Corpus synthetic_corpus(int count, double noise_rate, uint64_t seed, int resolution) {
  GeneratorOptions opt;
  opt.resolution = resolution;
  auto records = generate_pairs(count, noise_rate, seed, opt);
  assign_splits(records, seed);
  return Corpus(std::move(records));
}

AblationOutcome run_ablation_row(const RunConfig& base, const AblationRow& row, const Corpus& data, TextField field,
                                 const RerankConfig& rerank) {
  RunConfig cfg = base;
  cfg.train.ablation = row.flags;
  const auto start = std::chrono::steady_clock::now();
  auto state = TrainingState::fresh(cfg);
  pretrain(*state, data.train);

  AblationOutcome out;
  out.name = row.name;
  out.seed = cfg.train.seed;
  const auto test = data.matched_test();
  const auto images = eval_images(test);
  const auto texts = eval_texts(test, field);
  out.dual = evaluate_retrieval(*state->model, images, texts, false, rerank);
  if (row.flags.cross_encoders) out.rerank = evaluate_retrieval(*state->model, images, texts, true, rerank);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

std::string ablation_record(const AblationOutcome& o) {
  nlohmann::ordered_json j;
  j["row"] = o.name;
  j["seed"] = o.seed;
  j["dual"] = nlohmann::json::parse(retrieval_record(o.dual, "dual"));
  if (o.rerank) j["rerank"] = nlohmann::json::parse(retrieval_record(*o.rerank, "rerank"));
  j["seconds"] = o.seconds;
  return j.dump();
}

}  // namespace r2d2
