#include "r2d2/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace r2d2 {

namespace {

RankedList argsort_desc(const Eigen::Ref<const RowVector>& scores) {
  RankedList order(static_cast<size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return scores(a) > scores(b); });
  return order;
}

void require_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).norm() - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string("dual_retrieve: ") + what + " rows must be unit norm");
    }
  }
}

}  // namespace

std::vector<RankedList> dual_retrieve(const Matrix& queries, const Matrix& candidates) {
  if (candidates.rows() == 0) throw std::invalid_argument("dual_retrieve: no candidates");
  if (queries.cols() != candidates.cols()) throw std::invalid_argument("dual_retrieve: dimension mismatch");
  require_unit_rows(queries, "query");
  require_unit_rows(candidates, "candidate");
  const Matrix sim = queries * candidates.transpose();
  std::vector<RankedList> out;
  out.reserve(static_cast<size_t>(queries.rows()));
  for (Eigen::Index q = 0; q < sim.rows(); ++q) out.push_back(argsort_desc(sim.row(q)));
  return out;
}

RankedList rerank_by_scores(const RankedList& candidates, const std::vector<double>& image_primary,
                            const std::vector<double>& text_primary) {
  if (image_primary.size() != candidates.size() || text_primary.size() != candidates.size()) {
    throw std::invalid_argument("rerank: one score per candidate expected");
  }
  std::vector<size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return 0.5 * (image_primary[a] + text_primary[a]) > 0.5 * (image_primary[b] + text_primary[b]);
  });
  RankedList out;
  out.reserve(order.size());
  for (size_t i : order) out.push_back(candidates[i]);
  return out;
}

Matrix embed_images(const Model& model, const std::vector<const ImageInput*>& images, int batch_size) {
  NoGradGuard guard;
  Matrix out(static_cast<Eigen::Index>(images.size()), model.config().hidden_dim);
  for (size_t start = 0; start < images.size(); start += static_cast<size_t>(batch_size)) {
    const size_t n = std::min(images.size() - start, static_cast<size_t>(batch_size));
    const auto enc = model.encode_image(ImageBatch::from(std::span(images).subspan(start, n)));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = enc.pooled.value();
  }
  return out;
}

Matrix embed_texts(const Model& model, const std::vector<const TokenSequence*>& texts, int batch_size) {
  NoGradGuard guard;
  Matrix out(static_cast<Eigen::Index>(texts.size()), model.config().hidden_dim);
  for (size_t start = 0; start < texts.size(); start += static_cast<size_t>(batch_size)) {
    const size_t n = std::min(texts.size() - start, static_cast<size_t>(batch_size));
    const auto enc = model.encode_text(TextBatch::from(std::span(texts).subspan(start, n)));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = enc.pooled.value();
  }
  return out;
}

std::vector<double> PairScores::mean() const {
  std::vector<double> out(image_primary.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * (image_primary[i] + text_primary[i]);
  return out;
}

PairScores match_scores(const Model& model, const std::vector<const ImageInput*>& images,
                        const std::vector<const TokenSequence*>& texts,
                        const std::vector<std::pair<size_t, size_t>>& pairs) {
  NoGradGuard guard;
  PairScores out;
  if (pairs.empty()) return out;
  const auto img = model.encode_image(ImageBatch::from(std::span(images)));
  const auto txt = model.encode_text(TextBatch::from(std::span(texts)));
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < pairs.size(); start += kChunk) {
    const size_t n = std::min(pairs.size() - start, kChunk);
    std::vector<Eigen::Index> ii, tt;
    for (size_t p = start; p < start + n; ++p) {
      if (pairs[p].first >= images.size() || pairs[p].second >= texts.size()) {
        throw std::out_of_range("match_scores: pair index");
      }
      ii.push_back(static_cast<Eigen::Index>(pairs[p].first));
      tt.push_back(static_cast<Eigen::Index>(pairs[p].second));
    }
    const Stream is = img.stream.select(ii);
    const Stream ts = txt.stream.select(tt);
    const Matrix pi = ops::softmax_rows(model.matching_head(model.cross_encode_image_primary(is, ts).cls)).value();
    const Matrix pt = ops::softmax_rows(model.matching_head(model.cross_encode_text_primary(ts, is).cls)).value();
    for (Eigen::Index r = 0; r < pi.rows(); ++r) {
      out.image_primary.push_back(pi(r, 1));
      out.text_primary.push_back(pt(r, 1));
    }
  }
  return out;
}

std::vector<double> recall_at_k(const std::vector<RankedList>& ranked, const std::vector<std::vector<int64_t>>& gold,
                                const std::vector<int>& ks) {
  if (ranked.size() != gold.size()) throw std::invalid_argument("recall_at_k: one gold set per query");
  std::vector<double> out;
  for (int k : ks) {
    size_t hits = 0;
    for (size_t q = 0; q < ranked.size(); ++q) {
      const size_t top = std::min(ranked[q].size(), static_cast<size_t>(std::max(k, 0)));
      const bool hit = std::any_of(ranked[q].begin(), ranked[q].begin() + static_cast<std::ptrdiff_t>(top),
                                   [&](int64_t id) {
                                     return std::find(gold[q].begin(), gold[q].end(), id) != gold[q].end();
                                   });
      hits += hit ? 1 : 0;
    }
    out.push_back(ranked.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(ranked.size()));
  }
  return out;
}

double mean_recall(const std::vector<double>& six) {
  if (six.size() != 6) throw std::invalid_argument("mean_recall: six recalls expected");
  return std::accumulate(six.begin(), six.end(), 0.0) / 6.0;
}

double mean_recall(const DirectionRecall& i2t, const DirectionRecall& t2i) {
  return mean_recall({i2t.r1, i2t.r5, i2t.r10, t2i.r1, t2i.r5, t2i.r10});
}

RetrievalResult evaluate_retrieval(const Model& model, const std::vector<const ImageInput*>& images,
                                   const std::vector<const TokenSequence*>& texts, bool rerank,
                                   const RerankConfig& cfg) {
  if (images.size() != texts.size() || images.empty()) {
    throw std::invalid_argument("evaluate_retrieval: paired, non-empty inputs required");
  }
  if (cfg.k < 1) throw std::invalid_argument("evaluate_retrieval: K must be at least 1");
  const size_t n = images.size();
  const Matrix ie = embed_images(model, images);
  const Matrix te = embed_texts(model, texts);

  RetrievalResult r;
  r.image_to_text = dual_retrieve(ie, te);
  r.text_to_image = dual_retrieve(te, ie);

  // identical token sequences are the same caption
  std::map<std::vector<int32_t>, std::vector<int64_t>> by_text;
  for (size_t j = 0; j < n; ++j) by_text[texts[j]->ids].push_back(static_cast<int64_t>(j));
  std::vector<std::vector<int64_t>> gold(n);
  for (size_t i = 0; i < n; ++i) gold[i] = by_text[texts[i]->ids];

  if (rerank) {
    size_t k = static_cast<size_t>(cfg.k);
    if (k > n) {
      std::cerr << "warning: rerank K=" << cfg.k << " exceeds " << n << " candidates, clipped\n";
      k = n;
    }
    std::vector<std::pair<size_t, size_t>> pairs;
    for (size_t q = 0; q < n; ++q) {
      for (size_t c = 0; c < k; ++c) pairs.emplace_back(q, static_cast<size_t>(r.image_to_text[q][c]));
    }
    for (size_t q = 0; q < n; ++q) {
      for (size_t c = 0; c < k; ++c) pairs.emplace_back(static_cast<size_t>(r.text_to_image[q][c]), q);
    }
    const PairScores s = match_scores(model, images, texts, pairs);
    auto apply = [&](std::vector<RankedList>& lists, size_t offset) {
      for (size_t q = 0; q < n; ++q) {
        RankedList head(lists[q].begin(), lists[q].begin() + static_cast<std::ptrdiff_t>(k));
        const auto b = s.image_primary.begin() + static_cast<std::ptrdiff_t>(offset + q * k);
        const auto t = s.text_primary.begin() + static_cast<std::ptrdiff_t>(offset + q * k);
        head = rerank_by_scores(head, std::vector<double>(b, b + static_cast<std::ptrdiff_t>(k)),
                                std::vector<double>(t, t + static_cast<std::ptrdiff_t>(k)));
        std::copy(head.begin(), head.end(), lists[q].begin());
      }
    };
    apply(r.image_to_text, 0);
    apply(r.text_to_image, n * k);
  }

  // pairing is by index, so the gold images of text j are gold[j] as well
  const auto i2t = recall_at_k(r.image_to_text, gold);
  const auto t2i = recall_at_k(r.text_to_image, gold);
  r.i2t = {i2t[0], i2t[1], i2t[2]};
  r.t2i = {t2i[0], t2i[1], t2i[2]};
  r.mean_recall = mean_recall(r.i2t, r.t2i);
  return r;
}

double auc(const std::vector<double>& scores, const std::vector<int32_t>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // average ranks over tie groups
  double pos_rank_sum = 0.0;
  size_t pos = 0, neg = 0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1) {
        pos_rank_sum += avg_rank;
        ++pos;
      } else if (labels[order[t]] == 0) {
        ++neg;
      } else {
        throw std::invalid_argument("auc: labels must be 0 or 1");
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc: both classes are required");
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

int zero_shot_classify(const Model& model, const ImageInput& image, const std::vector<TokenSequence>& label_texts) {
  if (label_texts.empty()) throw std::invalid_argument("zero_shot_classify: no labels");
  std::vector<const TokenSequence*> ptrs;
  for (const auto& t : label_texts) ptrs.push_back(&t);
  // one label per pass: identical labels then get identical embeddings,
  // which a shared GEMM does not guarantee across row positions
  const Matrix te = embed_texts(model, ptrs, 1);
  const Matrix ie = embed_images(model, {&image});
  const RowVector sim = ie.row(0) * te.transpose();
  int best = 0;
  for (Eigen::Index j = 1; j < sim.size(); ++j) {
    if (sim(j) > sim(best)) best = static_cast<int>(j);
  }
  return best;
}

std::pair<int, int> AttentionMap::argmax() const {
  Eigen::Index r = 0, c = 0;
  values.maxCoeff(&r, &c);
  return {static_cast<int>(r), static_cast<int>(c)};
}

AttentionMap attention_map(const Model& model, const ImageInput& image, const TokenSequence& text,
                           const std::vector<int32_t>& entity_tokens) {
  std::vector<Eigen::Index> positions;
  for (size_t i = 0; i < text.ids.size(); ++i) {
    if (text.attention_mask[i] &&
        std::find(entity_tokens.begin(), entity_tokens.end(), text.ids[i]) != entity_tokens.end()) {
      positions.push_back(static_cast<Eigen::Index>(i));
    }
  }
  if (positions.empty()) throw std::invalid_argument("attention_map: entity tokens not found in text");

  NoGradGuard guard;
  const auto& cfg = model.config();
  const auto img = model.encode_image(image);
  const auto txt = model.encode_text(text);
  const FusionOutput fused = model.cross_encode_text_primary(txt.stream, img.stream, true);
  const int depth = static_cast<int>(fused.cross_attention.size());
  int layer = cfg.attention_map_layer;
  if (layer < 0) layer = depth >= 3 ? 2 : depth - 1;
  if (layer >= depth) throw std::invalid_argument("attention_map: layer index out of range");
  const auto& probs = *fused.cross_attention[static_cast<size_t>(layer)];

  const int side = cfg.patches_per_side();
  AttentionMap map;
  map.rows = side;
  map.cols = side;
  map.layer = layer;
  map.values = Matrix::Zero(side, side);
  for (Eigen::Index h = 0; h < probs.heads; ++h) {
    const Matrix& p = probs.at(0, h);
    for (auto pos : positions) {
      // key 0 is the image [CLS]; patches follow in raster order
      for (int k = 0; k < side * side; ++k) map.values(k / side, k % side) += p(pos, k + 1);
    }
  }
  map.values /= static_cast<double>(probs.heads * static_cast<Eigen::Index>(positions.size()));
  return map;
}

void write_heatmap_pgm(const AttentionMap& map, const std::string& path, int scale) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const double lo = map.values.minCoeff(), hi = map.values.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  const int w = map.cols * scale, h = map.rows * scale;
  out << "P5\n" << w << " " << h << "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = (map.values(y / scale, x / scale) - lo) / span;
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
  }
}

std::vector<double> pair_match_scores(const Model& model, const std::vector<const ImageInput*>& images,
                                      const std::vector<const TokenSequence*>& texts) {
  if (images.size() != texts.size()) throw std::invalid_argument("pair_match_scores: paired inputs required");
  std::vector<std::pair<size_t, size_t>> pairs;
  for (size_t i = 0; i < images.size(); ++i) pairs.emplace_back(i, i);
  return match_scores(model, images, texts, pairs).mean();
}

MatchingResult evaluate_matching(const Model& model, const std::vector<const RawRecord*>& records, TextField field) {
  MatchingResult r;
  r.scores = pair_match_scores(model, eval_images(records), eval_texts(records, field));
  for (const auto* rec : records) r.labels.push_back(rec->is_match ? 1 : 0);
  r.auc = auc(r.scores, r.labels);
  return r;
}

double zero_shot_accuracy(const Model& model, const std::vector<const RawRecord*>& records, int ways, uint64_t seed,
                          TextField field) {
  if (ways < 1) throw std::invalid_argument("zero_shot_accuracy: ways must be positive");
  std::mt19937_64 rng(seed);
  size_t correct = 0, total = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    std::vector<TokenSequence> labels{records[i]->field(field)};
    std::vector<size_t> others(records.size());
    std::iota(others.begin(), others.end(), size_t{0});
    std::shuffle(others.begin(), others.end(), rng);
    for (size_t j : others) {
      if (static_cast<int>(labels.size()) == ways) break;
      const auto& t = records[j]->field(field);
      const bool dup = std::any_of(labels.begin(), labels.end(), [&](const TokenSequence& l) { return l.ids == t.ids; });
      if (!dup) labels.push_back(t);
    }
    std::vector<size_t> perm(labels.size());
    std::iota(perm.begin(), perm.end(), size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<TokenSequence> shuffled;
    size_t gold = 0;
    for (size_t k = 0; k < perm.size(); ++k) {
      shuffled.push_back(labels[perm[k]]);
      if (perm[k] == 0) gold = k;
    }
    correct += static_cast<size_t>(zero_shot_classify(model, records[i]->image, shuffled)) == gold ? 1 : 0;
    ++total;
  }
  return total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

double attention_localization(const Model& model, const std::vector<const RawRecord*>& records, TextField field) {
  size_t hits = 0, total = 0;
  for (const auto* r : records) {
    if (r->latent.object_count() != 1 || !r->is_match) continue;
    int quadrant = 0;
    for (int q = 0; q < kNumQuadrants; ++q) {
      if (r->latent.cells[static_cast<size_t>(q)]) quadrant = q;
    }
    const Object obj = *r->latent.cells[static_cast<size_t>(quadrant)];
    const auto map = attention_map(model, r->image, r->field(field), {vocab::color_id(obj.color), vocab::shape_id(obj.shape)});
    const auto [row, col] = map.argmax();
    const int found = (row >= map.rows / 2 ? 2 : 0) + (col >= map.cols / 2 ? 1 : 0);
    hits += found == quadrant ? 1 : 0;
    ++total;
  }
  if (total == 0) throw std::invalid_argument("attention_localization: no single-object records");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

std::vector<const TokenSequence*> eval_texts(const std::vector<const RawRecord*>& records, TextField field) {
  std::vector<const TokenSequence*> out;
  for (const auto* r : records) out.push_back(&r->field(field));
  return out;
}

std::vector<const ImageInput*> eval_images(const std::vector<const RawRecord*>& records) {
  std::vector<const ImageInput*> out;
  for (const auto* r : records) out.push_back(&r->image);
  return out;
}

std::string retrieval_record(const RetrievalResult& r, const std::string& label) {
  nlohmann::ordered_json j;
  j["label"] = label;
  j["i2t"] = {{"r1", r.i2t.r1}, {"r5", r.i2t.r5}, {"r10", r.i2t.r10}};
  j["t2i"] = {{"r1", r.t2i.r1}, {"r5", r.t2i.r5}, {"r10", r.t2i.r10}};
  j["rm"] = r.mean_recall;
  return j.dump();
}

void print_retrieval_table(std::ostream& out, const std::vector<std::pair<std::string, RetrievalResult>>& rows) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-22s %7s %7s %7s %7s %7s %7s %7s\n", "", "i2t@1", "i2t@5", "i2t@10", "t2i@1",
                "t2i@5", "t2i@10", "R@M");
  out << buf;
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-22s %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f\n", name.c_str(), r.i2t.r1,
                  r.i2t.r5, r.i2t.r10, r.t2i.r1, r.t2i.r5, r.t2i.r10, r.mean_recall);
    out << buf;
  }
}

}  // namespace r2d2
