#include <doctest.h>

#include "r2d2/evaluation.hpp"
#include "support/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace r2d2;
using namespace r2d2::testing;

namespace {

Matrix unit(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  m.rowwise().normalize();
  return m;
}

double brute_auc(const std::vector<double>& s, const std::vector<int32_t>& y) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < s.size(); ++i) {
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      den += 1.0;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / den;
}

std::vector<double> parameter_snapshot(const Model& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.value().data(),
                                                  p.tensor.value().data() + p.tensor.value().size());
  return out;
}

}  // namespace

TEST_CASE("dual_retrieve orders by cosine with ties to the lower index") {
  // candidates at cosine .2, .9, .5 to the query along e0
  Matrix c(3, 2);
  c << 0.2, std::sqrt(1 - 0.04), 0.9, std::sqrt(1 - 0.81), 0.5, std::sqrt(1 - 0.25);
  const auto r = dual_retrieve(unit({{1, 0}}), c);
  CHECK(r[0] == RankedList{1, 2, 0});

  const Matrix cands = unit({{0, 1, 0}, {1, 0, 0}, {0, 0, 1}});
  CHECK(dual_retrieve(unit({{1, 0, 0}}), cands)[0].front() == 1);
  CHECK(dual_retrieve(unit({{1, 0, 0, 0}}), unit({{0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}}))[0] ==
        RankedList{0, 1, 2});

  CHECK_THROWS_AS(dual_retrieve(unit({{1, 0}}), Matrix(0, 2)), std::invalid_argument);
  Matrix not_unit(1, 2);
  not_unit << 2.0, 0.0;
  CHECK_THROWS_AS(dual_retrieve(not_unit, cands.leftCols(2)), std::invalid_argument);
}

TEST_CASE("rerank averages the two encoder probabilities") {
  CHECK(rerank_by_scores({4, 7}, {0.9, 0.1}, {0.3, 0.7}) == RankedList{4, 7});
  CHECK(rerank_by_scores({4, 7}, {0.1, 0.9}, {0.3, 0.7}) == RankedList{7, 4});
  CHECK(rerank_by_scores({3, 1, 2}, {0.1, 0.5, 0.9}, {0.2, 0.6, 0.8}) == RankedList{2, 1, 3});
  CHECK(rerank_by_scores({5}, {0.0}, {0.0}) == RankedList{5});
  // equal means keep the dual-stream order
  CHECK(rerank_by_scores({2, 0}, {0.4, 0.6}, {0.6, 0.4}) == RankedList{2, 0});

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    RankedList ids{9, 3, 5, 11, 0, 2};
    std::vector<double> a(ids.size()), b(ids.size());
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    auto out = rerank_by_scores(ids, a, b);
    CHECK(std::multiset<int64_t>(out.begin(), out.end()) == std::multiset<int64_t>(ids.begin(), ids.end()));
  }
}

TEST_CASE("recall counts any gold in the top k") {
  // gold at ranks 1, 3, 7, 20 of a 25-candidate list
  std::vector<RankedList> ranked(4);
  std::vector<std::vector<int64_t>> gold{{100}, {100}, {100}, {100}};
  const int rank_of_gold[] = {1, 3, 7, 20};
  for (int q = 0; q < 4; ++q) {
    for (int i = 0; i < 25; ++i) ranked[q].push_back(i + 1 == rank_of_gold[q] ? 100 : i);
  }
  const auto r = recall_at_k(ranked, gold);
  CHECK(r[0] == doctest::Approx(25.0));
  CHECK(r[1] == doctest::Approx(50.0));
  CHECK(r[2] == doctest::Approx(75.0));

  std::vector<RankedList> perfect{{0, 1, 2}, {1, 0, 2}, {2, 1, 0}};
  for (double v : recall_at_k(perfect, {{0}, {1}, {2}})) CHECK(v == 100.0);

  // multi-gold: either id counts
  CHECK(recall_at_k({{4, 8, 9}}, {{9, 8}}, {1, 2})[1] == 100.0);
  CHECK(recall_at_k({{4, 8, 9}}, {{9, 8}}, {1, 2})[0] == 0.0);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<RankedList> lists(20);
    std::vector<std::vector<int64_t>> g(20);
    for (size_t q = 0; q < lists.size(); ++q) {
      lists[q].resize(30);
      std::iota(lists[q].begin(), lists[q].end(), 0);
      std::shuffle(lists[q].begin(), lists[q].end(), rng);
      g[q] = {static_cast<int64_t>(rng() % 30)};
    }
    const auto rk = recall_at_k(lists, g);
    CHECK(rk[0] <= rk[1]);
    CHECK(rk[1] <= rk[2]);
    CHECK(rk[0] >= 0.0);
    CHECK(rk[2] <= 100.0);
  }
}

TEST_CASE("mean recall of a six-value fixture") {
  const double rm = mean_recall({93.2, 99.2, 99.8, 79.2, 95.2, 97.3});
  CHECK(std::round(rm * 10.0) / 10.0 == doctest::Approx(94.0));
  CHECK(mean_recall({10, 20, 30}, {40, 50, 60}) == doctest::Approx(35.0));
  CHECK_THROWS_AS(mean_recall(std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST_CASE("auc is the pairwise concordance rate") {
  CHECK(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  CHECK(auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
  CHECK(auc({0.9, 0.4, 0.6, 0.1}, {1, 1, 0, 0}) == 0.75);
  CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(auc({0.1, 0.2}, {0, 0}), std::invalid_argument);

  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 2 + rng() % 99;
    std::vector<double> s(n);
    std::vector<int32_t> y(n);
    for (size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 10) / 10.0;  // coarse values force ties
      y[i] = static_cast<int32_t>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(auc(s, y) == brute_auc(s, y));
  }
}

TEST_CASE("zero-shot picks the most similar label") {
  const auto cfg = tiny_config();
  Model model(cfg, 21);
  const auto images = random_images(cfg, 1, 4);
  const auto labels = random_texts(cfg, 5, 8);
  CHECK(zero_shot_classify(model, images[0], {labels[2]}) == 0);

  const Matrix ie = embed_images(model, pointers(images));
  const Matrix te = embed_texts(model, pointers(labels));
  const RowVector sim = ie.row(0) * te.transpose();
  Eigen::Index best = 0;
  sim.maxCoeff(&best);
  CHECK(zero_shot_classify(model, images[0], labels) == best);
  // a repeated best label resolves to its first occurrence
  std::vector<TokenSequence> dup{labels[0], labels[static_cast<size_t>(best)], labels[static_cast<size_t>(best)]};
  if (best != 0) CHECK(zero_shot_classify(model, images[0], dup) == 1);
  CHECK_THROWS_AS(zero_shot_classify(model, images[0], {}), std::invalid_argument);
}

TEST_CASE("attention map shape, normalization and entity check") {
  auto cfg = tiny_config();
  cfg.cross_layers = 3;
  Model model(cfg, 2);
  const auto images = random_images(cfg, 1, 1);
  const auto text = TokenSequence::from_ids({kClsId, 5, 9, 5, 12});

  const auto map = attention_map(model, images[0], text, {5});
  CHECK(map.rows == cfg.patches_per_side());
  CHECK(map.cols == cfg.patches_per_side());
  CHECK(map.layer == 2);
  CHECK((map.values.array() >= 0.0).all());
  CHECK(map.values.sum() <= 1.0 + 1e-12);

  // every row over all image keys, [CLS] included, is a distribution
  {
    NoGradGuard guard;
    const auto img = model.encode_image(images[0]);
    const auto txt = model.encode_text(text);
    const auto fused = model.cross_encode_text_primary(txt.stream, img.stream, true);
    for (const auto& layer : fused.cross_attention) {
      for (const auto& p : layer->probs) {
        for (Eigen::Index r = 0; r < p.rows(); ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
    // the map is the head and entity-token mean of layer 2
    const auto& probs = *fused.cross_attention[2];
    double expect = 0.0;
    for (Eigen::Index h = 0; h < probs.heads; ++h) expect += probs.at(0, h)(1, 1) + probs.at(0, h)(3, 1);
    expect /= static_cast<double>(2 * probs.heads);
    CHECK(map.values(0, 0) == doctest::Approx(expect).epsilon(1e-12));
  }

  CHECK_THROWS_AS(attention_map(model, images[0], text, {30}), std::invalid_argument);

  auto shallow = tiny_config();
  Model two(shallow, 2);
  CHECK(attention_map(two, images[0], text, {9}).layer == 1);
}

TEST_CASE("evaluation leaves the model untouched and reranks within the top K") {
  const auto cfg = tiny_config();
  Model model(cfg, 17);
  const auto images = random_images(cfg, 10, 2);
  const auto texts = random_texts(cfg, 10, 3);
  const auto before = parameter_snapshot(model);

  const auto dual = evaluate_retrieval(model, pointers(images), pointers(texts), false);
  const auto rr = evaluate_retrieval(model, pointers(images), pointers(texts), true, RerankConfig{4});
  const auto k1 = evaluate_retrieval(model, pointers(images), pointers(texts), true, RerankConfig{1});
  const auto clipped = evaluate_retrieval(model, pointers(images), pointers(texts), true, RerankConfig{50});
  attention_map(model, images[0], texts[0], {texts[0].ids[1]});
  zero_shot_classify(model, images[0], texts);

  CHECK(parameter_snapshot(model) == before);
  for (size_t q = 0; q < images.size(); ++q) {
    const std::set<int64_t> top(dual.image_to_text[q].begin(), dual.image_to_text[q].begin() + 4);
    const std::set<int64_t> got(rr.image_to_text[q].begin(), rr.image_to_text[q].begin() + 4);
    CHECK(top == got);
    CHECK(std::equal(dual.image_to_text[q].begin() + 4, dual.image_to_text[q].end(), rr.image_to_text[q].begin() + 4));
    CHECK(k1.image_to_text[q] == dual.image_to_text[q]);
    CHECK(k1.text_to_image[q] == dual.text_to_image[q]);
    CHECK(clipped.image_to_text[q].size() == images.size());
  }
  CHECK(dual.mean_recall == doctest::Approx(mean_recall(dual.i2t, dual.t2i)));
}

TEST_CASE("match scores agree with a direct cross-encoder pass") {
  const auto cfg = tiny_config();
  Model model(cfg, 5);
  const auto images = random_images(cfg, 3, 6);
  const auto texts = random_texts(cfg, 3, 7);
  const auto s = match_scores(model, pointers(images), pointers(texts), {{2, 0}, {1, 1}});
  REQUIRE(s.image_primary.size() == 2);
  NoGradGuard guard;
  const auto img = model.encode_image(images[2]);
  const auto txt = model.encode_text(texts[0]);
  const Matrix p = ops::softmax_rows(model.matching_head(model.cross_encode_text_primary(txt.stream, img.stream).cls)).value();
  CHECK(s.text_primary[0] == doctest::Approx(p(0, 1)).epsilon(1e-10));
  CHECK(s.mean()[1] == doctest::Approx(0.5 * (s.image_primary[1] + s.text_primary[1])));
}
