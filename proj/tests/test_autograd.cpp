#include <doctest.h>

#include "r2d2/autograd.hpp"
#include "support/gradcheck.hpp"

#include <random>

using namespace r2d2;
using r2d2::testing::check_gradients;
using r2d2::testing::worst_error;

namespace {

Tensor leaf(Eigen::Index r, Eigen::Index c, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return Tensor(m, true);
}

// Random fixed projection so that every output entry matters.
Tensor probe(const Tensor& y, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix w(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  return ops::sum(ops::mul(y, Tensor(w)));
}

std::vector<NamedParameter> named(std::initializer_list<Tensor> ts) {
  std::vector<NamedParameter> out;
  int i = 0;
  for (const auto& t : ts) out.push_back({"p" + std::to_string(i++), t, false});
  return out;
}

}  // namespace

TEST_CASE("elementwise and matmul gradients") {
  Tensor a = leaf(3, 4, 1), b = leaf(4, 5, 2), c = leaf(3, 4, 3), bias = leaf(1, 5, 4);
  auto f = [&] {
    Tensor x = ops::add(ops::mul(a, c), ops::scale(ops::sub(a, c), 0.3));
    return probe(ops::linear(x, b, bias), 9);
  };
  CHECK(worst_error(check_gradients(f, named({a, b, c, bias}))) < 1e-8);

  Tensor d = leaf(6, 5, 5);
  auto g = [&] { return probe(ops::matmul_nt(ops::matmul(a, b), d), 10); };
  CHECK(worst_error(check_gradients(g, named({a, b, d}))) < 1e-8);
}

TEST_CASE("layer norm, gelu and normalization gradients") {
  Tensor x = leaf(4, 6, 11), gamma = leaf(1, 6, 12), beta = leaf(1, 6, 13);
  auto f = [&] { return probe(ops::l2_normalize_rows(ops::gelu(ops::layer_norm(x, gamma, beta))), 14); };
  CHECK(worst_error(check_gradients(f, named({x, gamma, beta}))) < 1e-7);
}

TEST_CASE("softmax family gradients") {
  Tensor x = leaf(3, 5, 21, 2.0);
  auto f = [&] { return probe(ops::softmax_rows(x), 22); };
  CHECK(worst_error(check_gradients(f, named({x}))) < 1e-8);
  auto g = [&] { return probe(ops::log_softmax_rows(x), 23); };
  CHECK(worst_error(check_gradients(g, named({x}))) < 1e-8);

  Matrix target = Matrix::Random(3, 5).cwiseAbs();
  target.array().colwise() /= target.rowwise().sum().array();
  auto h = [&] { return ops::soft_cross_entropy(x, target); };
  CHECK(worst_error(check_gradients(h, named({x}))) < 1e-8);

  std::vector<int32_t> labels{4, 0, 2};
  auto k = [&] { return ops::cross_entropy(x, labels); };
  CHECK(worst_error(check_gradients(k, named({x}))) < 1e-8);
}

TEST_CASE("indexing ops gradients") {
  Tensor table = leaf(7, 3, 31), x = leaf(4, 3, 32), y = leaf(2, 3, 33), s = Tensor(Matrix::Constant(1, 1, 0.7), true);
  std::vector<int32_t> ids{1, 6, 1, 0};
  std::vector<Eigen::Index> rows{3, 0, 0, 5, 2};
  std::vector<double> factor{1.0, -2.0, 0.5, 3.0};
  auto f = [&] {
    Tensor e = ops::add(ops::embedding(table, ids), x);
    Tensor cat = ops::concat_rows({e, y, ops::slice_rows(x, 1, 2)});
    Tensor g = ops::gather_rows(cat, rows);
    Tensor wide = ops::concat_cols({g, ops::div_scalar(g, s)});
    return ops::add(probe(wide, 34), probe(ops::add_tiled(ops::scale_rows(x, factor), y), 35));
  };
  CHECK(worst_error(check_gradients(f, named({table, x, y, s}))) < 1e-8);
}

TEST_CASE("masked multi-head attention gradients") {
  const Eigen::Index batch = 2, lq = 3, lk = 4, d = 6, heads = 2;
  Tensor q = leaf(batch * lq, d, 41), k = leaf(batch * lk, d, 42), v = leaf(batch * lk, d, 43);
  std::vector<uint8_t> mask{1, 1, 0, 1, 1, 1, 1, 0};
  auto f = [&] { return probe(ops::attention(q, k, v, batch, heads, mask), 44); };
  CHECK(worst_error(check_gradients(f, named({q, k, v}))) < 1e-8);

  std::shared_ptr<ops::AttentionProbs> probs;
  ops::attention(q, k, v, batch, heads, mask, &probs);
  REQUIRE(probs);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const Matrix& p = probs->at(b, h);
      for (Eigen::Index r = 0; r < p.rows(); ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
      for (Eigen::Index c = 0; c < lk; ++c) {
        if (!mask[static_cast<size_t>(b * lk + c)]) CHECK(p.col(c).cwiseAbs().maxCoeff() == 0.0);
      }
    }
  }
}

TEST_CASE("gradients accumulate through shared inputs and stop at detach") {
  Tensor x = leaf(2, 2, 51);
  Tensor y = ops::add(ops::sum(x), ops::sum(ops::mul(x, x.detach())));
  y.backward();
  Matrix expected = Matrix::Ones(2, 2) + x.value();
  CHECK((x.grad() - expected).norm() < 1e-14);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = leaf(2, 2, 61);
  NoGradGuard guard;
  Tensor y = ops::sum(ops::mul(x, x));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("shape errors are rejected") {
  Tensor a = leaf(2, 3, 71), b = leaf(2, 3, 72);
  CHECK_THROWS_AS(ops::matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ops::add(a, leaf(3, 2, 73)), std::invalid_argument);
  std::vector<int32_t> bad{0, 5};
  CHECK_THROWS_AS(ops::cross_entropy(a, bad), std::invalid_argument);
}
