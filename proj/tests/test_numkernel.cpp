#include <doctest.h>

#include <array>

#include "grains/numkernel.hpp"
#include "oracles.hpp"

using namespace grains;
using Tape64 = Tape<double>;
using V = Var<double>;

namespace {

using Build = std::function<V(Tape64&, V)>;

// Reduces op(x) to a scalar with fixed random weights, then compares the tape
// gradient with central differences.
double grad_error(const Build& op, const Matrix& x, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Matrix w;
  auto scalar = [&](Tape64& t, V xv) {
    V out = op(t, xv);
    if (w.size() == 0) w = oracle::random_matrix(out.rows(), out.cols(), rng);
    return sum(hadamard(out, t.constant(w)));
  };
  Tape64 tape;
  V xv = tape.leaf(x);
  V s = scalar(tape, xv);
  auto grads = tape.backward(s);
  auto f = [&](const Matrix& xx) {
    Tape64 t;
    return scalar(t, t.leaf(xx)).value()(0, 0);
  };
  return oracle::max_rel_error(grads[xv], oracle::finite_diff(f, x), 1e-4);
}

}  // namespace

TEST_CASE("matmul matches the triple-loop oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = oracle::random_matrix(3 + trial, 4, rng);
    const Matrix b = oracle::random_matrix(4, 2 + trial, rng);
    Tape64 t;
    const Matrix c = matmul(t.constant(a), t.constant(b)).value();
    CHECK((c - oracle::matmul(a, b)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape64 t;
  V a = t.constant(Matrix::Zero(2, 3));
  V b = t.constant(Matrix::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("softmax rows match long-double oracle and sum to one") {
  std::mt19937_64 rng(5);
  const Matrix m = oracle::random_matrix(4, 7, rng, 3.0);
  Tape64 t;
  const Matrix s = softmax_rows(t.constant(m)).value();
  CHECK((s - oracle::softmax_rows(m)).cwiseAbs().maxCoeff() < 1e-14);
  for (Index i = 0; i < s.rows(); ++i) CHECK(s.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
  const Matrix ls = log_softmax_rows(t.constant(m)).value();
  CHECK((ls.array().exp().matrix() - s).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("softmax is stable for large logits") {
  Matrix m(1, 3);
  m << 1000.0, 1001.0, 999.0;
  Tape64 t;
  const Matrix s = softmax_rows(t.constant(m)).value();
  CHECK(all_finite(s));
  CHECK(s.sum() == doctest::Approx(1.0));
  CHECK(all_finite(log_softmax_rows(t.constant(m)).value()));
}

TEST_CASE("causal softmax masks the upper triangle") {
  std::mt19937_64 rng(9);
  const Matrix m = oracle::random_matrix(5, 5, rng);
  Tape64 t;
  const Matrix s = causal_softmax_rows(t.constant(m)).value();
  for (Index i = 0; i < 5; ++i) {
    for (Index j = i + 1; j < 5; ++j) CHECK(s(i, j) == 0.0);
    CHECK(s.row(i).sum() == doctest::Approx(1.0));
    const Matrix ref = oracle::softmax_rows(m.block(i, 0, 1, i + 1));
    CHECK((s.block(i, 0, 1, i + 1) - ref).cwiseAbs().maxCoeff() < 1e-14);
  }
  CHECK_THROWS_AS(causal_softmax_rows(t.constant(Matrix::Zero(2, 3))), DimensionError);
}

TEST_CASE("backward rules agree with finite differences") {
  std::mt19937_64 rng(11);
  const Matrix x = oracle::random_matrix(4, 5, rng);
  const Matrix w = oracle::random_matrix(5, 3, rng);
  const Matrix row = oracle::random_matrix(1, 5, rng);
  const Matrix other = oracle::random_matrix(4, 5, rng);

  SUBCASE("matmul left") { CHECK(grad_error([&](Tape64& t, V v) { return matmul(v, t.constant(w)); }, x) < 1e-7); }
  SUBCASE("matmul right") {
    CHECK(grad_error([&](Tape64& t, V v) { return matmul(t.constant(other.transpose()), v); }, x) < 1e-7);
  }
  SUBCASE("add sub hadamard scale") {
    CHECK(grad_error([&](Tape64& t, V v) { return add(v, t.constant(other)); }, x) < 1e-7);
    CHECK(grad_error([&](Tape64& t, V v) { return sub(t.constant(other), v); }, x) < 1e-7);
    CHECK(grad_error([&](Tape64& t, V v) { return hadamard(v, v); }, x) < 1e-7);
    CHECK(grad_error([&](Tape64&, V v) { return scale(v, -2.5); }, x) < 1e-7);
  }
  SUBCASE("row broadcast on both inputs") {
    CHECK(grad_error([&](Tape64& t, V v) { return add_row_broadcast(v, t.constant(row)); }, x) < 1e-7);
    CHECK(grad_error([&](Tape64& t, V r) { return add_row_broadcast(t.constant(x), r); }, row) < 1e-7);
  }
  SUBCASE("transpose and sum") {
    CHECK(grad_error([&](Tape64&, V v) { return transpose(v); }, x) < 1e-7);
    CHECK(grad_error([&](Tape64&, V v) { return sum(v); }, x) < 1e-7);
  }
  SUBCASE("gelu") { CHECK(grad_error([&](Tape64&, V v) { return gelu(v); }, x) < 1e-6); }
  SUBCASE("softmax and log-softmax") {
    CHECK(grad_error([&](Tape64&, V v) { return softmax_rows(v); }, x) < 1e-6);
    CHECK(grad_error([&](Tape64&, V v) { return log_softmax_rows(v); }, x) < 1e-6);
  }
  SUBCASE("causal softmax") {
    const Matrix sq = oracle::random_matrix(4, 4, rng);
    CHECK(grad_error([&](Tape64&, V v) { return causal_softmax_rows(v); }, sq) < 1e-6);
  }
  SUBCASE("layernorm input, gain and bias") {
    const Matrix g = oracle::random_matrix(1, 5, rng);
    const Matrix b = oracle::random_matrix(1, 5, rng);
    CHECK(grad_error([&](Tape64& t, V v) { return layernorm(v, t.constant(g), t.constant(b), 1e-5); }, x) < 1e-5);
    CHECK(grad_error([&](Tape64& t, V v) { return layernorm(t.constant(x), v, t.constant(b), 1e-5); }, g) < 1e-6);
    CHECK(grad_error([&](Tape64& t, V v) { return layernorm(t.constant(x), t.constant(g), v, 1e-5); }, b) < 1e-6);
  }
  SUBCASE("gather with repeated ids accumulates") {
    const std::array<int, 5> ids{1, 3, 1, 0, 1};
    CHECK(grad_error([&](Tape64&, V v) { return gather_rows(v, std::span<const int>(ids)); }, x) < 1e-7);
  }
  SUBCASE("slices and concatenation") {
    CHECK(grad_error([&](Tape64&, V v) { return slice_rows(v, 1, 2); }, x) < 1e-7);
    CHECK(grad_error([&](Tape64&, V v) { return slice_cols(v, 2, 3); }, x) < 1e-7);
    CHECK(grad_error([&](Tape64& t, V v) {
            const std::array<V, 3> parts{v, t.constant(other), v};
            return concat_rows(std::span<const V>(parts));
          }, x) < 1e-7);
    CHECK(grad_error([&](Tape64& t, V v) {
            const std::array<V, 2> parts{t.constant(other), v};
            return concat_cols(std::span<const V>(parts));
          }, x) < 1e-7);
  }
  SUBCASE("select_sum") {
    const std::array<std::pair<Index, Index>, 3> e{{{0, 1}, {3, 4}, {0, 1}}};
    CHECK(grad_error([&](Tape64&, V v) { return select_sum(v, std::span<const std::pair<Index, Index>>(e)); }, x) <
          1e-7);
  }
}

TEST_CASE("layernorm output has zero mean and unit variance with identity gain") {
  std::mt19937_64 rng(21);
  const Matrix x = oracle::random_matrix(3, 8, rng, 4.0);
  Tape64 t;
  const Matrix y = layernorm(t.constant(x), t.constant(Matrix::Ones(1, 8)), t.constant(Matrix::Zero(1, 8)), 1e-12).value();
  for (Index i = 0; i < 3; ++i) {
    CHECK(std::abs(y.row(i).mean()) < 1e-12);
    CHECK(y.row(i).squaredNorm() / 8.0 == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK_THROWS_AS(layernorm(t.constant(x), t.constant(Matrix::Ones(1, 7)), t.constant(Matrix::Zero(1, 8)), 1e-5),
                  DimensionError);
}

TEST_CASE("index and dimension errors") {
  Tape64 t;
  V m = t.constant(Matrix::Zero(3, 4));
  const std::array<int, 2> bad{0, 3};
  CHECK_THROWS_AS(gather_rows(m, std::span<const int>(bad)), IndexError);
  const std::array<int, 1> neg{-1};
  CHECK_THROWS_AS(gather_rows(m, std::span<const int>(neg)), IndexError);
  CHECK_THROWS_AS(slice_rows(m, 2, 2), IndexError);
  CHECK_THROWS_AS(slice_cols(m, -1, 2), IndexError);
  CHECK_THROWS_AS(add(m, t.constant(Matrix::Zero(4, 3))), DimensionError);
  CHECK_THROWS_AS(add_row_broadcast(m, t.constant(Matrix::Zero(1, 3))), DimensionError);
  const std::array<std::pair<Index, Index>, 1> e{{{3, 0}}};
  CHECK_THROWS_AS(select_sum(m, std::span<const std::pair<Index, Index>>(e)), IndexError);
  CHECK_THROWS_AS(concat_rows(std::span<const V>()), ContractError);
}

TEST_CASE("backward requires a scalar seed and consumes the tape") {
  Tape64 t;
  V x = t.leaf(Matrix::Ones(2, 2));
  V y = scale(x, 3.0);
  CHECK_THROWS_AS(t.backward(y), ContractError);
  V s = sum(y);
  auto g = t.backward(s);
  CHECK((g[x].array() == 3.0).all());
  CHECK(t.consumed());
  CHECK_THROWS_AS(t.backward(s), ContractError);
  CHECK_THROWS_AS(t.leaf(Matrix::Ones(1, 1)), ContractError);
}

TEST_CASE("untouched leaves get zero gradients and constants get none") {
  Tape64 t;
  V x = t.leaf(Matrix::Ones(2, 3));
  V unused = t.leaf(Matrix::Ones(4, 1));
  V c = t.constant(Matrix::Ones(2, 3));
  auto g = t.backward(sum(hadamard(x, c)));
  CHECK(g.contains(unused));
  CHECK(g[unused].isZero(0.0));
  CHECK(g[unused].rows() == 4);
  CHECK_FALSE(g.contains(c));
  CHECK_THROWS_AS(g[c], ContractError);
  const Matrix taken = g.take(x);
  CHECK((taken.array() == 1.0).all());
}

TEST_CASE("a leaf used twice accumulates both paths") {
  Tape64 t;
  Matrix xv(1, 1);
  xv << 3.0;
  V x = t.leaf(xv);
  V y = add(hadamard(x, x), scale(x, 2.0));
  auto g = t.backward(sum(y));
  CHECK(g[x](0, 0) == doctest::Approx(2 * 3.0 + 2.0));
}

TEST_CASE("operands on different tapes are rejected") {
  Tape64 a, b;
  CHECK_THROWS_AS(add(a.constant(Matrix::Ones(1, 1)), b.constant(Matrix::Ones(1, 1))), ContractError);
}

TEST_CASE("float instantiation runs the same ops") {
  Tape<float> t;
  MatrixX<float> x = MatrixX<float>::Constant(2, 2, 0.5f);
  Var<float> v = t.leaf(x);
  auto g = t.backward(sum(gelu(softmax_rows(v))));
  CHECK(g[v].rows() == 2);
  CHECK(all_finite(g[v]));
}
