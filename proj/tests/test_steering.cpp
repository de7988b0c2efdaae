#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "grains/steering.hpp"
#include "oracles.hpp"

using namespace grains;

namespace {

ModelConfig cfg() {
  ModelConfig c;
  c.vocab_size = 12;
  c.dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.ff_mult = 2.0;
  c.max_seq = 16;
  c.seed = 5;
  return c;
}

std::vector<PreferenceExample> examples(int n) {
  std::vector<PreferenceExample> out;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> tok(2, 11);
  for (int i = 0; i < n; ++i) {
    PreferenceExample ex;
    ex.id = "ex" + std::to_string(i);
    std::vector<int> ids(6);
    for (auto& t : ids) t = tok(rng);
    ex.prompt = TokenSeq::text(ids);
    ex.y_pos = TokenSeq::text({2, 3});
    ex.y_neg = TokenSeq::text({4});
    out.push_back(ex);
  }
  return out;
}

SteeringVectorSet sample_set() {
  std::mt19937_64 rng(9);
  SteeringVectorSet s;
  s.dim = 4;
  s.provenance.dataset_hash = "00112233aabbccdd";
  s.provenance.skipped = {"a", "b"};
  s.provenance.seed = 42;
  for (int l = 0; l < 3; ++l) {
    LayerVectors lv;
    lv.layer = l;
    lv.positive = oracle::random_matrix(4, 1, rng);
    lv.negative = oracle::random_matrix(4, 1, rng);
    lv.combined = lv.positive - lv.negative;
    s.layers.push_back(lv);
  }
  return s;
}

std::string bytes_of(const SteeringVectorSet& s) {
  std::ostringstream os;
  write_vectors(os, s);
  return os.str();
}

}  // namespace

TEST_CASE("apply_steering: zero lambda is the identity, norm is preserved") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> lam(-20.0, 20.0);
  for (int trial = 0; trial < 500; ++trial) {
    const RowVector h = oracle::random_matrix(1, 7, rng, 3.0);
    const RowVector v = oracle::random_matrix(1, 7, rng);
    CHECK(apply_steering(h, v, 0.0) == h);
    const RowVector s = apply_steering(h, v, lam(rng));
    CHECK(std::abs(s.norm() - h.norm()) <= 1e-12 * h.norm());
  }
  const RowVector h = RowVector::Zero(3);
  CHECK(apply_steering(h, RowVector::Ones(3), 2.0) == h);
  const RowVector u = RowVector::Ones(3);
  CHECK(apply_steering(u, -u, 1.0) == u);
  CHECK_THROWS_AS(apply_steering(u, RowVector::Ones(4), 1.0), DimensionError);
}

TEST_CASE("apply_steering matches the closed form") {
  RowVector h(2), v(2);
  h << 3, 4;
  v << 1, 0;
  const RowVector s = apply_steering(h, v, 2.0);
  // (5,4) rescaled to norm 5.
  CHECK(s(0) == doctest::Approx(25.0 / std::sqrt(41.0)));
  CHECK(s(1) == doctest::Approx(20.0 / std::sqrt(41.0)));
}

TEST_CASE("steer_rows Jacobian matches finite differences") {
  std::mt19937_64 rng(2);
  const Matrix h = oracle::random_matrix(4, 5, rng);
  const RowVector v = oracle::random_matrix(1, 5, rng);
  const Matrix w = oracle::random_matrix(4, 5, rng);
  for (Index first : {Index{0}, Index{2}}) {
    Tape64 tape;
    Var64 hv = tape.leaf(h);
    auto g = tape.backward(sum(hadamard(steer_rows(hv, v, 1.7, first), tape.constant(w))));
    auto f = [&](const Matrix& x) {
      Tape64 t;
      return sum(hadamard(steer_rows(t.leaf(x), v, 1.7, first), t.constant(w))).value()(0, 0);
    };
    CHECK(oracle::max_rel_error(g[hv], oracle::finite_diff(f, h), 1e-4) < 1e-6);
    Tape64 t2;
    const Matrix out = steer_rows(t2.leaf(h), v, 1.7, first).value();
    for (Index r = 0; r < first; ++r) CHECK(out.row(r) == h.row(r));
  }
}

TEST_CASE("pca_first agrees with a Jacobi eigendecomposition of the Gram matrix") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    Matrix d = oracle::random_matrix(50, 8, rng);
    d.rowwise() += oracle::random_matrix(1, 8, rng).row(0) * 0.5;
    const Eigen::VectorXd v = pca_first(d);
    const Eigen::VectorXd ref = oracle::top_gram_eigenvector(d);
    CHECK(std::abs(v.dot(ref)) >= 0.999);
    CHECK(v.norm() == doctest::Approx(1.0));
    CHECK(d.colwise().mean().dot(v.transpose()) >= 0.0);

    Matrix c = d;
    c.rowwise() -= d.colwise().mean();
    CHECK(std::abs(pca_first(d, PcaMode::centered).dot(oracle::top_gram_eigenvector(c))) >= 0.999);
  }
}

TEST_CASE("pca_first sign and degenerate inputs") {
  Matrix d(3, 2);
  d << -1, 0, -2, 0, -3, 0.1;
  const Eigen::VectorXd v = pca_first(d);
  CHECK(v(0) < 0);  // aligned with the mean, not with +x
  CHECK(pca_first(-d)(0) > 0);

  // Mean zero: largest-magnitude component made positive.
  Matrix sym(2, 2);
  sym << 1, -3, -1, 3;
  const Eigen::VectorXd s = pca_first(sym);
  CHECK(s(1) > 0);

  CHECK_THROWS_AS(pca_first(Matrix::Zero(4, 3)), DegenerateError);
  CHECK_THROWS_AS(pca_first(Matrix(0, 3)), DegenerateError);
  Matrix same(3, 2);
  same << 1, 2, 1, 2, 1, 2;
  CHECK_THROWS_AS(pca_first(same, PcaMode::centered), DegenerateError);
  same(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(pca_first(same), DegenerateError);
}

TEST_CASE("vector file round trip and tamper detection") {
  const SteeringVectorSet s = sample_set();
  const std::string b = bytes_of(s);
  std::istringstream is(b);
  const SteeringVectorSet r = read_vectors(is);
  CHECK(r.dim == 4);
  REQUIRE(r.layers.size() == 3);
  CHECK(r.layers[2].combined == s.layers[2].combined);
  CHECK(r.provenance.skipped == s.provenance.skipped);
  CHECK(r.provenance.seed == 42);
  CHECK(bytes_of(r) == b);

  auto fails = [](const std::string& bytes, const std::optional<std::string>& hash = std::nullopt) {
    std::istringstream in(bytes);
    CHECK_THROWS_AS(read_vectors(in, hash), FormatError);
  };
  fails(b.substr(0, b.size() - 3));
  fails(b + "x");
  std::string magic = b;
  magic[0] = 'X';
  fails(magic);
  std::string version = b;
  version[8] = 2;
  fails(version);
  fails(b, std::string("ffffffffffffffff"));
  std::istringstream ok(b);
  CHECK_NOTHROW(read_vectors(ok, std::string("00112233aabbccdd")));

  SteeringVectorSet bad = s;
  bad.layers[1].negative.resize(3);
  std::ostringstream os;
  CHECK_THROWS_AS(write_vectors(os, bad), DimensionError);
  CHECK(s.layer(1).layer == 1);
  CHECK_THROWS_AS(s.layer(7), IndexError);
}

TEST_CASE("extract_deltas reads the final position of each layer") {
  const TransformerLM m(cfg());
  const PreferenceExample ex = examples(1)[0];
  const Matrix x = embed(m, ex.prompt).embeddings;
  TopKSets sets;
  sets.positive = {1};
  sets.negative = {5};
  const Matrix base = Matrix::Zero(x.rows(), x.cols());
  const ContrastiveInputs c = build_contrastive_inputs(x, sets, base);
  CHECK(c.without_positive.row(1).isZero(0.0));
  CHECK(c.without_negative.row(5).isZero(0.0));
  const auto d = extract_deltas(m, x, c, "id");
  REQUIRE(d.size() == 2);
  for (int l = 0; l < 2; ++l) {
    const Matrix full = residual_after(m, x, l + 1);
    const Matrix nopos = residual_after(m, c.without_positive, l + 1);
    CHECK((d[static_cast<std::size_t>(l)].positive.transpose() - (full.row(5) - nopos.row(5))).cwiseAbs().maxCoeff() <
          1e-12);
  }
  CHECK(d[0].example_id == "id");
  CHECK_THROWS_AS(extract_deltas(m, x, ContrastiveInputs{x.topRows(2), x}), ContractError);
}

TEST_CASE("build_vectors: provenance, determinism and job invariance") {
  const TransformerLM m(cfg());
  const auto exs = examples(12);
  BuildConfig bc;
  bc.k = 2;
  const SteeringVectorSet a = build_vectors(m, exs, bc);
  CHECK(a.dim == 8);
  CHECK(a.layers.size() == 2);
  CHECK(a.provenance.dataset_hash == dataset_hash(exs));
  CHECK(a.provenance.n_examples == 12);
  for (const auto& lv : a.layers) {
    CHECK(lv.positive.norm() == doctest::Approx(1.0));
    CHECK((lv.combined - (lv.positive - lv.negative)).isZero(0.0));
  }
  bc.jobs = 4;
  CHECK(bytes_of(build_vectors(m, exs, bc)) == bytes_of(a));

  std::vector<PreferenceExample> shuffled(exs.rbegin(), exs.rend());
  bc.method = AttributionMethod::random;
  bc.seed = 77;
  const auto r1 = build_vectors(m, exs, bc);
  const auto r2 = build_vectors(m, shuffled, bc);
  CHECK(r1.layers[0].combined.isApprox(r2.layers[0].combined, 1e-12));
}

TEST_CASE("build_vectors skips examples with empty sets") {
  const TransformerLM zero = TransformerLM::zeros(cfg());
  BuildConfig bc;
  CHECK_THROWS_AS(build_vectors(zero, examples(3), bc), BuildError);
  CHECK_THROWS_AS(build_vectors(zero, {}, bc), BuildError);
  bc.k = 0;
  CHECK_THROWS_AS(build_vectors(TransformerLM(cfg()), examples(2), bc), ContractError);
}

TEST_CASE("steering hook") {
  const TransformerLM m(cfg());
  const auto exs = examples(8);
  const SteeringVectorSet v = build_vectors(m, exs, BuildConfig{});
  const TokenSeq prompt = exs[0].prompt;

  SUBCASE("lambda zero is bit-identical") {
    const SteeringHook off(v, 0.0);
    CHECK(generate_greedy(m, prompt, 5, &off).ids == generate_greedy(m, prompt, 5).ids);
    const Matrix x = embed(m, prompt).embeddings;
    CHECK(residual_after(m, x, 2, &off) == residual_after(m, x, 2));
  }
  SUBCASE("steered rows keep their norm, prompt rows untouched under generated_only") {
    const Matrix x = embed(m, prompt).embeddings;
    const SteeringHook all(v, 3.0, {0});
    const Matrix plain1 = residual_after(m, x, 1);
    const Matrix steered1 = residual_after(m, x, 1, &all);
    for (Index r = 0; r < x.rows(); ++r) CHECK(steered1.row(r).norm() == doctest::Approx(plain1.row(r).norm()));
    CHECK_FALSE(steered1 == plain1);

    const SteeringHook gen(v, 3.0, {}, PositionPolicy::generated_only);
    CHECK(residual_after(m, x, 2, &gen, x.rows()) == residual_after(m, x, 2));
    CHECK_FALSE(residual_after(m, x, 2, &gen, 3) == residual_after(m, x, 2));
  }
  SUBCASE("layer selection") {
    const Matrix x = embed(m, prompt).embeddings;
    const SteeringHook only1(v, 2.0, {1});
    CHECK(residual_after(m, x, 1, &only1) == residual_after(m, x, 1));
    CHECK_THROWS_AS(SteeringHook(v, 1.0, {4}), IndexError);
  }
  CHECK(position_policy_from_string(to_string(PositionPolicy::generated_only)) == PositionPolicy::generated_only);
  CHECK(pca_mode_from_string("centered") == PcaMode::centered);
}

TEST_CASE("save and load vectors") {
  const auto dir = std::filesystem::temp_directory_path() / "grains_test_steering";
  std::filesystem::create_directories(dir);
  save_vectors(sample_set(), dir / "v.bin");
  CHECK(load_vectors(dir / "v.bin").layers.size() == 3);
  CHECK_THROWS_AS(load_vectors(dir / "nope.bin"), IoError);
  std::filesystem::remove_all(dir);
}
