#include <doctest.h>

#include <cmath>
#include <sstream>

#include "grains/model.hpp"
#include "oracles.hpp"

using namespace grains;

namespace {

ModelConfig small_config(int vocab = 12, int dim = 8, int layers = 2, std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = dim;
  c.layers = layers;
  c.heads = 2;
  c.ff_mult = 2.0;
  c.max_seq = 12;
  c.seed = seed;
  return c;
}

Matrix logits_of(const TransformerLM& m, const TokenSeq& s, const ResidualHook* hook = nullptr) {
  ForwardOptions opts;
  opts.hook = hook;
  return forward_from_embeddings(m, embed(m, s), opts).logits.value();
}

class PassThrough : public ResidualHook {
 public:
  explicit PassThrough(int d) : d_(d) {}
  Var64 apply(Var64 r, int, Index) const override { return r; }
  int dim() const override { return d_; }

 private:
  int d_;
};

class Shift : public ResidualHook {
 public:
  explicit Shift(int d) : d_(d) {}
  Var64 apply(Var64 r, int, Index) const override { return scale(r, 2.0); }
  int dim() const override { return d_; }

 private:
  int d_;
};

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = small_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("token sequence validation") {
  TokenSeq s = TokenSeq::text({1, 2, 3});
  CHECK_NOTHROW(s.validate(4));
  CHECK_THROWS_AS(s.validate(3), IndexError);
  s.modality.pop_back();
  CHECK_THROWS_AS(s.validate(4), ContractError);
}

TEST_CASE("parameter layout") {
  const TransformerLM m(small_config());
  CHECK(m.param_name(0) == "tok_emb");
  CHECK(m.param_name(1) == "pos_emb");
  CHECK(m.param("tok_emb").rows() == 12);
  CHECK(m.param("blocks.1.attn.qkv.weight").cols() == 24);
  CHECK(m.param("head.weight").cols() == 12);
  CHECK_FALSE(m.find_param("nope").has_value());
  CHECK(TransformerLM(small_config()) == m);
  CHECK_FALSE(TransformerLM(small_config(12, 8, 2, 2)) == m);
}

TEST_CASE("forward input checks") {
  const TransformerLM m(small_config());
  CHECK_THROWS_AS(embed(m, TokenSeq{}), ContractError);
  CHECK_THROWS_AS(logits_of(m, TokenSeq::text(std::vector<int>(13, 1))), LengthError);
  CHECK_THROWS_AS(logits_of(m, TokenSeq::text({12})), IndexError);
  EmbeddedInput bad{Matrix::Zero(3, 7), std::nullopt, BaselineKind::zero};
  CHECK_THROWS_AS(forward_from_embeddings(m, bad), DimensionError);
  const PassThrough wrong(9);
  CHECK_THROWS_AS(logits_of(m, TokenSeq::text({1, 2}), &wrong), CompatibilityError);
}

TEST_CASE("causal masking: earlier positions ignore later tokens") {
  const TransformerLM m(small_config());
  const Matrix a = logits_of(m, TokenSeq::text({1, 2, 3, 4, 5}));
  const Matrix b = logits_of(m, TokenSeq::text({1, 2, 3, 9, 0}));
  CHECK((a.topRows(3) - b.topRows(3)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.row(3) - b.row(3)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("zero model gives uniform predictions") {
  const TransformerLM m = TransformerLM::zeros(small_config());
  CHECK(logits_of(m, TokenSeq::text({1, 2})).isZero(0.0));
  const double lp = sequence_logprob(m, TokenSeq::text({1}), TokenSeq::text({2, 3, 4}));
  CHECK(lp == doctest::Approx(-3.0 * std::log(12.0)));
  const TokenSeq g = generate_greedy(m, TokenSeq::text({5}), 4);
  CHECK(g.ids == std::vector<int>{5, 0, 0, 0, 0});
}

TEST_CASE("sequence probabilities normalise over every continuation") {
  ModelConfig c = small_config(4, 8, 2, 7);
  const TransformerLM m(c);
  const TokenSeq prompt = TokenSeq::text({1, 3});
  long double total = 0;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int d = 0; d < 4; ++d) total += std::exp(static_cast<long double>(sequence_logprob(m, prompt, TokenSeq::text({a, b, d}))));
  CHECK(static_cast<double>(total) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sequence_logprob reads teacher-forced rows") {
  const TransformerLM m(small_config());
  const TokenSeq prompt = TokenSeq::text({3, 1, 4});
  const TokenSeq y = TokenSeq::text({1, 5});
  const Matrix lg = logits_of(m, TokenSeq::text({3, 1, 4, 1}));
  const Matrix p = oracle::softmax_rows(lg);
  const double expect = std::log(p(2, 1)) + std::log(p(3, 5));
  CHECK(sequence_logprob(m, prompt, y) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(sequence_logprob(m, prompt, TokenSeq{}), ContractError);
}

TEST_CASE("parameter gradients agree with finite differences") {
  const TransformerLM m(small_config(6, 8, 2, 3));
  const TokenSeq seq = TokenSeq::text({1, 4, 2, 5});
  std::mt19937_64 rng(2);
  const Matrix w = oracle::random_matrix(4, 6, rng);
  auto loss_of = [&](const TransformerLM& mm) {
    Tape64 t;
    auto params = bind_parameters(t, mm, false);
    const std::vector<int> ids = seq.ids;
    Var64 e = gather_rows(params[mm.tok_emb()], std::span<const int>(ids));
    return sum(hadamard(forward_logits(t, mm, params, e, {}, nullptr), t.constant(w))).value()(0, 0);
  };
  Tape64 tape;
  auto params = bind_parameters(tape, m, true);
  const std::vector<int> ids = seq.ids;
  Var64 e = gather_rows(params[m.tok_emb()], std::span<const int>(ids));
  auto grads = tape.backward(sum(hadamard(forward_logits(tape, m, params, e, {}, nullptr), tape.constant(w))));
  for (const char* name : {"tok_emb", "pos_emb", "blocks.0.attn.qkv.weight", "blocks.1.ln2.gain",
                           "blocks.1.mlp.fc.bias", "ln_f.bias", "head.weight"}) {
    const std::size_t idx = *m.find_param(name);
    auto f = [&](const Matrix& p) {
      TransformerLM mm = m;
      mm.param(idx) = p;
      return loss_of(mm);
    };
    INFO(name);
    CHECK(oracle::max_rel_error(grads[params[idx]], oracle::finite_diff(f, m.param(idx)), 1e-4) < 1e-5);
  }
}

TEST_CASE("truncated forward matches the captured trace") {
  const TransformerLM m(small_config(12, 8, 3));
  const TokenSeq s = TokenSeq::text({1, 2, 3, 4});
  ForwardOptions opts;
  opts.capture = true;
  const auto pass = forward_from_embeddings(m, embed(m, s), opts);
  REQUIRE(pass.trace->layers.size() == 3);
  const Matrix x = embed(m, s).embeddings;
  for (int l = 1; l <= 3; ++l) {
    CHECK(residual_after(m, x, l) == pass.trace->layers[static_cast<std::size_t>(l - 1)]);
  }
  CHECK_THROWS_AS(residual_after(m, x, 0), IndexError);
  CHECK_THROWS_AS(residual_after(m, x, 4), IndexError);
}

TEST_CASE("identity hook leaves logits bit-identical; other hooks change them") {
  const TransformerLM m(small_config());
  const TokenSeq s = TokenSeq::text({1, 2, 3});
  const PassThrough id(8);
  CHECK(logits_of(m, s) == logits_of(m, s, &id));
  const Shift shift(8);
  CHECK_FALSE(logits_of(m, s) == logits_of(m, s, &shift));
}

TEST_CASE("greedy generation respects max_new, end token and context") {
  const TransformerLM m(small_config());
  const TokenSeq prompt = TokenSeq::text({1, 2});
  const TokenSeq g = generate_greedy(m, prompt, 3);
  CHECK(g.size() == 5);
  CHECK(std::vector<int>(g.ids.begin(), g.ids.begin() + 2) == prompt.ids);
  const TokenSeq full = generate_greedy(m, prompt, 100);
  CHECK(full.size() == 12);
  const int first = g.ids[2];
  CHECK(generate_greedy(m, prompt, 5, nullptr, first).size() == 3);
  CHECK_THROWS_AS(generate_greedy(m, TokenSeq{}, 1), ContractError);
}

TEST_CASE("checkpoint round trip and corruption") {
  const TransformerLM m(small_config());
  std::stringstream ss;
  write_checkpoint(ss, m);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 8) == "GRNSCKPT");
  std::istringstream in(bytes);
  CHECK(read_checkpoint(in) == m);

  std::istringstream truncated(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_checkpoint(truncated), FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  std::istringstream bad_magic(magic);
  CHECK_THROWS_AS(read_checkpoint(bad_magic), FormatError);
  std::string version = bytes;
  version[8] = 9;
  std::istringstream bad_version(version);
  CHECK_THROWS_AS(read_checkpoint(bad_version), FormatError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/model.bin"), IoError);
}

TEST_CASE("training reduces loss and is reproducible") {
  const ModelConfig c = small_config(6, 8, 1, 4);
  std::vector<TokenSeq> corpus;
  for (int i = 0; i < 8; ++i) corpus.push_back(TokenSeq::text({1, 2, 3, 4, 5, 0}));
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 4;
  tc.learning_rate = 1e-2;
  tc.seed = 9;
  TransformerLM a(c);
  const double before = corpus_loss(a, corpus);
  const TrainReport rep = train_toy(a, corpus, tc);
  CHECK(rep.loss_curve.size() == 60);
  CHECK(corpus_loss(a, corpus) < 0.5 * before);

  TransformerLM b(c);
  tc.jobs = 3;
  train_toy(b, corpus, tc);
  CHECK(a == b);

  TransformerLM z(c);
  tc.steps = 0;
  train_toy(z, corpus, tc);
  CHECK(z == TransformerLM(c));
}

TEST_CASE("non-finite training loss names the step") {
  TransformerLM m(small_config(6, 8, 1));
  m.param("head.bias")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.steps = 3;
  try {
    train_toy(m, {TokenSeq::text({1, 2, 3})}, tc);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 0);
  }
  CHECK_THROWS_AS(train_toy(m, {}, tc), ContractError);
}
