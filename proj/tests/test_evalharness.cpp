#include <doctest.h>

#include <cmath>
#include <random>
#include <json.hpp>

#include "grains/evalharness.hpp"
#include "grains/steering.hpp"

using namespace grains;

namespace {

ModelConfig small(int vocab = 12) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.ff_mult = 2.0;
  c.max_seq = 16;
  c.seed = 4;
  return c;
}

PreferenceExample ex(std::vector<int> pos, std::vector<int> neg, std::string id = "e") {
  PreferenceExample e;
  e.id = std::move(id);
  e.prompt = TokenSeq::text({2, 3, 4});
  e.y_pos = TokenSeq::text(std::move(pos));
  e.y_neg = TokenSeq::text(std::move(neg));
  return e;
}

class Scale : public ResidualHook {
 public:
  explicit Scale(double s) : s_(s) {}
  Var64 apply(Var64 r, int, Index) const override { return scale(r, s_); }
  int dim() const override { return 8; }

 private:
  double s_;
};

}  // namespace

TEST_CASE("synthetic corpus shape and determinism") {
  SyntheticSpec spec;
  spec.n = 10;
  spec.n_dev = 4;
  spec.n_heldout = 6;
  spec.n_lm = 20;
  spec.n_neutral = 5;
  spec.seed = 3;
  const SyntheticCorpus a = gen_synthetic_corpus(spec);
  CHECK(a.examples.size() == 10);
  CHECK(a.dev.size() == 4);
  CHECK(a.heldout.size() == 6);
  CHECK(a.lm_corpus.size() == 20);
  const SyntheticCorpus b = gen_synthetic_corpus(spec);
  CHECK(dataset_hash(a.heldout) == dataset_hash(b.heldout));
  CHECK(a.lm_corpus == b.lm_corpus);
  spec.seed = 4;
  CHECK(dataset_hash(gen_synthetic_corpus(spec).heldout) != dataset_hash(a.heldout));

  for (const auto& e : a.examples) {
    e.validate(TaskVocab::size);
    CHECK(e.prompt.size() == 24);
    int triggers = 0, supports = 0;
    for (std::size_t i = 0; i < e.prompt.size(); ++i) {
      const int id = e.prompt.ids[i];
      triggers += TaskVocab::is_trigger(id);
      supports += TaskVocab::is_support(id);
      CHECK((id >= TaskVocab::visual_begin) == (e.prompt.modality[i] == Modality::visual));
    }
    CHECK(triggers == 1);
    CHECK(supports == 1);
    CHECK(e.options[static_cast<std::size_t>(*e.gold)] == e.y_pos);
  }
  for (const auto& s : a.neutral) {
    for (int id : s.ids) CHECK_FALSE((TaskVocab::is_trigger(id) || TaskVocab::is_support(id)));
    CHECK(s.ids.back() == TaskVocab::eos);
  }
}

TEST_CASE("synthetic rates and errors") {
  SyntheticSpec spec;
  spec.n = 20;
  spec.trigger_rate = 0.0;
  spec.support_rate = 0.0;
  spec.modality_mix = 0.0;
  for (const auto& e : gen_synthetic_corpus(spec).examples) {
    for (std::size_t i = 0; i < e.prompt.size(); ++i) {
      CHECK_FALSE(TaskVocab::is_trigger(e.prompt.ids[i]));
      CHECK(e.prompt.modality[i] == Modality::text);
    }
  }
  // logit +-inf style tables make the LM answers deterministic.
  spec.lm_trigger_rate = 1.0;
  spec.lm_support_rate = 0.0;
  spec.logit_10 = 50.0;
  for (const auto& s : gen_synthetic_corpus(spec).lm_corpus) CHECK(s.ids[24] == TaskVocab::bad[0]);

  SyntheticSpec bad;
  bad.n = 0;
  CHECK_THROWS_AS(gen_synthetic_corpus(bad), ContractError);
  bad = SyntheticSpec{};
  bad.modality_mix = 1.5;
  CHECK_THROWS_AS(gen_synthetic_corpus(bad), ContractError);
  bad = SyntheticSpec{};
  bad.n_lm = -1;
  CHECK_THROWS_AS(gen_synthetic_corpus(bad), ContractError);
  CHECK(synthetic_model_config(SyntheticSpec{}, 1).max_seq == 32);
}

TEST_CASE("win rate on a zero model: length artifact and ties") {
  const TransformerLM zero = TransformerLM::zeros(small());
  // Uniform next-token distribution: logP(y) = -|y| log V.
  const EvalReport shorter_neg = win_rate(zero, {ex({5, 6}, {7})});
  CHECK(shorter_neg.value == 0.0);
  CHECK(shorter_neg.records[0].score_a == doctest::Approx(-2 * std::log(12.0)));
  CHECK(win_rate(zero, {ex({5}, {6, 7})}).value == 1.0);
  const EvalReport tie = win_rate(zero, {ex({5}, {6})});
  CHECK(tie.records[0].score_a == tie.records[0].score_b);
  CHECK(tie.value == 0.0);
  CHECK_THROWS_AS(win_rate(zero, {}), ContractError);
}

TEST_CASE("win rate is job invariant and hook aware") {
  const TransformerLM m(small());
  std::vector<PreferenceExample> exs;
  for (int i = 0; i < 20; ++i) exs.push_back(ex({2 + i % 9, 3}, {4 + i % 7}, "e" + std::to_string(i)));
  const EvalReport a = win_rate(m, exs);
  const EvalReport b = win_rate(m, exs, nullptr, 4);
  CHECK(report_json(a) == report_json(b));
  CHECK(a.n == 20);
  const Scale s(1.0);
  CHECK(report_json(win_rate(m, exs, &s)) == report_json(a));
}

TEST_CASE("MCQ accuracy") {
  const TransformerLM zero = TransformerLM::zeros(small());
  PreferenceExample e = ex({5}, {6});
  e.options = {TokenSeq::text({5})};
  e.gold = 0;
  CHECK(mcq_accuracy(zero, {e}).value == 1.0);

  // Zero model: every option ties, so the lowest index wins.
  e.options = {TokenSeq::text({5}), TokenSeq::text({6, 7}), TokenSeq::text({8}), TokenSeq::text({9})};
  std::vector<PreferenceExample> four;
  for (int g = 0; g < 4; ++g) {
    e.gold = g;
    e.id = std::to_string(g);
    four.push_back(e);
  }
  const EvalReport r = mcq_accuracy(zero, four);
  CHECK(r.value == 0.25);
  for (const auto& rec : r.records) CHECK(rec.predicted == 0);

  PreferenceExample missing = ex({5}, {6});
  CHECK_THROWS_AS(mcq_accuracy(zero, {missing}), ContractError);
}

TEST_CASE("MCQ with two equal-length options agrees with win rate") {
  SyntheticSpec spec;
  spec.n = 100;
  const auto exs = gen_synthetic_corpus(spec).examples;
  const TransformerLM m(synthetic_model_config(spec, 9));
  const EvalReport mcq = mcq_accuracy(m, exs, nullptr, 4);
  const EvalReport wr = win_rate(m, exs, nullptr, 4);
  CHECK(mcq.value == wr.value);
  for (std::size_t i = 0; i < exs.size(); ++i) CHECK(mcq.records[i].success == wr.records[i].success);
}

TEST_CASE("BLEU matches reference values") {
  auto t = [](std::vector<int> v) { return TokenSeq::text(std::move(v)); };
  CHECK(bleu(t({2, 3, 4}), t({2, 3, 4})) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bleu(t({2, 3, 4}), t({5, 6, 7})) == doctest::Approx(0.4518010018049224).epsilon(1e-12));
  CHECK(bleu(t({2, 3, 7}), t({2, 3, 4})) == doctest::Approx(0.7071067811865475).epsilon(1e-12));
  CHECK(bleu(t({1, 2, 3, 4, 5, 6}), t({1, 2, 3, 9, 5, 6, 7})) == doctest::Approx(0.41386440336942737).epsilon(1e-12));
  CHECK(bleu(t({4, 4, 4, 4}), t({4, 4})) == doctest::Approx(0.47287080450158786).epsilon(1e-12));
  CHECK(bleu(t({9}), t({9, 8, 7, 6})) == doctest::Approx(0.049787068367863944).epsilon(1e-12));
  CHECK(bleu(t({1, 2, 1, 2, 1}), t({2, 1, 2, 1, 2, 1, 2})) == doctest::Approx(0.6703200460356393).epsilon(1e-12));
  CHECK(bleu(t({2, 3}), t({2, 3, 4})) != bleu(t({2, 3, 4}), t({2, 3})));
  CHECK_THROWS_AS(bleu(TokenSeq{}, t({1})), ContractError);
}

TEST_CASE("BLEU properties") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(1, 12), tok(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& x : a) x = tok(rng);
    for (auto& x : b) x = tok(rng);
    const double s = bleu(TokenSeq::text(a), TokenSeq::text(b));
    CHECK(s > 0.0);
    CHECK(s <= 1.0 + 1e-12);
    CHECK(bleu(TokenSeq::text(a), TokenSeq::text(a)) == doctest::Approx(1.0));
  }
}

TEST_CASE("generation metrics") {
  const TransformerLM m(small());
  std::vector<PreferenceExample> exs;
  for (int i = 0; i < 6; ++i) exs.push_back(ex({2 + i, 3}, {8, 9}, std::to_string(i)));
  const Scale id(1.0);
  const EvalReport sw = generation_switch_rate(m, exs, id);
  CHECK(sw.value == 0.0);
  CHECK(sw.n == 6);
  const EvalReport bl = bleu_accuracy(m, exs);
  CHECK(bl.n == 6);
  for (const auto& r : bl.records) CHECK(r.success == (r.score_a > r.score_b));

  std::vector<TokenSeq> corpus{TokenSeq::text({1, 2, 3, 4}), TokenSeq::text({5, 6})};
  const EvalReport ag = next_token_agreement(m, corpus, id);
  CHECK(ag.value == 1.0);
  CHECK(ag.n == 6);
  const Scale flip(-1.0);
  CHECK(next_token_agreement(m, corpus, flip).value < 1.0);
}

TEST_CASE("ablation curve") {
  const TransformerLM m(small());
  std::vector<PreferenceExample> exs;
  for (int i = 0; i < 8; ++i) {
    PreferenceExample e = ex({5, 6}, {7}, "a" + std::to_string(i));
    e.prompt = TokenSeq::text({2 + i % 5, 3, 9, 4 + i % 3, 10});
    exs.push_back(e);
  }
  AblationCurveConfig cfg;
  const auto rows = ablation_curve_report(m, exs, {0, 1, 3}, cfg);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].mean_neg_removed == 0.0);
  CHECK(rows[0].stderr_pos_removed == 0.0);
  CHECK(rows[1].n == 8);

  // Oracle for k=1: recompute each example's delta by hand.
  double sum = 0.0, sq = 0.0;
  for (const auto& e : exs) {
    const Matrix x = embed(m, e.prompt).embeddings;
    const Matrix base = Matrix::Zero(x.rows(), x.cols());
    const auto obj = AttributionObjective::from_example(e);
    const TopKSets sets = select_topk(integrated_gradients(m, obj, x, base, 5), 1, ModalityFilter::joint, e.prompt);
    const AblationDelta d = ablation_delta(m, e, sets, base);
    sum += d.neg_removed - d.before;
    sq += (d.neg_removed - d.before) * (d.neg_removed - d.before);
  }
  const double mean = sum / 8;
  const double sd = std::sqrt((sq - 8 * mean * mean) / 7);
  CHECK(rows[1].mean_neg_removed == doctest::Approx(mean).epsilon(1e-9));
  CHECK(rows[1].stderr_neg_removed == doctest::Approx(sd / std::sqrt(8.0)).epsilon(1e-6));

  cfg.jobs = 3;
  CHECK(ablation_curve_csv(ablation_curve_report(m, exs, {0, 1, 3}, cfg)) == ablation_curve_csv(rows));
  CHECK(ablation_curve_csv(rows).rfind("k,n,", 0) == 0);
  CHECK_THROWS_AS(ablation_curve_report(m, exs, {-1}, cfg), ContractError);
  CHECK_THROWS_AS(ablation_curve_report(m, exs, {}, cfg), ContractError);
}

TEST_CASE("report formats") {
  EvalReport r;
  r.metric = "win_rate";
  r.value = 0.5;
  r.n = 2;
  r.config = {{"lambda", "2.5"}};
  r.records = {{"a", 1.5, -0.25, true, std::nullopt}, {"b", 0.1, 0.2, false, 3}};
  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j["metric"] == "win_rate");
  CHECK(j["config"]["lambda"] == "2.5");
  CHECK(j["records"].size() == 2);
  CHECK(j["records"][1]["predicted"] == 3);
  CHECK_FALSE(j["records"][0].contains("predicted"));
  CHECK(report_csv(r) == "id,score_a,score_b,success,predicted\na,1.5,-0.25,1,\nb,0.1,0.2,0,3\n");
}
