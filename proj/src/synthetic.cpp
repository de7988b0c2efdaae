#include <algorithm>
#include <cmath>
#include <random>

#include "grains/error.hpp"
#include "grains/evalharness.hpp"

namespace grains {

TokenSeq TaskVocab::good_answer() { return TokenSeq::text({good[0], good[1], good[2]}); }
TokenSeq TaskVocab::bad_answer() { return TokenSeq::text({bad[0], bad[1], bad[2]}); }

namespace {

enum class Split : std::uint64_t { steer = 1, heldout = 2, lm = 3, neutral = 4, dev = 5 };

std::mt19937_64 split_rng(std::uint64_t seed, Split split) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split)};
  return std::mt19937_64(seq);
}

bool coin(std::mt19937_64& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

// Visual segment first, then text. Fillers follow one cycle across both
// segments; trigger and support tokens overwrite fillers at random positions.
TokenSeq make_prompt(std::mt19937_64& rng, const SyntheticSpec& spec, bool trigger, bool support) {
  const int P = spec.prompt_len;
  const int n_visual = static_cast<int>(std::lround(spec.modality_mix * P));
  const int start = static_cast<int>(rng() % TaskVocab::filler_count);
  TokenSeq seq;
  seq.ids.resize(static_cast<std::size_t>(P));
  seq.modality.resize(static_cast<std::size_t>(P));
  for (int i = 0; i < P; ++i) {
    const bool visual = i < n_visual;
    const int base = visual ? TaskVocab::visual_filler_begin : TaskVocab::text_filler_begin;
    seq.ids[static_cast<std::size_t>(i)] = base + (start + i) % TaskVocab::filler_count;
    seq.modality[static_cast<std::size_t>(i)] = visual ? Modality::visual : Modality::text;
  }
  std::uniform_int_distribution<int> pos(0, P - 1);
  const int t_pos = pos(rng);
  int s_pos = pos(rng);
  while (s_pos == t_pos) s_pos = pos(rng);
  auto is_visual = [&](int i) { return seq.modality[static_cast<std::size_t>(i)] == Modality::visual; };
  if (trigger) {
    seq.ids[static_cast<std::size_t>(t_pos)] = is_visual(t_pos) ? TaskVocab::visual_trigger : TaskVocab::text_trigger;
  }
  if (support) {
    seq.ids[static_cast<std::size_t>(s_pos)] = is_visual(s_pos) ? TaskVocab::visual_support : TaskVocab::text_support;
  }
  return seq;
}

bool sample_bad(std::mt19937_64& rng, const SyntheticSpec& spec, bool trigger, bool support) {
  const double logit = trigger ? (support ? spec.logit_11 : spec.logit_10) : (support ? spec.logit_01 : spec.logit_00);
  return coin(rng, 1.0 / (1.0 + std::exp(-logit)));
}

PreferenceExample make_example(std::mt19937_64& rng, const SyntheticSpec& spec, const std::string& id) {
  const bool trigger = coin(rng, spec.trigger_rate);
  const bool support = coin(rng, spec.support_rate);
  PreferenceExample ex;
  ex.id = id;
  ex.prompt = make_prompt(rng, spec, trigger, support);
  ex.y_pos = TaskVocab::good_answer();
  ex.y_neg = TaskVocab::bad_answer();
  const bool good_first = coin(rng, 0.5);
  ex.options = good_first ? std::vector<TokenSeq>{ex.y_pos, ex.y_neg} : std::vector<TokenSeq>{ex.y_neg, ex.y_pos};
  ex.gold = good_first ? 0 : 1;
  return ex;
}

TokenSeq lm_sequence(std::mt19937_64& rng, const SyntheticSpec& spec, bool trigger, bool support) {
  TokenSeq seq = make_prompt(rng, spec, trigger, support);
  const TokenSeq answer = sample_bad(rng, spec, trigger, support) ? TaskVocab::bad_answer() : TaskVocab::good_answer();
  for (int id : answer.ids) {
    seq.ids.push_back(id);
    seq.modality.push_back(Modality::text);
  }
  seq.ids.push_back(TaskVocab::eos);
  seq.modality.push_back(Modality::text);
  return seq;
}

}  // namespace

SyntheticCorpus gen_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.n < 1) throw ContractError("gen_synthetic_corpus: n must be >= 1, got " + std::to_string(spec.n));
  if (spec.n_dev < 0 || spec.n_heldout < 0 || spec.n_lm < 0 || spec.n_neutral < 0) {
    throw ContractError("gen_synthetic_corpus: split sizes must be non-negative");
  }
  if (spec.prompt_len < 2) throw ContractError("gen_synthetic_corpus: prompt_len must be >= 2");
  if (!(spec.modality_mix >= 0.0 && spec.modality_mix <= 1.0)) {
    throw ContractError("gen_synthetic_corpus: modality_mix must lie in [0, 1]");
  }
  SyntheticCorpus out;
  {
    auto rng = split_rng(spec.seed, Split::steer);
    for (int i = 0; i < spec.n; ++i) out.examples.push_back(make_example(rng, spec, "steer-" + std::to_string(i)));
  }
  {
    auto rng = split_rng(spec.seed, Split::dev);
    for (int i = 0; i < spec.n_dev; ++i) out.dev.push_back(make_example(rng, spec, "dev-" + std::to_string(i)));
  }
  {
    auto rng = split_rng(spec.seed, Split::heldout);
    for (int i = 0; i < spec.n_heldout; ++i) {
      out.heldout.push_back(make_example(rng, spec, "heldout-" + std::to_string(i)));
    }
  }
  {
    auto rng = split_rng(spec.seed, Split::lm);
    for (int i = 0; i < spec.n_lm; ++i) {
      const bool trigger = coin(rng, spec.lm_trigger_rate);
      const bool support = coin(rng, spec.lm_support_rate);
      out.lm_corpus.push_back(lm_sequence(rng, spec, trigger, support));
    }
  }
  {
    auto rng = split_rng(spec.seed, Split::neutral);
    for (int i = 0; i < spec.n_neutral; ++i) out.neutral.push_back(lm_sequence(rng, spec, false, false));
  }
  return out;
}

ModelConfig synthetic_model_config(const SyntheticSpec& spec, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.vocab_size = TaskVocab::size;
  cfg.dim = 32;
  cfg.layers = 2;
  cfg.heads = 4;
  cfg.ff_mult = 4.0;
  cfg.max_seq = spec.prompt_len + 8;
  cfg.seed = seed;
  return cfg;
}

}  // namespace grains
