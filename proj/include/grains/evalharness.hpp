#pragma once

// Synthetic trigger task and the evaluation metrics run on it.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "grains/attribution.hpp"
#include "grains/dataset.hpp"
#include "grains/model.hpp"

namespace grains {

/// Fixed vocabulary of the trigger task. Ids at or above `visual_begin` are
/// the reserved visual range.
struct TaskVocab {
  static constexpr int eos = 0;
  static constexpr int mask = 1;
  static constexpr int good[3] = {2, 3, 4};
  static constexpr int bad[3] = {5, 6, 7};
  static constexpr int text_trigger = 8;
  static constexpr int text_support = 9;
  static constexpr int text_filler_begin = 10;
  static constexpr int visual_begin = 18;
  static constexpr int visual_trigger = 18;
  static constexpr int visual_support = 19;
  static constexpr int visual_filler_begin = 20;
  static constexpr int filler_count = 8;
  static constexpr int size = 28;

  static bool is_trigger(int id) { return id == text_trigger || id == visual_trigger; }
  static bool is_support(int id) { return id == text_support || id == visual_support; }
  static TokenSeq good_answer();
  static TokenSeq bad_answer();
};

/// Generator settings. A trigger token flips the answer from the good
/// pattern to the bad one; a support token pulls it back part of the way.
/// LM-corpus answers are bad with probability sigmoid(logit_ts) where t, s
/// mark trigger and support presence.
struct SyntheticSpec {
  int n = 50;            // steering examples
  int n_dev = 100;       // tuning examples
  int n_heldout = 200;   // evaluation examples
  int n_lm = 4000;       // LM training sequences
  int n_neutral = 200;   // trigger-free sequences
  double trigger_rate = 1.0;   // preference examples containing a trigger
  double support_rate = 1.0;   // preference examples containing a support token
  double lm_trigger_rate = 0.5;
  double lm_support_rate = 0.5;
  double modality_mix = 0.5;   // share of prompt positions that are visual
  int prompt_len = 24;
  double logit_00 = -2.0;
  double logit_10 = 6.0;
  double logit_01 = -2.5;
  double logit_11 = 1.0;
  std::uint64_t seed = 0;
};

struct SyntheticCorpus {
  std::vector<PreferenceExample> examples;  // steering split
  std::vector<PreferenceExample> dev;
  std::vector<PreferenceExample> heldout;
  std::vector<TokenSeq> lm_corpus;          // prompt + answer + eos
  std::vector<TokenSeq> neutral;            // no trigger or support tokens
};

SyntheticCorpus gen_synthetic_corpus(const SyntheticSpec& spec);

/// Model configuration sized for the trigger task.
ModelConfig synthetic_model_config(const SyntheticSpec& spec, std::uint64_t seed);

struct EvalRecord {
  std::string id;
  double score_a = 0.0;  // metric-specific: logprob / BLEU of the preferred side
  double score_b = 0.0;
  bool success = false;
  std::optional<int> predicted;
};

struct EvalReport {
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::vector<EvalRecord> records;
  std::vector<std::pair<std::string, std::string>> config;
};

std::string report_json(const EvalReport& report);
std::string report_csv(const EvalReport& report);

/// Share of examples with log P(y_pos) strictly above log P(y_neg).
EvalReport win_rate(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                    const ResidualHook* hook = nullptr, int jobs = 1);

/// Option with the highest length-normalised log-probability (lowest index
/// on ties) compared with the gold index.
EvalReport mcq_accuracy(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                        const ResidualHook* hook = nullptr, int jobs = 1);

/// BLEU-4 with add-one smoothing on every n-gram precision and the standard
/// brevity penalty.
double bleu(const TokenSeq& hypothesis, const TokenSeq& reference);

/// Share of greedy generations closer (by BLEU) to y_pos than to y_neg.
EvalReport bleu_accuracy(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                         const ResidualHook* hook = nullptr, int jobs = 1);

/// Share of examples whose unhooked greedy continuation equals y_neg and
/// whose hooked continuation equals y_pos.
EvalReport generation_switch_rate(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                                  const ResidualHook& hook, int jobs = 1);

/// Share of next-token positions where the hooked argmax matches the
/// unhooked argmax, over whole sequences.
EvalReport next_token_agreement(const TransformerLM& model, const std::vector<TokenSeq>& corpus,
                                const ResidualHook& hook, int jobs = 1);

struct AblationCurveRow {
  int k = 0;
  std::size_t n = 0;
  double mean_neg_removed = 0.0;  // mean of (delta after removing I-) - delta before
  double stderr_neg_removed = 0.0;
  double mean_pos_removed = 0.0;
  double stderr_pos_removed = 0.0;
};

struct AblationCurveConfig {
  AttributionMethod method = AttributionMethod::ig;
  int steps = 5;
  BaselineKind baseline = BaselineKind::zero;
  int mask_id = TaskVocab::mask;
  ModalityFilter filter = ModalityFilter::joint;
  int smoothgrad_samples = 8;
  std::uint64_t seed = 0;
  int jobs = 1;
};

/// Removal-effect table over `k_list`. Attribution is computed once per
/// example and reused for every k.
std::vector<AblationCurveRow> ablation_curve_report(const TransformerLM& model,
                                                    const std::vector<PreferenceExample>& examples,
                                                    const std::vector<int>& k_list,
                                                    const AblationCurveConfig& config);
std::string ablation_curve_csv(const std::vector<AblationCurveRow>& rows);

}  // namespace grains
