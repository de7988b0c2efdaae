#pragma once

// Signed token attribution under a contrastive preference objective, and
// the signed top-k token sets derived from it.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "grains/dataset.hpp"
#include "grains/model.hpp"

namespace grains {

enum class ObjectiveKind { preference, likelihood_pos, likelihood_neg };
enum class AttributionMethod { ig, smoothgrad, vanilla, random };
enum class ModalityFilter { joint, text_only, visual_only };

std::string_view to_string(ObjectiveKind k);
std::string_view to_string(AttributionMethod m);
std::string_view to_string(ModalityFilter f);
ObjectiveKind objective_kind_from_string(std::string_view s);
AttributionMethod attribution_method_from_string(std::string_view s);
ModalityFilter modality_filter_from_string(std::string_view s);

/// log P(y_pos|x) - log P(y_neg|x), or a single likelihood term.
struct AttributionObjective {
  ObjectiveKind kind = ObjectiveKind::preference;
  TokenSeq y_pos;
  std::optional<TokenSeq> y_neg;

  static AttributionObjective from_example(const PreferenceExample& ex,
                                           ObjectiveKind kind = ObjectiveKind::preference);
};

struct ValueAndGrad {
  double value = 0.0;
  Matrix grad;  // same shape as the embeddings
};

/// A differentiable scalar function of a T x d embedding matrix. The model
/// objective is one; tests substitute closed-form scorers.
using EmbeddingScorer = std::function<ValueAndGrad(const Matrix&)>;

double objective_value(const TransformerLM& model, const AttributionObjective& obj, const Matrix& x);
double objective_value(const TransformerLM& model, const AttributionObjective& obj, const EmbeddedInput& x);
ValueAndGrad objective_value_and_grad(const TransformerLM& model, const AttributionObjective& obj,
                                      const Matrix& x);
EmbeddingScorer make_scorer(const TransformerLM& model, AttributionObjective obj);

struct AttributionResult {
  Matrix token_attributions;  // T x d
  std::vector<double> scores;  // per-token component sums
  AttributionMethod method = AttributionMethod::ig;
  int steps = 0;
  double sigma = 0.0;
  int samples = 0;
  BaselineKind baseline_kind = BaselineKind::zero;
  double f_x = 0.0;
  double f_baseline = 0.0;
};

/// Baseline embeddings for an input of `length` tokens: zeros, or the
/// embedding of `mask_id` at every position.
Matrix make_baseline(const TransformerLM& model, Index length, BaselineKind kind, int mask_id);

/// Right-endpoint Riemann approximation with `steps` points
/// baseline + (s/steps)(x - baseline), s = 1..steps.
AttributionResult integrated_gradients(const EmbeddingScorer& f, const Matrix& x, const Matrix& baseline,
                                       int steps, BaselineKind baseline_kind = BaselineKind::zero);
AttributionResult integrated_gradients(const TransformerLM& model, const AttributionObjective& obj,
                                       const Matrix& x, const Matrix& baseline, int steps,
                                       BaselineKind baseline_kind = BaselineKind::zero);

/// Plain gradient at x; scores are the component sums of df/dx_j.
AttributionResult vanilla_gradients(const EmbeddingScorer& f, const Matrix& x);
AttributionResult vanilla_gradients(const TransformerLM& model, const AttributionObjective& obj, const Matrix& x);

/// Mean gradient over `samples` Gaussian perturbations of x with standard
/// deviation `sigma`, drawn from a generator seeded with `seed`.
AttributionResult smoothgrad(const EmbeddingScorer& f, const Matrix& x, int samples, double sigma,
                             std::uint64_t seed);
AttributionResult smoothgrad(const TransformerLM& model, const AttributionObjective& obj, const Matrix& x,
                             int samples, double sigma, std::uint64_t seed);

/// 0.1 x RMS of the token-embedding table.
double default_smoothgrad_sigma(const TransformerLM& model);

struct TopKSets {
  int k = 0;
  std::vector<int> positive;  // token positions, strongest first
  std::vector<int> negative;
  ModalityFilter filter = ModalityFilter::joint;

  bool empty() const { return positive.empty() && negative.empty(); }
};

/// Up to k strictly positive and k strictly negative scores among the tokens
/// admitted by `filter`; ties go to the lower position.
TopKSets select_topk(const AttributionResult& result, int k, ModalityFilter filter, const TokenSeq& seq);
TopKSets select_topk(std::span<const double> scores, int k, ModalityFilter filter, const TokenSeq& seq);

/// k distinct positions drawn uniformly; the first ceil(k/2) form the
/// positive set and the rest the negative set. k is clamped to T.
TopKSets random_selection(const TokenSeq& seq, int k, std::uint64_t seed);

/// x with the listed rows replaced by the matching baseline rows.
Matrix replace_rows(const Matrix& x, std::span<const int> positions, const Matrix& baseline);

struct AblationDelta {
  double before = 0.0;
  double pos_removed = 0.0;
  double neg_removed = 0.0;
};

/// Preference margin on x, on x without I+, and on x without I-.
AblationDelta ablation_delta(const TransformerLM& model, const PreferenceExample& example, const TopKSets& sets,
                             const Matrix& baseline);

}  // namespace grains
