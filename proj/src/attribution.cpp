#include "grains/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace grains {

std::string_view to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::preference: return "preference";
    case ObjectiveKind::likelihood_pos: return "likelihood_pos";
    case ObjectiveKind::likelihood_neg: return "likelihood_neg";
  }
  return "?";
}

std::string_view to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::ig: return "ig";
    case AttributionMethod::smoothgrad: return "smoothgrad";
    case AttributionMethod::vanilla: return "vanilla";
    case AttributionMethod::random: return "random";
  }
  return "?";
}

std::string_view to_string(ModalityFilter f) {
  switch (f) {
    case ModalityFilter::joint: return "joint";
    case ModalityFilter::text_only: return "text_only";
    case ModalityFilter::visual_only: return "visual_only";
  }
  return "?";
}

ObjectiveKind objective_kind_from_string(std::string_view s) {
  if (s == "preference") return ObjectiveKind::preference;
  if (s == "likelihood_pos" || s == "likelihood") return ObjectiveKind::likelihood_pos;
  if (s == "likelihood_neg") return ObjectiveKind::likelihood_neg;
  throw ContractError("unknown objective \"" + std::string(s) + "\"");
}

AttributionMethod attribution_method_from_string(std::string_view s) {
  if (s == "ig") return AttributionMethod::ig;
  if (s == "smoothgrad") return AttributionMethod::smoothgrad;
  if (s == "vanilla") return AttributionMethod::vanilla;
  if (s == "random") return AttributionMethod::random;
  throw ContractError("unknown attribution method \"" + std::string(s) + "\"");
}

ModalityFilter modality_filter_from_string(std::string_view s) {
  if (s == "joint") return ModalityFilter::joint;
  if (s == "text_only" || s == "text") return ModalityFilter::text_only;
  if (s == "visual_only" || s == "visual") return ModalityFilter::visual_only;
  throw ContractError("unknown modality filter \"" + std::string(s) + "\"");
}

AttributionObjective AttributionObjective::from_example(const PreferenceExample& ex, ObjectiveKind kind) {
  AttributionObjective obj;
  obj.kind = kind;
  obj.y_pos = ex.y_pos;
  obj.y_neg = ex.y_neg;
  return obj;
}

namespace {

void check_objective(const AttributionObjective& obj) {
  if (obj.kind != ObjectiveKind::likelihood_pos && !obj.y_neg) {
    throw ContractError(std::string("objective ") + std::string(to_string(obj.kind)) + " requires y_neg");
  }
}

Var64 objective_on_tape(Tape64& tape, const TransformerLM& model, const BoundParams& params,
                        const AttributionObjective& obj, Var64 x) {
  check_objective(obj);
  switch (obj.kind) {
    case ObjectiveKind::likelihood_pos:
      return sequence_logprob(tape, model, params, x, obj.y_pos, nullptr);
    case ObjectiveKind::likelihood_neg:
      return sequence_logprob(tape, model, params, x, *obj.y_neg, nullptr);
    case ObjectiveKind::preference: {
      Var64 lp_pos = sequence_logprob(tape, model, params, x, obj.y_pos, nullptr);
      Var64 lp_neg = sequence_logprob(tape, model, params, x, *obj.y_neg, nullptr);
      return sub(lp_pos, lp_neg);
    }
  }
  throw ContractError("unreachable objective kind");
}

std::vector<double> row_sums(const Matrix& m) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) out[static_cast<std::size_t>(r)] = m.row(r).sum();
  return out;
}

}  // namespace

double objective_value(const TransformerLM& model, const AttributionObjective& obj, const Matrix& x) {
  Tape64 tape;
  BoundParams params = bind_parameters(tape, model, false);
  return objective_on_tape(tape, model, params, obj, tape.constant(x)).value()(0, 0);
}

double objective_value(const TransformerLM& model, const AttributionObjective& obj, const EmbeddedInput& x) {
  return objective_value(model, obj, x.embeddings);
}

ValueAndGrad objective_value_and_grad(const TransformerLM& model, const AttributionObjective& obj,
                                      const Matrix& x) {
  Tape64 tape;
  BoundParams params = bind_parameters(tape, model, false);
  Var64 input = tape.leaf(x, true);
  Var64 f = objective_on_tape(tape, model, params, obj, input);
  ValueAndGrad out;
  out.value = f.value()(0, 0);
  out.grad = tape.backward(f).take(input);
  return out;
}

EmbeddingScorer make_scorer(const TransformerLM& model, AttributionObjective obj) {
  check_objective(obj);
  return [&model, obj = std::move(obj)](const Matrix& x) { return objective_value_and_grad(model, obj, x); };
}

Matrix make_baseline(const TransformerLM& model, Index length, BaselineKind kind, int mask_id) {
  const Index d = model.config().dim;
  if (kind == BaselineKind::zero) return Matrix::Zero(length, d);
  if (mask_id < 0 || mask_id >= model.config().vocab_size) {
    throw IndexError("mask id " + std::to_string(mask_id) + " outside vocabulary");
  }
  return model.param(model.tok_emb()).row(mask_id).replicate(length, 1);
}

AttributionResult integrated_gradients(const EmbeddingScorer& f, const Matrix& x, const Matrix& baseline,
                                       int steps, BaselineKind baseline_kind) {
  if (steps < 1) throw ContractError("integrated_gradients: steps must be >= 1");
  if (x.rows() != baseline.rows() || x.cols() != baseline.cols()) {
    throw DimensionError("integrated_gradients: input " + shape_string(x) + " vs baseline " +
                         shape_string(baseline));
  }
  const Matrix diff = x - baseline;
  Matrix grad_sum = Matrix::Zero(x.rows(), x.cols());
  AttributionResult out;
  for (int s = 1; s <= steps; ++s) {
    ValueAndGrad vg;
    if (s == steps) {
      vg = f(x);
      out.f_x = vg.value;
    } else {
      const double alpha = static_cast<double>(s) / static_cast<double>(steps);
      vg = f(baseline + alpha * diff);
    }
    grad_sum += vg.grad;
  }
  out.f_baseline = f(baseline).value;
  out.token_attributions = diff.cwiseProduct(grad_sum) / static_cast<double>(steps);
  out.scores = row_sums(out.token_attributions);
  out.method = AttributionMethod::ig;
  out.steps = steps;
  out.baseline_kind = baseline_kind;
  return out;
}

AttributionResult integrated_gradients(const TransformerLM& model, const AttributionObjective& obj,
                                       const Matrix& x, const Matrix& baseline, int steps,
                                       BaselineKind baseline_kind) {
  return integrated_gradients(make_scorer(model, obj), x, baseline, steps, baseline_kind);
}

AttributionResult vanilla_gradients(const EmbeddingScorer& f, const Matrix& x) {
  ValueAndGrad vg = f(x);
  AttributionResult out;
  out.f_x = vg.value;
  out.token_attributions = std::move(vg.grad);
  out.scores = row_sums(out.token_attributions);
  out.method = AttributionMethod::vanilla;
  return out;
}

AttributionResult vanilla_gradients(const TransformerLM& model, const AttributionObjective& obj, const Matrix& x) {
  return vanilla_gradients(make_scorer(model, obj), x);
}

AttributionResult smoothgrad(const EmbeddingScorer& f, const Matrix& x, int samples, double sigma,
                             std::uint64_t seed) {
  if (samples < 1) throw ContractError("smoothgrad: samples must be >= 1");
  if (!(sigma >= 0.0)) throw ContractError("smoothgrad: sigma must be >= 0");
  AttributionResult out;
  if (sigma == 0.0) {
    // Every sample sits at x, so the mean is the plain gradient.
    out = vanilla_gradients(f, x);
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    Matrix grad_sum = Matrix::Zero(x.rows(), x.cols());
    for (int i = 0; i < samples; ++i) {
      Matrix point = x;
      for (Index k = 0; k < point.size(); ++k) point.data()[k] += noise(rng);
      grad_sum += f(point).grad;
    }
    out.token_attributions = grad_sum / static_cast<double>(samples);
    out.scores = row_sums(out.token_attributions);
    out.f_x = f(x).value;
  }
  out.method = AttributionMethod::smoothgrad;
  out.sigma = sigma;
  out.samples = samples;
  return out;
}

AttributionResult smoothgrad(const TransformerLM& model, const AttributionObjective& obj, const Matrix& x,
                             int samples, double sigma, std::uint64_t seed) {
  return smoothgrad(make_scorer(model, obj), x, samples, sigma, seed);
}

double default_smoothgrad_sigma(const TransformerLM& model) {
  const Matrix& table = model.param(model.tok_emb());
  return 0.1 * std::sqrt(table.squaredNorm() / static_cast<double>(table.size()));
}

namespace {

bool admitted(ModalityFilter filter, Modality m) {
  switch (filter) {
    case ModalityFilter::joint: return true;
    case ModalityFilter::text_only: return m == Modality::text;
    case ModalityFilter::visual_only: return m == Modality::visual;
  }
  return false;
}

}  // namespace

TopKSets select_topk(std::span<const double> scores, int k, ModalityFilter filter, const TokenSeq& seq) {
  if (k < 1) throw ContractError("select_topk: k must be >= 1");
  if (scores.size() != seq.size() || seq.modality.size() != seq.size()) {
    throw DimensionError("select_topk: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(seq.size()) + " tokens");
  }
  std::vector<int> pos, neg;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (!admitted(filter, seq.modality[j])) continue;
    if (scores[j] > 0.0) pos.push_back(static_cast<int>(j));
    if (scores[j] < 0.0) neg.push_back(static_cast<int>(j));
  }
  auto by = [&scores](bool descending) {
    return [&scores, descending](int a, int b) {
      const double sa = scores[static_cast<std::size_t>(a)];
      const double sb = scores[static_cast<std::size_t>(b)];
      if (sa != sb) return descending ? sa > sb : sa < sb;
      return a < b;
    };
  };
  const auto take = [k](std::vector<int>& v, auto cmp) {
    const auto n = std::min<std::size_t>(v.size(), static_cast<std::size_t>(k));
    std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n), v.end(), cmp);
    v.resize(n);
  };
  take(pos, by(true));
  take(neg, by(false));
  TopKSets out;
  out.k = k;
  out.positive = std::move(pos);
  out.negative = std::move(neg);
  out.filter = filter;
  return out;
}

TopKSets select_topk(const AttributionResult& result, int k, ModalityFilter filter, const TokenSeq& seq) {
  return select_topk(std::span<const double>(result.scores), k, filter, seq);
}

TopKSets random_selection(const TokenSeq& seq, int k, std::uint64_t seed) {
  if (k < 0) throw ContractError("random_selection: k must be >= 0");
  const std::size_t T = seq.size();
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(k), T);
  std::vector<int> idx(T);
  for (std::size_t i = 0; i < T; ++i) idx[i] = static_cast<int>(i);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, T - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  const std::size_t n_pos = (n + 1) / 2;
  TopKSets out;
  out.k = k;
  out.positive.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_pos));
  out.negative.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_pos), idx.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

Matrix replace_rows(const Matrix& x, std::span<const int> positions, const Matrix& baseline) {
  if (x.rows() != baseline.rows() || x.cols() != baseline.cols()) {
    throw DimensionError("replace_rows: input " + shape_string(x) + " vs baseline " + shape_string(baseline));
  }
  Matrix out = x;
  for (int p : positions) {
    if (p < 0 || p >= x.rows()) {
      throw IndexError("replace_rows: position " + std::to_string(p) + " outside [0, " +
                       std::to_string(x.rows()) + ")");
    }
    out.row(p) = baseline.row(p);
  }
  return out;
}

AblationDelta ablation_delta(const TransformerLM& model, const PreferenceExample& example, const TopKSets& sets,
                             const Matrix& baseline) {
  const AttributionObjective obj = AttributionObjective::from_example(example);
  const Matrix x = embed(model, example.prompt).embeddings;
  AblationDelta out;
  out.before = objective_value(model, obj, x);
  out.pos_removed = objective_value(model, obj, replace_rows(x, sets.positive, baseline));
  out.neg_removed = objective_value(model, obj, replace_rows(x, sets.negative, baseline));
  return out;
}

}  // namespace grains
