#include "grains/steering.hpp"

#include <cmath>

#include "grains/binary_io.hpp"
#include "grains/parallel.hpp"

namespace grains {

std::string_view to_string(PcaMode m) { return m == PcaMode::uncentered ? "uncentered" : "centered"; }

std::string_view to_string(PositionPolicy p) {
  return p == PositionPolicy::all_positions ? "all_positions" : "generated_only";
}

PcaMode pca_mode_from_string(std::string_view s) {
  if (s == "uncentered") return PcaMode::uncentered;
  if (s == "centered") return PcaMode::centered;
  throw ContractError("unknown pca mode \"" + std::string(s) + "\"");
}

PositionPolicy position_policy_from_string(std::string_view s) {
  if (s == "all_positions" || s == "all") return PositionPolicy::all_positions;
  if (s == "generated_only" || s == "generated") return PositionPolicy::generated_only;
  throw ContractError("unknown position policy \"" + std::string(s) + "\"");
}

Var64 steer_rows(Var64 h, const RowVector& v, double lambda, Index first_row) {
  const Matrix& hv = h.value();
  if (v.size() != hv.cols()) {
    throw DimensionError("steer_rows: vector of length " + std::to_string(v.size()) + " for residual " +
                         shape_string(hv));
  }
  if (lambda == 0.0 || first_row >= hv.rows()) return h;
  const Index start = std::max<Index>(first_row, 0);
  Matrix out = hv;
  for (Index r = start; r < hv.rows(); ++r) out.row(r) = apply_steering(hv.row(r), v, lambda);
  return h.tape->record(std::move(out), {h}, [h, v, lambda, start](Tape64& t, const Matrix& g) {
    const Matrix& hv = t.value(h);
    Matrix gh = g;
    for (Index r = start; r < hv.rows(); ++r) {
      const RowVector hr = hv.row(r);
      const RowVector u = hr + lambda * v;
      const double s = hr.norm();
      const double n = u.norm();
      if (s == 0.0 || n == 0.0) continue;
      const double gu = g.row(r).dot(u);
      gh.row(r) = g.row(r) * (s / n) + hr * (gu / (s * n)) - u * (gu * s / (n * n * n));
    }
    t.accumulate(h, gh);
  });
}

ContrastiveInputs build_contrastive_inputs(const Matrix& x, const TopKSets& sets, const Matrix& baseline) {
  return ContrastiveInputs{replace_rows(x, sets.positive, baseline), replace_rows(x, sets.negative, baseline)};
}

std::vector<DeltaRecord> extract_deltas(const TransformerLM& model, const Matrix& x,
                                        const ContrastiveInputs& masked, const std::string& example_id) {
  if (masked.without_positive.rows() != x.rows() || masked.without_negative.rows() != x.rows() ||
      masked.without_positive.cols() != x.cols() || masked.without_negative.cols() != x.cols()) {
    throw ContractError("extract_deltas: masked inputs " + shape_string(masked.without_positive) + "/" +
                        shape_string(masked.without_negative) + " do not match input " + shape_string(x));
  }
  auto trace_of = [&model](const Matrix& emb) {
    ForwardOptions opts;
    opts.capture = true;
    EmbeddedInput in{emb, std::nullopt, BaselineKind::zero};
    return std::move(*forward_from_embeddings(model, in, opts).trace);
  };
  const HiddenTrace full = trace_of(x);
  const HiddenTrace no_pos = trace_of(masked.without_positive);
  const HiddenTrace no_neg = trace_of(masked.without_negative);
  const Index last = x.rows() - 1;
  std::vector<DeltaRecord> out;
  out.reserve(full.layers.size());
  for (std::size_t l = 0; l < full.layers.size(); ++l) {
    DeltaRecord rec;
    rec.example_id = example_id;
    rec.layer = static_cast<int>(l);
    rec.positive = (full.layers[l].row(last) - no_pos.layers[l].row(last)).transpose();
    rec.negative = (full.layers[l].row(last) - no_neg.layers[l].row(last)).transpose();
    out.push_back(std::move(rec));
  }
  return out;
}

Eigen::VectorXd pca_first(const Matrix& deltas, PcaMode mode) {
  if (deltas.rows() < 1 || deltas.cols() < 1) throw DegenerateError("pca_first: no delta vectors");
  if (!deltas.allFinite()) throw DegenerateError("pca_first: non-finite delta");
  if (deltas.isZero(0.0)) throw DegenerateError("pca_first: every delta is zero");
  const Eigen::RowVectorXd mean = deltas.colwise().mean();
  Matrix a = deltas;
  if (mode == PcaMode::centered) {
    a.rowwise() -= mean;
    if (a.isZero(0.0)) throw DegenerateError("pca_first: zero variance after centering");
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinV);
  Eigen::VectorXd v = svd.matrixV().col(0);
  v.normalize();
  const double align = mean.dot(v.transpose());
  if (align < 0.0) {
    v = -v;
  } else if (align == 0.0) {
    Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
  }
  return v;
}

const LayerVectors& SteeringVectorSet::layer(int l) const {
  for (const auto& lv : layers) {
    if (lv.layer == l) return lv;
  }
  throw IndexError("steering vectors have no layer " + std::to_string(l));
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t example_seed(std::uint64_t root, const std::string& id) {
  return splitmix64(root ^ io::fnv1a(id));
}

std::vector<std::optional<std::vector<DeltaRecord>>> collect_deltas(const TransformerLM& model,
                                                                    const std::vector<PreferenceExample>& examples,
                                                                    const BuildConfig& config) {
  if (config.k < 1) throw ContractError("build: k must be >= 1");
  const double sigma = config.smoothgrad_sigma.value_or(default_smoothgrad_sigma(model));
  std::vector<std::optional<std::vector<DeltaRecord>>> out(examples.size());
  parallel_for(examples.size(), config.jobs, [&](std::size_t i) {
    const PreferenceExample& ex = examples[i];
    ex.validate(model.config().vocab_size);
    const Matrix x = embed(model, ex.prompt).embeddings;
    const Matrix baseline = make_baseline(model, x.rows(), config.baseline, config.mask_id);
    const std::uint64_t seed = example_seed(config.seed, ex.id);
    TopKSets sets;
    if (config.method == AttributionMethod::random) {
      sets = random_selection(ex.prompt, config.k, seed);
    } else {
      const AttributionObjective obj = AttributionObjective::from_example(ex, config.objective);
      AttributionResult attr;
      switch (config.method) {
        case AttributionMethod::ig:
          attr = integrated_gradients(model, obj, x, baseline, config.steps, config.baseline);
          break;
        case AttributionMethod::vanilla:
          attr = vanilla_gradients(model, obj, x);
          break;
        case AttributionMethod::smoothgrad:
          attr = smoothgrad(model, obj, x, config.smoothgrad_samples, sigma, seed);
          break;
        case AttributionMethod::random:
          break;
      }
      sets = select_topk(attr, config.k, config.filter, ex.prompt);
    }
    if (sets.empty()) return;
    out[i] = extract_deltas(model, x, build_contrastive_inputs(x, sets, baseline), ex.id);
  });
  return out;
}

SteeringVectorSet build_vectors(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                                const BuildConfig& config) {
  if (examples.empty()) throw BuildError("build_vectors: empty dataset");
  const auto deltas = collect_deltas(model, examples, config);

  SteeringVectorSet out;
  out.dim = model.config().dim;
  out.pca_mode = config.pca_mode;
  Provenance& p = out.provenance;
  p.dataset_hash = dataset_hash(examples);
  p.method = config.method;
  p.k = config.k;
  p.steps = config.steps;
  p.baseline = config.baseline;
  p.objective = config.objective;
  p.filter = config.filter;
  p.seed = config.seed;
  p.n_examples = static_cast<int>(examples.size());

  std::vector<const std::vector<DeltaRecord>*> used;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (deltas[i]) {
      used.push_back(&*deltas[i]);
    } else {
      p.skipped.push_back(examples[i].id);
    }
  }
  if (used.empty()) throw BuildError("build_vectors: every example had empty top-k sets");

  const int L = model.config().layers;
  const Index d = model.config().dim;
  const Index n = static_cast<Index>(used.size());
  for (int l = 0; l < L; ++l) {
    Matrix pos(n, d), neg(n, d);
    for (Index r = 0; r < n; ++r) {
      const DeltaRecord& rec = (*used[static_cast<std::size_t>(r)])[static_cast<std::size_t>(l)];
      pos.row(r) = rec.positive.transpose();
      neg.row(r) = rec.negative.transpose();
    }
    LayerVectors lv;
    lv.layer = l;
    try {
      lv.positive = pca_first(pos, config.pca_mode);
      lv.negative = pca_first(neg, config.pca_mode);
    } catch (const DegenerateError& e) {
      throw BuildError("build_vectors: layer " + std::to_string(l) + ": " + e.what());
    }
    lv.combined = lv.positive - lv.negative;
    out.layers.push_back(std::move(lv));
  }
  return out;
}

SteeringHook::SteeringHook(const SteeringVectorSet& vectors, double lambda, std::vector<int> layer_set,
                           PositionPolicy policy)
    : dim_(vectors.dim), lambda_(lambda), policy_(policy) {
  int max_layer = -1;
  for (const auto& lv : vectors.layers) max_layer = std::max(max_layer, lv.layer);
  per_layer_.resize(static_cast<std::size_t>(max_layer + 1));
  if (layer_set.empty()) {
    for (const auto& lv : vectors.layers) layer_set.push_back(lv.layer);
  }
  for (int l : layer_set) {
    const LayerVectors& lv = vectors.layer(l);
    if (lv.combined.size() != dim_) {
      throw DimensionError("SteeringHook: layer " + std::to_string(l) + " vector has length " +
                           std::to_string(lv.combined.size()) + ", expected " + std::to_string(dim_));
    }
    per_layer_[static_cast<std::size_t>(l)] = lv.combined.transpose();
  }
}

Var64 SteeringHook::apply(Var64 residual, int layer, Index prompt_len) const {
  if (layer < 0 || static_cast<std::size_t>(layer) >= per_layer_.size() || !per_layer_[static_cast<std::size_t>(layer)]) {
    return residual;
  }
  const Index first = policy_ == PositionPolicy::generated_only ? prompt_len : 0;
  return steer_rows(residual, *per_layer_[static_cast<std::size_t>(layer)], lambda_, first);
}

}  // namespace grains
