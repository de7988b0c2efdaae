#include "grains/evalharness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

#include "grains/parallel.hpp"
#include "grains/steering.hpp"

namespace grains {

using nlohmann::json;

namespace {

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw ContractError(std::string(what) + ": no examples");
}

EvalReport finish(std::string metric, std::vector<EvalRecord> records) {
  EvalReport r;
  r.metric = std::move(metric);
  r.n = records.size();
  std::size_t hits = 0;
  for (const auto& rec : records) hits += rec.success ? 1 : 0;
  r.value = r.n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(r.n);
  r.records = std::move(records);
  return r;
}

TokenSeq continuation(const TokenSeq& full, std::size_t prompt_len) {
  TokenSeq out;
  out.ids.assign(full.ids.begin() + static_cast<std::ptrdiff_t>(prompt_len), full.ids.end());
  out.modality.assign(full.modality.begin() + static_cast<std::ptrdiff_t>(prompt_len), full.modality.end());
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

int argmax_row(const Matrix& m, Index r) {
  int best = 0;
  for (Index c = 1; c < m.cols(); ++c) {
    if (m(r, c) > m(r, best)) best = static_cast<int>(c);
  }
  return best;
}

Matrix full_logits(const TransformerLM& model, const TokenSeq& seq, const ResidualHook* hook) {
  ForwardOptions opts;
  opts.hook = hook;
  return forward_from_embeddings(model, embed(model, seq), opts).logits.value();
}

}  // namespace

std::string report_json(const EvalReport& report) {
  json j;
  j["metric"] = report.metric;
  j["value"] = report.value;
  j["n"] = report.n;
  json cfg = json::object();
  for (const auto& [k, v] : report.config) cfg[k] = v;
  j["config"] = std::move(cfg);
  json recs = json::array();
  for (const auto& r : report.records) {
    json o;
    o["id"] = r.id;
    o["score_a"] = r.score_a;
    o["score_b"] = r.score_b;
    o["success"] = r.success;
    if (r.predicted) o["predicted"] = *r.predicted;
    recs.push_back(std::move(o));
  }
  j["records"] = std::move(recs);
  return j.dump(2) + "\n";
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "id,score_a,score_b,success,predicted\n";
  for (const auto& r : report.records) {
    os << r.id << ',' << fmt(r.score_a) << ',' << fmt(r.score_b) << ',' << (r.success ? 1 : 0) << ',';
    if (r.predicted) os << *r.predicted;
    os << '\n';
  }
  return os.str();
}

EvalReport win_rate(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                    const ResidualHook* hook, int jobs) {
  require_nonempty(examples.size(), "win_rate");
  std::vector<EvalRecord> recs(examples.size());
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    const auto& ex = examples[i];
    ex.validate(model.config().vocab_size);
    EvalRecord& r = recs[i];
    r.id = ex.id;
    r.score_a = sequence_logprob(model, ex.prompt, ex.y_pos, hook);
    r.score_b = sequence_logprob(model, ex.prompt, ex.y_neg, hook);
    r.success = r.score_a > r.score_b;
  });
  return finish("win_rate", std::move(recs));
}

EvalReport mcq_accuracy(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                        const ResidualHook* hook, int jobs) {
  require_nonempty(examples.size(), "mcq_accuracy");
  for (const auto& ex : examples) {
    if (ex.options.empty() || !ex.gold) {
      throw ContractError("mcq_accuracy: example " + ex.id + " has no options or no gold index");
    }
  }
  std::vector<EvalRecord> recs(examples.size());
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    const auto& ex = examples[i];
    ex.validate(model.config().vocab_size);
    int best = -1;
    double best_score = 0.0;
    double gold_score = 0.0;
    for (std::size_t o = 0; o < ex.options.size(); ++o) {
      const TokenSeq& opt = ex.options[o];
      if (opt.empty()) throw ContractError("mcq_accuracy: example " + ex.id + " has an empty option");
      const double s = sequence_logprob(model, ex.prompt, opt, hook) / static_cast<double>(opt.size());
      if (best < 0 || s > best_score) {
        best = static_cast<int>(o);
        best_score = s;
      }
      if (static_cast<int>(o) == *ex.gold) gold_score = s;
    }
    EvalRecord& r = recs[i];
    r.id = ex.id;
    r.score_a = gold_score;
    r.score_b = best_score;
    r.predicted = best;
    r.success = best == *ex.gold;
  });
  return finish("mcq_accuracy", std::move(recs));
}

double bleu(const TokenSeq& hypothesis, const TokenSeq& reference) {
  if (hypothesis.empty() || reference.empty()) throw ContractError("bleu: empty sequence");
  const auto& h = hypothesis.ids;
  const auto& r = reference.ids;
  double log_p = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<int>, int> ref_counts;
    for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[std::vector<int>(r.begin() + i, r.begin() + i + n)];
    std::map<std::vector<int>, int> hyp_counts;
    for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[std::vector<int>(h.begin() + i, h.begin() + i + n)];
    double matched = 0.0;
    for (const auto& [gram, c] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(c, it->second);
    }
    const double total = h.size() >= n ? static_cast<double>(h.size() - n + 1) : 0.0;
    log_p += std::log((matched + 1.0) / (total + 1.0));
  }
  const double c = static_cast<double>(h.size());
  const double rl = static_cast<double>(r.size());
  const double bp = c > rl ? 1.0 : std::exp(1.0 - rl / c);
  return bp * std::exp(log_p / 4.0);
}

EvalReport bleu_accuracy(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                         const ResidualHook* hook, int jobs) {
  require_nonempty(examples.size(), "bleu_accuracy");
  std::vector<EvalRecord> recs(examples.size());
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    const auto& ex = examples[i];
    ex.validate(model.config().vocab_size);
    const int max_new = static_cast<int>(std::max(ex.y_pos.size(), ex.y_neg.size()));
    const TokenSeq gen = continuation(generate_greedy(model, ex.prompt, max_new, hook), ex.prompt.size());
    EvalRecord& r = recs[i];
    r.id = ex.id;
    if (!gen.empty()) {
      r.score_a = bleu(gen, ex.y_pos);
      r.score_b = bleu(gen, ex.y_neg);
    }
    r.success = r.score_a > r.score_b;
  });
  return finish("bleu_accuracy", std::move(recs));
}

EvalReport generation_switch_rate(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                                  const ResidualHook& hook, int jobs) {
  require_nonempty(examples.size(), "generation_switch_rate");
  std::vector<EvalRecord> recs(examples.size());
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    const auto& ex = examples[i];
    ex.validate(model.config().vocab_size);
    const int max_new = static_cast<int>(std::max(ex.y_pos.size(), ex.y_neg.size()));
    const TokenSeq base = continuation(generate_greedy(model, ex.prompt, max_new, nullptr), ex.prompt.size());
    const TokenSeq steered = continuation(generate_greedy(model, ex.prompt, max_new, &hook), ex.prompt.size());
    auto same = [](const TokenSeq& a, const TokenSeq& b) { return a.ids == b.ids; };
    EvalRecord& r = recs[i];
    r.id = ex.id;
    r.score_a = same(base, ex.y_neg) ? 1.0 : 0.0;
    r.score_b = same(steered, ex.y_pos) ? 1.0 : 0.0;
    r.success = r.score_a == 1.0 && r.score_b == 1.0;
  });
  return finish("generation_switch_rate", std::move(recs));
}

EvalReport next_token_agreement(const TransformerLM& model, const std::vector<TokenSeq>& corpus,
                                const ResidualHook& hook, int jobs) {
  require_nonempty(corpus.size(), "next_token_agreement");
  std::vector<std::vector<EvalRecord>> per_seq(corpus.size());
  parallel_for(corpus.size(), jobs, [&](std::size_t i) {
    const TokenSeq& seq = corpus[i];
    seq.validate(model.config().vocab_size);
    const Matrix base = full_logits(model, seq, nullptr);
    const Matrix steered = full_logits(model, seq, &hook);
    for (Index t = 0; t < base.rows(); ++t) {
      EvalRecord r;
      r.id = std::to_string(i) + ":" + std::to_string(t);
      const int a = argmax_row(base, t);
      const int b = argmax_row(steered, t);
      r.score_a = a;
      r.score_b = b;
      r.predicted = b;
      r.success = a == b;
      per_seq[i].push_back(std::move(r));
    }
  });
  std::vector<EvalRecord> recs;
  for (auto& v : per_seq) std::move(v.begin(), v.end(), std::back_inserter(recs));
  return finish("next_token_agreement", std::move(recs));
}

std::vector<AblationCurveRow> ablation_curve_report(const TransformerLM& model,
                                                    const std::vector<PreferenceExample>& examples,
                                                    const std::vector<int>& k_list,
                                                    const AblationCurveConfig& config) {
  if (k_list.empty()) throw ContractError("ablation_curve_report: k_list is empty");
  for (int k : k_list) {
    if (k < 0) throw ContractError("ablation_curve_report: negative k " + std::to_string(k));
  }
  require_nonempty(examples.size(), "ablation_curve_report");
  const double sigma = default_smoothgrad_sigma(model);
  // diffs[i][j] = {neg_removed - before, pos_removed - before} for k_list[j]
  std::vector<std::vector<std::pair<double, double>>> diffs(examples.size());
  parallel_for(examples.size(), config.jobs, [&](std::size_t i) {
    const PreferenceExample& ex = examples[i];
    ex.validate(model.config().vocab_size);
    const Matrix x = embed(model, ex.prompt).embeddings;
    const Matrix baseline = make_baseline(model, x.rows(), config.baseline, config.mask_id);
    const std::uint64_t seed = example_seed(config.seed, ex.id);
    std::optional<AttributionResult> attr;
    if (config.method != AttributionMethod::random) {
      const AttributionObjective obj = AttributionObjective::from_example(ex);
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
    }
    for (int k : k_list) {
      if (k == 0) {
        diffs[i].emplace_back(0.0, 0.0);
        continue;
      }
      const TopKSets sets = attr ? select_topk(*attr, k, config.filter, ex.prompt) : random_selection(ex.prompt, k, seed);
      const AblationDelta d = ablation_delta(model, ex, sets, baseline);
      diffs[i].emplace_back(d.neg_removed - d.before, d.pos_removed - d.before);
    }
  });

  std::vector<AblationCurveRow> rows;
  const double n = static_cast<double>(examples.size());
  for (std::size_t j = 0; j < k_list.size(); ++j) {
    AblationCurveRow row;
    row.k = k_list[j];
    row.n = examples.size();
    double sn = 0.0, sp = 0.0;
    for (const auto& d : diffs) {
      sn += d[j].first;
      sp += d[j].second;
    }
    row.mean_neg_removed = sn / n;
    row.mean_pos_removed = sp / n;
    if (examples.size() > 1) {
      double vn = 0.0, vp = 0.0;
      for (const auto& d : diffs) {
        vn += (d[j].first - row.mean_neg_removed) * (d[j].first - row.mean_neg_removed);
        vp += (d[j].second - row.mean_pos_removed) * (d[j].second - row.mean_pos_removed);
      }
      row.stderr_neg_removed = std::sqrt(vn / (n - 1.0) / n);
      row.stderr_pos_removed = std::sqrt(vp / (n - 1.0) / n);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_curve_csv(const std::vector<AblationCurveRow>& rows) {
  std::ostringstream os;
  os << "k,n,mean_neg_removed,stderr_neg_removed,mean_pos_removed,stderr_pos_removed\n";
  for (const auto& r : rows) {
    os << r.k << ',' << r.n << ',' << fmt(r.mean_neg_removed) << ',' << fmt(r.stderr_neg_removed) << ','
       << fmt(r.mean_pos_removed) << ',' << fmt(r.stderr_pos_removed) << '\n';
  }
  return os.str();
}

}  // namespace grains
