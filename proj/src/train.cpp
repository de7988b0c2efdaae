#include <cmath>
#include <numeric>
#include <random>

#include "grains/model.hpp"
#include "grains/parallel.hpp"

namespace grains {

namespace {

// Sum of next-token log-probabilities over one sequence, on the tape.
Var64 sequence_token_logprob(Tape64& tape, const TransformerLM& model, const BoundParams& params,
                             const TokenSeq& seq) {
  const std::span<const int> inputs(seq.ids.data(), seq.ids.size() - 1);
  Var64 emb = gather_rows(params[model.tok_emb()], inputs);
  Var64 logits = forward_logits(tape, model, params, emb, ForwardOptions{}, nullptr);
  Var64 logp = log_softmax_rows(logits);
  std::vector<std::pair<Index, Index>> entries;
  entries.reserve(inputs.size());
  for (std::size_t t = 0; t + 1 < seq.ids.size(); ++t) {
    entries.emplace_back(static_cast<Index>(t), seq.ids[t + 1]);
  }
  return select_sum<double>(logp, entries);
}

void check_corpus(const TransformerLM& model, const std::vector<TokenSeq>& corpus) {
  if (corpus.empty()) throw ContractError("train_toy: empty corpus");
  for (const auto& s : corpus) {
    if (s.size() < 2) throw ContractError("train_toy: every sequence needs at least two tokens");
    s.validate(model.config().vocab_size);
    if (static_cast<int>(s.size()) - 1 > model.config().max_seq) {
      throw LengthError("train_toy: sequence of length " + std::to_string(s.size()) +
                        " exceeds max_seq + 1");
    }
  }
}

class BatchSampler {
 public:
  BatchSampler(std::size_t corpus_size, int batch_size, std::uint64_t seed)
      : order_(corpus_size), batch_(static_cast<std::size_t>(std::max(batch_size, 1))), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    full_batch_ = batch_ >= corpus_size;
    if (!full_batch_) reshuffle();
  }

  std::vector<std::size_t> next() {
    if (full_batch_) return order_;
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    // Fisher-Yates with an explicit index draw per swap.
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order_[i - 1], order_[pick(rng_)]);
    }
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
  bool full_batch_ = false;
};

}  // namespace

double corpus_loss(const TransformerLM& model, const std::vector<TokenSeq>& corpus) {
  check_corpus(model, corpus);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    Tape64 tape;
    BoundParams params = bind_parameters(tape, model, false);
    total += sequence_token_logprob(tape, model, params, seq).value()(0, 0);
    count += seq.size() - 1;
  }
  return -total / static_cast<double>(count);
}

TrainReport train_toy(TransformerLM& model, const std::vector<TokenSeq>& corpus, const TrainConfig& config) {
  check_corpus(model, corpus);
  if (config.steps < 0) throw ContractError("train_toy: negative step count");

  const std::size_t n_params = model.num_params();
  std::vector<Matrix> m1(n_params), m2(n_params);
  for (std::size_t i = 0; i < n_params; ++i) {
    m1[i] = Matrix::Zero(model.param(i).rows(), model.param(i).cols());
    m2[i] = m1[i];
  }

  BatchSampler sampler(corpus.size(), config.batch_size, config.seed);
  TrainReport report;
  report.loss_curve.reserve(static_cast<std::size_t>(config.steps));

  for (int step = 0; step < config.steps; ++step) {
    const std::vector<std::size_t> batch = sampler.next();
    std::size_t tokens = 0;
    for (std::size_t idx : batch) tokens += corpus[idx].size() - 1;
    const double inv_tokens = 1.0 / static_cast<double>(tokens);

    std::vector<std::vector<Matrix>> per_seq(batch.size());
    std::vector<double> per_seq_loss(batch.size(), 0.0);
    parallel_for(batch.size(), config.jobs, [&](std::size_t b) {
      Tape64 tape;
      BoundParams params = bind_parameters(tape, model, true);
      Var64 lp = sequence_token_logprob(tape, model, params, corpus[batch[b]]);
      Var64 loss = scale(lp, -inv_tokens);
      per_seq_loss[b] = loss.value()(0, 0);
      GradientMap<double> grads = tape.backward(loss);
      per_seq[b].reserve(n_params);
      for (std::size_t i = 0; i < n_params; ++i) per_seq[b].push_back(grads.take(params[i]));
    });

    double loss = 0.0;
    for (double l : per_seq_loss) loss += l;
    if (!std::isfinite(loss)) throw TrainingError("training diverged: loss is not finite", static_cast<std::size_t>(step));
    report.loss_curve.push_back(loss);

    std::vector<Matrix> grad = std::move(per_seq[0]);
    for (std::size_t b = 1; b < per_seq.size(); ++b) {
      for (std::size_t i = 0; i < n_params; ++i) grad[i] += per_seq[b][i];
    }
    double sq = 0.0;
    for (const auto& g : grad) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingError("training diverged: gradient is not finite", static_cast<std::size_t>(step));
    const double clip = (config.grad_clip > 0.0 && norm > config.grad_clip) ? config.grad_clip / norm : 1.0;

    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < n_params; ++i) {
      const Matrix g = grad[i] * clip;
      m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g;
      m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g.cwiseProduct(g);
      model.param(i).array() -= config.learning_rate * (m1[i].array() / bc1) /
                                ((m2[i].array() / bc2).sqrt() + config.adam_eps);
    }
  }
  report.steps = config.steps;
  report.final_loss = report.loss_curve.empty() ? corpus_loss(model, corpus) : report.loss_curve.back();
  return report;
}

}  // namespace grains
