#include "grains/model.hpp"

#include <cstring>
#include <cmath>
#include <random>

namespace grains {

namespace {

constexpr double kLayerNormEps = 1e-5;

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::visual ? "visual" : "text"; }

Modality modality_from_string(std::string_view s) {
  if (s == "text") return Modality::text;
  if (s == "visual") return Modality::visual;
  throw ContractError("unknown modality \"" + std::string(s) + "\"");
}

std::string_view to_string(BaselineKind k) { return k == BaselineKind::zero ? "zero" : "token_id"; }

BaselineKind baseline_kind_from_string(std::string_view s) {
  if (s == "zero") return BaselineKind::zero;
  if (s == "token_id" || s == "token-id" || s == "mask") return BaselineKind::token_id;
  throw ContractError("unknown baseline kind \"" + std::string(s) + "\"");
}

TokenSeq TokenSeq::text(std::vector<int> ids) {
  TokenSeq s;
  s.modality.assign(ids.size(), Modality::text);
  s.ids = std::move(ids);
  return s;
}

void TokenSeq::validate(int vocab) const {
  if (modality.size() != ids.size()) {
    throw ContractError("TokenSeq: " + std::to_string(modality.size()) + " modality tags for " +
                        std::to_string(ids.size()) + " tokens");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary [0, " +
                       std::to_string(vocab) + ")");
    }
  }
}

int ModelConfig::ff_dim() const { return static_cast<int>(std::lround(ff_mult * dim)); }

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ContractError("ModelConfig: vocab_size must be >= 1");
  if (dim < 1 || heads < 1) throw ContractError("ModelConfig: dim and heads must be >= 1");
  if (dim % heads != 0) {
    throw ContractError("ModelConfig: dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
  }
  if (layers < 1) throw ContractError("ModelConfig: layers must be >= 1");
  if (max_seq < 2) throw ContractError("ModelConfig: max_seq must be >= 2");
  if (!(ff_mult > 0.0) || ff_dim() < 1) throw ContractError("ModelConfig: ff_mult must be positive");
}

TransformerLM::TransformerLM(ModelConfig config) : TransformerLM(config, true) {}

TransformerLM TransformerLM::zeros(ModelConfig config) { return TransformerLM(config, false); }

std::size_t TransformerLM::add(std::string name, Index rows, Index cols) {
  params_.emplace_back(std::move(name), Matrix::Zero(rows, cols));
  return params_.size() - 1;
}

TransformerLM::TransformerLM(ModelConfig config, bool random) : config_(config) {
  config_.validate();
  const Index d = config_.dim;
  const Index f = config_.ff_dim();
  add("tok_emb", config_.vocab_size, d);
  add("pos_emb", config_.max_seq, d);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b{};
    b.ln1_gain = add(p + "ln1.gain", 1, d);
    b.ln1_bias = add(p + "ln1.bias", 1, d);
    b.qkv_w = add(p + "attn.qkv.weight", d, 3 * d);
    b.qkv_b = add(p + "attn.qkv.bias", 1, 3 * d);
    b.out_w = add(p + "attn.out.weight", d, d);
    b.out_b = add(p + "attn.out.bias", 1, d);
    b.ln2_gain = add(p + "ln2.gain", 1, d);
    b.ln2_bias = add(p + "ln2.bias", 1, d);
    b.fc_w = add(p + "mlp.fc.weight", d, f);
    b.fc_b = add(p + "mlp.fc.bias", 1, f);
    b.proj_w = add(p + "mlp.proj.weight", f, d);
    b.proj_b = add(p + "mlp.proj.bias", 1, d);
    blocks_.push_back(b);
  }
  lnf_gain_ = add("ln_f.gain", 1, d);
  lnf_bias_ = add("ln_f.bias", 1, d);
  head_w_ = add("head.weight", d, config_.vocab_size);
  head_b_ = add("head.bias", 1, config_.vocab_size);

  if (!random) return;

  std::mt19937_64 rng(config_.seed);
  auto fill = [&rng](Matrix& m, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };
  const double resid_scale = 1.0 / std::sqrt(2.0 * config_.layers);
  fill(param(tok_emb()), 0.5);
  fill(param(pos_emb()), 0.5);
  for (const Block& b : blocks_) {
    param(b.ln1_gain).setOnes();
    param(b.ln2_gain).setOnes();
    fill(param(b.qkv_w), 1.0 / std::sqrt(static_cast<double>(d)));
    fill(param(b.out_w), resid_scale / std::sqrt(static_cast<double>(d)));
    fill(param(b.fc_w), 1.0 / std::sqrt(static_cast<double>(d)));
    fill(param(b.proj_w), resid_scale / std::sqrt(static_cast<double>(f)));
  }
  param(lnf_gain_).setOnes();
  fill(param(head_w_), 1.0 / std::sqrt(static_cast<double>(d)));
}

std::optional<std::size_t> TransformerLM::find_param(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].first == name) return i;
  }
  return std::nullopt;
}

const Matrix& TransformerLM::param(std::string_view name) const {
  auto i = find_param(name);
  if (!i) throw IndexError("no parameter named \"" + std::string(name) + "\"");
  return params_[*i].second;
}

Matrix& TransformerLM::param(std::string_view name) {
  auto i = find_param(name);
  if (!i) throw IndexError("no parameter named \"" + std::string(name) + "\"");
  return params_[*i].second;
}

bool operator==(const TransformerLM& a, const TransformerLM& b) {
  if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    const auto& [na, ma] = a.params_[i];
    const auto& [nb, mb] = b.params_[i];
    if (na != nb || ma.rows() != mb.rows() || ma.cols() != mb.cols()) return false;
    if (std::memcmp(ma.data(), mb.data(), sizeof(double) * static_cast<std::size_t>(ma.size())) != 0) {
      return false;
    }
  }
  return true;
}

BoundParams bind_parameters(Tape64& tape, const TransformerLM& model, bool requires_grad) {
  BoundParams b;
  b.vars.reserve(model.num_params());
  for (std::size_t i = 0; i < model.num_params(); ++i) b.vars.push_back(tape.leaf(model.param(i), requires_grad));
  return b;
}

Var64 forward_logits([[maybe_unused]] Tape64& tape, const TransformerLM& model, const BoundParams& params,
                     Var64 token_embeddings, const ForwardOptions& opts, HiddenTrace* trace,
                     Var64* final_residual) {
  const ModelConfig& cfg = model.config();
  const Index T = token_embeddings.rows();
  if (T == 0) throw ContractError("forward: empty input");
  if (T > cfg.max_seq) {
    throw LengthError("forward: sequence length " + std::to_string(T) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  if (token_embeddings.cols() != cfg.dim) {
    throw DimensionError("forward: embeddings " + shape_string(token_embeddings.value()) +
                         " do not match model dim " + std::to_string(cfg.dim));
  }
  if (opts.hook != nullptr && opts.hook->dim() != cfg.dim) {
    throw CompatibilityError("forward: hook dim " + std::to_string(opts.hook->dim()) +
                             " vs model dim " + std::to_string(cfg.dim));
  }
  const int n_layers = opts.num_layers < 0 ? cfg.layers : std::min(opts.num_layers, cfg.layers);
  const Index dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Var64 x = add(token_embeddings, slice_rows(params[model.pos_emb()], 0, T));
  std::vector<Var64> head_out(static_cast<std::size_t>(cfg.heads));
  for (int l = 0; l < n_layers; ++l) {
    const auto& b = model.block(l);
    Var64 a = layernorm(x, params[b.ln1_gain], params[b.ln1_bias], kLayerNormEps);
    Var64 qkv = add_row_broadcast(matmul(a, params[b.qkv_w]), params[b.qkv_b]);
    for (int h = 0; h < cfg.heads; ++h) {
      Var64 q = slice_cols(qkv, h * dh, dh);
      Var64 k = slice_cols(qkv, cfg.dim + h * dh, dh);
      Var64 v = slice_cols(qkv, 2 * cfg.dim + h * dh, dh);
      Var64 att = causal_softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_dh));
      head_out[static_cast<std::size_t>(h)] = matmul(att, v);
    }
    Var64 o = cfg.heads == 1 ? head_out[0] : concat_cols<double>(head_out);
    x = add(x, add_row_broadcast(matmul(o, params[b.out_w]), params[b.out_b]));
    Var64 m = layernorm(x, params[b.ln2_gain], params[b.ln2_bias], kLayerNormEps);
    Var64 f = gelu(add_row_broadcast(matmul(m, params[b.fc_w]), params[b.fc_b]));
    x = add(x, add_row_broadcast(matmul(f, params[b.proj_w]), params[b.proj_b]));
    if (opts.hook != nullptr) x = opts.hook->apply(x, l, opts.prompt_len);
    if (trace != nullptr) trace->layers.push_back(x.value());
  }
  if (final_residual != nullptr) *final_residual = x;
  Var64 z = layernorm(x, params[model.lnf_gain()], params[model.lnf_bias()], kLayerNormEps);
  return add_row_broadcast(matmul(z, params[model.head_w()]), params[model.head_b()]);
}

ForwardPass forward_from_embeddings(const TransformerLM& model, const EmbeddedInput& input,
                                    const ForwardOptions& opts, bool input_grad, bool param_grad) {
  ForwardPass pass;
  pass.tape = std::make_unique<Tape64>();
  pass.params = bind_parameters(*pass.tape, model, param_grad);
  pass.input = pass.tape->leaf(input.embeddings, input_grad);
  HiddenTrace trace;
  pass.logits = forward_logits(*pass.tape, model, pass.params, pass.input, opts,
                               opts.capture ? &trace : nullptr);
  if (opts.capture) pass.trace = std::move(trace);
  return pass;
}

Matrix residual_after(const TransformerLM& model, const Matrix& token_embeddings, int num_layers,
                      const ResidualHook* hook, Index prompt_len) {
  if (num_layers < 1 || num_layers > model.config().layers) {
    throw IndexError("residual_after: layer count " + std::to_string(num_layers) + " outside [1, " +
                     std::to_string(model.config().layers) + "]");
  }
  Tape64 tape;
  BoundParams params = bind_parameters(tape, model, false);
  Var64 in = tape.constant(token_embeddings);
  ForwardOptions opts;
  opts.hook = hook;
  opts.prompt_len = prompt_len;
  opts.num_layers = num_layers;
  Var64 resid;
  forward_logits(tape, model, params, in, opts, nullptr, &resid);
  return resid.value();
}

EmbeddedInput embed(const TransformerLM& model, const TokenSeq& seq) {
  if (seq.empty()) throw ContractError("embed: empty sequence");
  seq.validate(model.config().vocab_size);
  EmbeddedInput out;
  out.embeddings.resize(static_cast<Index>(seq.size()), model.config().dim);
  const Matrix& table = model.param(model.tok_emb());
  for (std::size_t i = 0; i < seq.size(); ++i) out.embeddings.row(static_cast<Index>(i)) = table.row(seq.ids[i]);
  out.source = seq;
  return out;
}

Var64 sequence_logprob(Tape64& tape, const TransformerLM& model, const BoundParams& params,
                       Var64 prompt_embeddings, const TokenSeq& y, const ResidualHook* hook) {
  if (prompt_embeddings.rows() == 0) throw ContractError("sequence_logprob: empty prompt");
  if (y.empty()) throw ContractError("sequence_logprob: empty continuation");
  for (int id : y.ids) {
    if (id < 0 || id >= model.config().vocab_size) {
      throw IndexError("sequence_logprob: token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  const Index P = prompt_embeddings.rows();
  const Index n = static_cast<Index>(y.size());
  Var64 input = prompt_embeddings;
  if (n > 1) {
    Var64 y_emb = gather_rows(params[model.tok_emb()], std::span<const int>(y.ids.data(), y.ids.size() - 1));
    const Var64 parts[] = {prompt_embeddings, y_emb};
    input = concat_rows<double>(parts);
  }
  ForwardOptions opts;
  opts.hook = hook;
  opts.prompt_len = P;
  Var64 logits = forward_logits(tape, model, params, input, opts, nullptr);
  Var64 logp = log_softmax_rows(slice_rows(logits, P - 1, n));
  std::vector<std::pair<Index, Index>> entries;
  entries.reserve(y.size());
  for (Index t = 0; t < n; ++t) entries.emplace_back(t, y.ids[static_cast<std::size_t>(t)]);
  return select_sum<double>(logp, entries);
}

double sequence_logprob(const TransformerLM& model, const EmbeddedInput& prompt, const TokenSeq& y,
                        const ResidualHook* hook) {
  Tape64 tape;
  BoundParams params = bind_parameters(tape, model, false);
  Var64 x = tape.constant(prompt.embeddings);
  return sequence_logprob(tape, model, params, x, y, hook).value()(0, 0);
}

double sequence_logprob(const TransformerLM& model, const TokenSeq& prompt, const TokenSeq& y,
                        const ResidualHook* hook) {
  return sequence_logprob(model, embed(model, prompt), y, hook);
}

TokenSeq generate_greedy(const TransformerLM& model, const TokenSeq& prompt, int max_new,
                         const ResidualHook* hook, std::optional<int> end_token) {
  if (prompt.empty()) throw ContractError("generate_greedy: empty prompt");
  prompt.validate(model.config().vocab_size);
  TokenSeq out = prompt;
  const Index prompt_len = static_cast<Index>(prompt.size());
  const Matrix& table = model.param(model.tok_emb());
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(out.size()) >= model.config().max_seq) break;
    Tape64 tape;
    BoundParams params = bind_parameters(tape, model, false);
    Matrix emb(static_cast<Index>(out.size()), model.config().dim);
    for (std::size_t i = 0; i < out.size(); ++i) emb.row(static_cast<Index>(i)) = table.row(out.ids[i]);
    ForwardOptions opts;
    opts.hook = hook;
    opts.prompt_len = prompt_len;
    Var64 logits = forward_logits(tape, model, params, tape.constant(std::move(emb)), opts, nullptr);
    const auto& lv = logits.value();
    const Index last = lv.rows() - 1;
    int best = 0;
    for (Index v = 1; v < lv.cols(); ++v) {
      if (lv(last, v) > lv(last, best)) best = static_cast<int>(v);
    }
    out.ids.push_back(best);
    out.modality.push_back(Modality::text);
    if (end_token && best == *end_token) break;
  }
  return out;
}

}  // namespace grains
