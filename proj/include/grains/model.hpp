#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "grains/numkernel.hpp"

namespace grains {

using Tape64 = Tape<double>;
using Var64 = Var<double>;

enum class Modality : std::uint8_t { text = 0, visual = 1 };

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view s);

/// Token ids with one modality tag per token.
struct TokenSeq {
  std::vector<int> ids;
  std::vector<Modality> modality;

  static TokenSeq text(std::vector<int> ids);

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  /// Throws IndexError for ids outside [0, vocab) and ContractError when the
  /// modality tags do not line up with the ids.
  void validate(int vocab) const;

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

struct ModelConfig {
  int vocab_size = 32;
  int dim = 32;
  int layers = 2;
  int heads = 4;
  double ff_mult = 4.0;
  int max_seq = 64;
  std::uint64_t seed = 0;

  void validate() const;
  int head_dim() const { return dim / heads; }
  int ff_dim() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class BaselineKind { zero, token_id };

std::string_view to_string(BaselineKind k);
BaselineKind baseline_kind_from_string(std::string_view s);

/// Token embeddings (T x d) as fed to the first block; positional embeddings
/// are added inside the forward pass.
struct EmbeddedInput {
  Matrix embeddings;
  std::optional<TokenSeq> source;
  BaselineKind baseline_kind = BaselineKind::zero;

  Index length() const { return embeddings.rows(); }
};

/// Residual-stream output of every block, after any steering hook.
struct HiddenTrace {
  std::vector<Matrix> layers;
};

/// Transforms a block's residual output before the next block consumes it.
class ResidualHook {
 public:
  virtual ~ResidualHook() = default;
  /// `prompt_len` is the number of leading positions that belong to the
  /// prompt; hooks may choose to leave them untouched.
  virtual Var64 apply(Var64 residual, int layer, Index prompt_len) const = 0;
  virtual int dim() const = 0;
};

/// Decoder-only pre-LN transformer with learned absolute positions.
class TransformerLM {
 public:
  struct Block {
    std::size_t ln1_gain, ln1_bias, qkv_w, qkv_b, out_w, out_b;
    std::size_t ln2_gain, ln2_bias, fc_w, fc_b, proj_w, proj_b;
  };

  /// Random initialisation seeded by `config.seed`.
  explicit TransformerLM(ModelConfig config);

  /// Every parameter set to zero, so all logits are zero.
  static TransformerLM zeros(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::size_t num_params() const { return params_.size(); }
  const std::string& param_name(std::size_t i) const { return params_[i].first; }
  const Matrix& param(std::size_t i) const { return params_[i].second; }
  Matrix& param(std::size_t i) { return params_[i].second; }
  const Matrix& param(std::string_view name) const;
  Matrix& param(std::string_view name);
  std::optional<std::size_t> find_param(std::string_view name) const;

  std::size_t tok_emb() const { return 0; }
  std::size_t pos_emb() const { return 1; }
  const Block& block(int l) const { return blocks_[static_cast<std::size_t>(l)]; }
  std::size_t lnf_gain() const { return lnf_gain_; }
  std::size_t lnf_bias() const { return lnf_bias_; }
  std::size_t head_w() const { return head_w_; }
  std::size_t head_b() const { return head_b_; }

  friend bool operator==(const TransformerLM& a, const TransformerLM& b);

 private:
  TransformerLM(ModelConfig config, bool random);
  std::size_t add(std::string name, Index rows, Index cols);

  ModelConfig config_;
  std::vector<std::pair<std::string, Matrix>> params_;
  std::vector<Block> blocks_;
  std::size_t lnf_gain_ = 0, lnf_bias_ = 0, head_w_ = 0, head_b_ = 0;
};

/// Parameters copied onto a tape, in the model's canonical order.
struct BoundParams {
  std::vector<Var64> vars;
  Var64 operator[](std::size_t i) const { return vars[i]; }
};

BoundParams bind_parameters(Tape64& tape, const TransformerLM& model, bool requires_grad);

struct ForwardOptions {
  bool capture = false;
  const ResidualHook* hook = nullptr;
  Index prompt_len = 0;
  /// Run only this many blocks (all when negative); logits then come from the
  /// truncated residual stream.
  int num_layers = -1;
};

/// Tape-level forward from token embeddings (T x d) to logits (T x V).
/// When `trace` is non-null the post-hook residual of each block is copied
/// into it.
Var64 forward_logits(Tape64& tape, const TransformerLM& model, const BoundParams& params,
                     Var64 token_embeddings, const ForwardOptions& opts, HiddenTrace* trace,
                     Var64* final_residual = nullptr);

struct ForwardPass {
  std::unique_ptr<Tape64> tape;
  BoundParams params;
  Var64 input;
  Var64 logits;
  std::optional<HiddenTrace> trace;
};

ForwardPass forward_from_embeddings(const TransformerLM& model, const EmbeddedInput& input,
                                    const ForwardOptions& opts = {}, bool input_grad = false,
                                    bool param_grad = false);

/// Residual stream after the first `num_layers` blocks, computed by a
/// truncated forward pass rather than from a captured trace.
Matrix residual_after(const TransformerLM& model, const Matrix& token_embeddings, int num_layers,
                      const ResidualHook* hook = nullptr, Index prompt_len = 0);

/// Token-embedding lookup (no positional term). Empty sequences are rejected.
EmbeddedInput embed(const TransformerLM& model, const TokenSeq& seq);

/// Tape-level teacher-forced log P(y | prompt): the prompt embeddings are
/// followed by the embeddings of y[0..n-2] and the log-softmax of y[t] is
/// read at position P-1+t.
Var64 sequence_logprob(Tape64& tape, const TransformerLM& model, const BoundParams& params,
                       Var64 prompt_embeddings, const TokenSeq& y, const ResidualHook* hook);

double sequence_logprob(const TransformerLM& model, const EmbeddedInput& prompt, const TokenSeq& y,
                        const ResidualHook* hook = nullptr);
double sequence_logprob(const TransformerLM& model, const TokenSeq& prompt, const TokenSeq& y,
                        const ResidualHook* hook = nullptr);

/// Argmax decoding (lowest id wins ties). Generated tokens are tagged text.
/// Stops after `max_new` tokens, on `end_token`, or at the context limit.
TokenSeq generate_greedy(const TransformerLM& model, const TokenSeq& prompt, int max_new,
                         const ResidualHook* hook = nullptr, std::optional<int> end_token = std::nullopt);

struct TrainConfig {
  int steps = 500;
  int batch_size = 16;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct TrainReport {
  std::vector<double> loss_curve;
  double final_loss = 0.0;
  int steps = 0;
};

/// Mean next-token cross-entropy of `model` over every position of `corpus`.
double corpus_loss(const TransformerLM& model, const std::vector<TokenSeq>& corpus);

/// Adam on next-token cross-entropy. Mutates `model`; throws TrainingError
/// naming the step when the loss stops being finite.
TrainReport train_toy(TransformerLM& model, const std::vector<TokenSeq>& corpus, const TrainConfig& config);

inline constexpr std::string_view kCheckpointMagic = "GRNSCKPT";
inline constexpr std::uint16_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& os, const TransformerLM& model);
TransformerLM read_checkpoint(std::istream& is);
void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path);
TransformerLM load_checkpoint(const std::filesystem::path& path);

}  // namespace grains
