#pragma once

// Contrastive steering vectors from attribution-masked inputs, and the
// norm-preserving residual-stream intervention that applies them.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "grains/attribution.hpp"
#include "grains/dataset.hpp"
#include "grains/model.hpp"

namespace grains {

enum class PcaMode { uncentered, centered };
enum class PositionPolicy { all_positions, generated_only };

std::string_view to_string(PcaMode m);
std::string_view to_string(PositionPolicy p);
PcaMode pca_mode_from_string(std::string_view s);
PositionPolicy position_policy_from_string(std::string_view s);

/// h + lambda * v, rescaled to the norm of h. Returns h untouched when
/// lambda is zero or either norm vanishes.
template <typename DerivedH, typename DerivedV>
typename DerivedH::PlainObject apply_steering(const Eigen::MatrixBase<DerivedH>& h,
                                              const Eigen::MatrixBase<DerivedV>& v,
                                              typename DerivedH::Scalar lambda) {
  using Scalar = typename DerivedH::Scalar;
  if (h.size() != v.size()) {
    throw DimensionError("apply_steering: h has " + std::to_string(h.size()) + " entries, v has " +
                         std::to_string(v.size()));
  }
  if (lambda == Scalar(0)) return h;
  typename DerivedH::PlainObject shifted = h + lambda * v.derived().reshaped(h.rows(), h.cols());
  const Scalar h_norm = h.norm();
  const Scalar s_norm = shifted.norm();
  if (h_norm == Scalar(0) || s_norm == Scalar(0)) return h;
  return shifted * (h_norm / s_norm);
}

/// apply_steering on every row at or after `first_row`, as a tape op with
/// the exact Jacobian of the rescaled shift.
Var64 steer_rows(Var64 h, const RowVector& v, double lambda, Index first_row);

struct ContrastiveInputs {
  Matrix without_positive;
  Matrix without_negative;
};

/// Copies of x with the I+ (resp. I-) rows replaced by the baseline rows.
ContrastiveInputs build_contrastive_inputs(const Matrix& x, const TopKSets& sets, const Matrix& baseline);

struct DeltaRecord {
  std::string example_id;
  int layer = 0;
  Eigen::VectorXd positive;  // h_last(x) - h_last(x without I+)
  Eigen::VectorXd negative;  // h_last(x) - h_last(x without I-)
};

/// Final-token residual differences at every layer (0-based layer index).
std::vector<DeltaRecord> extract_deltas(const TransformerLM& model, const Matrix& x,
                                        const ContrastiveInputs& masked, const std::string& example_id = {});

/// Unit-norm top principal direction of the rows of `deltas` (n x d).
/// Uncentered mode takes the top right singular vector of the raw rows;
/// centered mode subtracts the row mean first. The sign is chosen so the
/// result has a non-negative dot product with the mean row.
Eigen::VectorXd pca_first(const Matrix& deltas, PcaMode mode = PcaMode::uncentered);

struct LayerVectors {
  int layer = 0;
  Eigen::VectorXd positive;
  Eigen::VectorXd negative;
  Eigen::VectorXd combined;  // positive - negative, not renormalised
};

struct Provenance {
  std::string dataset_hash;
  AttributionMethod method = AttributionMethod::ig;
  int k = 3;
  int steps = 5;
  BaselineKind baseline = BaselineKind::zero;
  ObjectiveKind objective = ObjectiveKind::preference;
  ModalityFilter filter = ModalityFilter::joint;
  std::uint64_t seed = 0;
  int n_examples = 0;
  std::vector<std::string> skipped;
};

struct SteeringVectorSet {
  int dim = 0;
  PcaMode pca_mode = PcaMode::uncentered;
  Provenance provenance;
  std::vector<LayerVectors> layers;

  const LayerVectors& layer(int l) const;
};

struct BuildConfig {
  AttributionMethod method = AttributionMethod::ig;
  int k = 3;
  int steps = 5;
  BaselineKind baseline = BaselineKind::zero;
  int mask_id = -1;
  ObjectiveKind objective = ObjectiveKind::preference;
  PcaMode pca_mode = PcaMode::uncentered;
  ModalityFilter filter = ModalityFilter::joint;
  int smoothgrad_samples = 8;
  std::optional<double> smoothgrad_sigma;  // default: 0.1 x RMS(token embeddings)
  std::uint64_t seed = 0;
  int jobs = 1;
};

/// Per-example random stream keyed on the example id, so results do not
/// depend on dataset order.
std::uint64_t example_seed(std::uint64_t root, const std::string& id);

/// Per-example attribution, masking and delta extraction. Examples whose
/// top-k sets are both empty yield std::nullopt.
std::vector<std::optional<std::vector<DeltaRecord>>> collect_deltas(const TransformerLM& model,
                                                                    const std::vector<PreferenceExample>& examples,
                                                                    const BuildConfig& config);

/// Full build: deltas for every example, then per-layer PCA. Throws
/// BuildError when every example was skipped.
SteeringVectorSet build_vectors(const TransformerLM& model, const std::vector<PreferenceExample>& examples,
                                const BuildConfig& config);

/// Residual hook adding lambda * v_l at the selected layers.
class SteeringHook : public ResidualHook {
 public:
  /// An empty `layer_set` selects every layer in `vectors`.
  SteeringHook(const SteeringVectorSet& vectors, double lambda, std::vector<int> layer_set = {},
               PositionPolicy policy = PositionPolicy::all_positions);

  Var64 apply(Var64 residual, int layer, Index prompt_len) const override;
  int dim() const override { return dim_; }
  double lambda() const { return lambda_; }
  PositionPolicy policy() const { return policy_; }

 private:
  int dim_;
  double lambda_;
  PositionPolicy policy_;
  std::vector<std::optional<RowVector>> per_layer_;
};

inline constexpr std::string_view kVectorMagic = "GRNSVEC1";
inline constexpr std::uint16_t kVectorVersion = 1;

void write_vectors(std::ostream& os, const SteeringVectorSet& vectors);
/// Throws FormatError on bad magic, unsupported version, truncation,
/// trailing bytes, a record count that disagrees with the header, or a
/// dataset hash different from `expected_dataset_hash` when given.
SteeringVectorSet read_vectors(std::istream& is, const std::optional<std::string>& expected_dataset_hash = std::nullopt);
void save_vectors(const SteeringVectorSet& vectors, const std::filesystem::path& path);
SteeringVectorSet load_vectors(const std::filesystem::path& path,
                               const std::optional<std::string>& expected_dataset_hash = std::nullopt);

}  // namespace grains
