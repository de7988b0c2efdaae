#pragma once

// Command-line pipeline: train-toy, attribute, build-vectors, steer, eval, sweep.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "grains/evalharness.hpp"
#include "grains/steering.hpp"

namespace grains::cli {

inline constexpr int kSchemaVersion = 1;

enum ExitCode : int { ok = 0, usage = 2, io_format = 3, numeric_build = 4 };

struct RunConfig {
  struct Paths {
    std::string checkpoint;
    std::string dataset;
    std::string eval_dataset;
    std::string corpus;
    std::string vectors;
    std::string out;
  } paths;

  SyntheticSpec synthetic;
  struct Model {
    int dim = 32;
    int layers = 2;
    int heads = 4;
    double ff_mult = 4.0;
    int max_seq = 0;  // 0: prompt_len + 8
  } model;
  TrainConfig train = [] {
    TrainConfig t;
    t.steps = 3000;
    t.learning_rate = 3e-3;
    return t;
  }();

  struct Attribution {
    AttributionMethod method = AttributionMethod::ig;
    int k = 3;
    int m = 5;
    BaselineKind baseline = BaselineKind::zero;
    int mask_id = TaskVocab::mask;
    ObjectiveKind objective = ObjectiveKind::preference;
    std::optional<double> sigma;
    int samples = 8;
    ModalityFilter filter = ModalityFilter::joint;
  } attribution;

  struct Steering {
    std::vector<double> lambdas{6.0};
    std::vector<int> layers;  // empty: every layer
    PositionPolicy policy = PositionPolicy::all_positions;
    PcaMode pca_mode = PcaMode::uncentered;
    int max_new = 3;
  } steering;

  struct Eval {
    std::string metric = "win_rate";
    std::vector<int> ks{1, 3, 5};
  } eval;

  struct Sweep {
    std::vector<double> lambdas;
    std::vector<int> ks;
  } sweep;

  std::uint64_t seed = 0;
  int jobs = 1;
  bool force = false;
};

/// Fills `cfg` from a JSON document. Unknown or mistyped fields and a
/// missing or unsupported schema_version raise UsageError naming the field.
void apply_config_json(RunConfig& cfg, const std::string& text);
/// Inverse of apply_config_json. Reports and hashes leave the paths out so
/// that outputs do not depend on where files live.
std::string config_json(const RunConfig& cfg, bool with_paths = true);

/// Seed for one subsystem, derived from the root seed.
std::uint64_t subsystem_seed(std::uint64_t root, const std::string& name);

void cmd_train_toy(const RunConfig& cfg, std::ostream& out);
void cmd_attribute(const RunConfig& cfg, std::ostream& out);
void cmd_build_vectors(const RunConfig& cfg, std::ostream& out);
void cmd_steer(const RunConfig& cfg, const std::optional<std::string>& prompt, const std::string& trace_path,
               std::ostream& out);
void cmd_eval(const RunConfig& cfg, std::ostream& out);
void cmd_sweep(const RunConfig& cfg, std::ostream& out);

/// Parses argv, runs one subcommand and maps errors to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace grains::cli
