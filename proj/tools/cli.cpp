#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "grains/binary_io.hpp"
#include "grains/parallel.hpp"

namespace grains::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- config -----------------------------------------------------------

void check_keys(const json& obj, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw UsageError("config: " + section + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw UsageError("config: unknown field " + (section.empty() ? key : section + "." + key));
  }
}

template <typename T>
void read(const json& obj, const std::string& section, const char* key, T& dst) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config: field " + (section.empty() ? std::string(key) : section + "." + key) +
                     " has the wrong type");
  }
}

template <typename Enum, typename Parse>
void read_enum(const json& obj, const std::string& section, const char* key, Enum& dst, Parse parse) {
  std::string s;
  if (!obj.contains(key)) return;
  read(obj, section, key, s);
  try {
    dst = parse(s);
  } catch (const ContractError& e) {
    throw UsageError("config: field " + section + "." + key + ": " + e.what());
  }
}

template <typename Enum, typename Parse>
Enum parse_flag(const std::string& flag, const std::string& value, Parse parse) {
  try {
    return parse(value);
  } catch (const ContractError& e) {
    throw UsageError("--" + flag + ": " + e.what());
  }
}

// ---- files ------------------------------------------------------------

void require_path(const std::string& p, const char* field) {
  if (p.empty()) throw UsageError(std::string("missing required path ") + field);
}

void ensure_fresh(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw IoError(p.string() + " already exists; pass --force to overwrite");
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os << text;
  if (!os) throw IoError("write to " + p.string() + " failed");
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TransformerLM load_model(const RunConfig& cfg) {
  require_path(cfg.paths.checkpoint, "paths.checkpoint (--checkpoint)");
  return load_checkpoint(cfg.paths.checkpoint);
}

std::vector<PreferenceExample> load_examples(const std::string& path, const TransformerLM& model) {
  auto examples = load_dataset(path);
  for (const auto& ex : examples) ex.validate(model.config().vocab_size);
  return examples;
}

SteeringVectorSet load_matching_vectors(const RunConfig& cfg, const TransformerLM& model) {
  SteeringVectorSet vs = load_vectors(cfg.paths.vectors);
  if (vs.dim != model.config().dim) {
    throw CompatibilityError("vector file dim " + std::to_string(vs.dim) + " does not match checkpoint dim " +
                             std::to_string(model.config().dim));
  }
  for (const auto& lv : vs.layers) {
    if (lv.layer >= model.config().layers) {
      throw CompatibilityError("vector file has layer " + std::to_string(lv.layer) + " but the checkpoint has " +
                               std::to_string(model.config().layers) + " layers");
    }
  }
  return vs;
}

BuildConfig build_config(const RunConfig& cfg, int k) {
  BuildConfig bc;
  bc.method = cfg.attribution.method;
  bc.k = k;
  bc.steps = cfg.attribution.m;
  bc.baseline = cfg.attribution.baseline;
  bc.mask_id = cfg.attribution.mask_id;
  bc.objective = cfg.attribution.objective;
  bc.pca_mode = cfg.steering.pca_mode;
  bc.filter = cfg.attribution.filter;
  bc.smoothgrad_samples = cfg.attribution.samples;
  bc.smoothgrad_sigma = cfg.attribution.sigma;
  bc.seed = subsystem_seed(cfg.seed, "build");
  bc.jobs = cfg.jobs;
  return bc;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s.empty() ? "all" : s;
}

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

TokenSeq parse_prompt(const std::string& text) {
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      ids.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("--prompt: \"" + tok + "\" is not a token id");
    }
  }
  if (ids.empty()) throw UsageError("--prompt is empty");
  return TokenSeq::text(std::move(ids));
}

}  // namespace

std::uint64_t subsystem_seed(std::uint64_t root, const std::string& name) { return example_seed(root, name); }

void apply_config_json(RunConfig& cfg, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "", {"schema_version", "paths", "synthetic", "model", "train", "attribution", "steering", "eval",
                     "sweep", "seed", "jobs"});
  if (!j.contains("schema_version")) throw UsageError("config: missing field schema_version");
  int version = 0;
  read(j, "", "schema_version", version);
  if (version != kSchemaVersion) {
    throw UsageError("config: schema_version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kSchemaVersion) + ")");
  }
  read(j, "", "seed", cfg.seed);
  read(j, "", "jobs", cfg.jobs);
  if (j.contains("paths")) {
    const json& p = j["paths"];
    check_keys(p, "paths", {"checkpoint", "dataset", "eval_dataset", "corpus", "vectors", "out"});
    read(p, "paths", "checkpoint", cfg.paths.checkpoint);
    read(p, "paths", "dataset", cfg.paths.dataset);
    read(p, "paths", "eval_dataset", cfg.paths.eval_dataset);
    read(p, "paths", "corpus", cfg.paths.corpus);
    read(p, "paths", "vectors", cfg.paths.vectors);
    read(p, "paths", "out", cfg.paths.out);
  }
  if (j.contains("synthetic")) {
    const json& s = j["synthetic"];
    check_keys(s, "synthetic", {"n", "n_dev", "n_heldout", "n_lm", "n_neutral", "trigger_rate", "support_rate",
                                "lm_trigger_rate", "lm_support_rate", "modality_mix", "prompt_len"});
    SyntheticSpec& sp = cfg.synthetic;
    read(s, "synthetic", "n", sp.n);
    read(s, "synthetic", "n_dev", sp.n_dev);
    read(s, "synthetic", "n_heldout", sp.n_heldout);
    read(s, "synthetic", "n_lm", sp.n_lm);
    read(s, "synthetic", "n_neutral", sp.n_neutral);
    read(s, "synthetic", "trigger_rate", sp.trigger_rate);
    read(s, "synthetic", "support_rate", sp.support_rate);
    read(s, "synthetic", "lm_trigger_rate", sp.lm_trigger_rate);
    read(s, "synthetic", "lm_support_rate", sp.lm_support_rate);
    read(s, "synthetic", "modality_mix", sp.modality_mix);
    read(s, "synthetic", "prompt_len", sp.prompt_len);
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, "model", {"dim", "layers", "heads", "ff_mult", "max_seq"});
    read(m, "model", "dim", cfg.model.dim);
    read(m, "model", "layers", cfg.model.layers);
    read(m, "model", "heads", cfg.model.heads);
    read(m, "model", "ff_mult", cfg.model.ff_mult);
    read(m, "model", "max_seq", cfg.model.max_seq);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train", {"steps", "batch_size", "learning_rate", "grad_clip"});
    read(t, "train", "steps", cfg.train.steps);
    read(t, "train", "batch_size", cfg.train.batch_size);
    read(t, "train", "learning_rate", cfg.train.learning_rate);
    read(t, "train", "grad_clip", cfg.train.grad_clip);
  }
  if (j.contains("attribution")) {
    const json& a = j["attribution"];
    check_keys(a, "attribution", {"method", "k", "m", "baseline", "mask_id", "objective", "sigma", "n", "filter"});
    read_enum(a, "attribution", "method", cfg.attribution.method, attribution_method_from_string);
    read(a, "attribution", "k", cfg.attribution.k);
    read(a, "attribution", "m", cfg.attribution.m);
    read_enum(a, "attribution", "baseline", cfg.attribution.baseline, baseline_kind_from_string);
    read(a, "attribution", "mask_id", cfg.attribution.mask_id);
    read_enum(a, "attribution", "objective", cfg.attribution.objective, objective_kind_from_string);
    if (a.contains("sigma")) {
      double sigma = 0.0;
      read(a, "attribution", "sigma", sigma);
      cfg.attribution.sigma = sigma;
    }
    read(a, "attribution", "n", cfg.attribution.samples);
    read_enum(a, "attribution", "filter", cfg.attribution.filter, modality_filter_from_string);
  }
  if (j.contains("steering")) {
    const json& s = j["steering"];
    check_keys(s, "steering", {"lambda", "lambdas", "layers", "position_policy", "pca_mode", "max_new"});
    if (s.contains("lambda")) {
      double lambda = 0.0;
      read(s, "steering", "lambda", lambda);
      cfg.steering.lambdas = {lambda};
    }
    read(s, "steering", "lambdas", cfg.steering.lambdas);
    read(s, "steering", "layers", cfg.steering.layers);
    read_enum(s, "steering", "position_policy", cfg.steering.policy, position_policy_from_string);
    read_enum(s, "steering", "pca_mode", cfg.steering.pca_mode, pca_mode_from_string);
    read(s, "steering", "max_new", cfg.steering.max_new);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, "eval", {"metric", "ks"});
    read(e, "eval", "metric", cfg.eval.metric);
    read(e, "eval", "ks", cfg.eval.ks);
  }
  if (j.contains("sweep")) {
    const json& s = j["sweep"];
    check_keys(s, "sweep", {"lambdas", "ks"});
    read(s, "sweep", "lambdas", cfg.sweep.lambdas);
    read(s, "sweep", "ks", cfg.sweep.ks);
  }
}

std::string config_json(const RunConfig& cfg, bool with_paths) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = cfg.seed;
  if (with_paths) {
      j["paths"] = {{"checkpoint", cfg.paths.checkpoint}, {"dataset", cfg.paths.dataset},
                  {"eval_dataset", cfg.paths.eval_dataset}, {"corpus", cfg.paths.corpus},
                  {"vectors", cfg.paths.vectors}, {"out", cfg.paths.out}};
  }
  const SyntheticSpec& s = cfg.synthetic;
  j["synthetic"] = {{"n", s.n}, {"n_dev", s.n_dev}, {"n_heldout", s.n_heldout}, {"n_lm", s.n_lm},
                    {"n_neutral", s.n_neutral}, {"trigger_rate", s.trigger_rate},
                    {"support_rate", s.support_rate}, {"lm_trigger_rate", s.lm_trigger_rate},
                    {"lm_support_rate", s.lm_support_rate}, {"modality_mix", s.modality_mix},
                    {"prompt_len", s.prompt_len}};
  j["model"] = {{"dim", cfg.model.dim}, {"layers", cfg.model.layers}, {"heads", cfg.model.heads},
                {"ff_mult", cfg.model.ff_mult}, {"max_seq", cfg.model.max_seq}};
  j["train"] = {{"steps", cfg.train.steps}, {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate}, {"grad_clip", cfg.train.grad_clip}};
  const auto& a = cfg.attribution;
  j["attribution"] = {{"method", to_string(a.method)}, {"k", a.k}, {"m", a.m},
                      {"baseline", to_string(a.baseline)}, {"mask_id", a.mask_id},
                      {"objective", to_string(a.objective)}, {"n", a.samples}, {"filter", to_string(a.filter)}};
  if (a.sigma) j["attribution"]["sigma"] = *a.sigma;
  j["steering"] = {{"lambdas", cfg.steering.lambdas}, {"layers", cfg.steering.layers},
                   {"position_policy", to_string(cfg.steering.policy)},
                   {"pca_mode", to_string(cfg.steering.pca_mode)}, {"max_new", cfg.steering.max_new}};
  j["eval"] = {{"metric", cfg.eval.metric}, {"ks", cfg.eval.ks}};
  j["sweep"] = {{"lambdas", cfg.sweep.lambdas}, {"ks", cfg.sweep.ks}};
  return j.dump();
}

// ---- commands ---------------------------------------------------------

void cmd_train_toy(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.paths.out, "paths.out (--out)");
  const fs::path dir = cfg.paths.out;
  const fs::path files[] = {dir / "checkpoint.bin", dir / "train_report.json", dir / "steer.jsonl",
                            dir / "dev.jsonl",      dir / "heldout.jsonl",     dir / "neutral.jsonl"};
  for (const auto& f : files) ensure_fresh(f, cfg.force);
  if (cfg.train.steps < 0) throw UsageError("train.steps must be >= 0");

  SyntheticSpec spec = cfg.synthetic;
  spec.seed = subsystem_seed(cfg.seed, "synthetic");
  const SyntheticCorpus corpus = gen_synthetic_corpus(spec);

  ModelConfig mc = synthetic_model_config(spec, subsystem_seed(cfg.seed, "init"));
  mc.dim = cfg.model.dim;
  mc.layers = cfg.model.layers;
  mc.heads = cfg.model.heads;
  mc.ff_mult = cfg.model.ff_mult;
  if (cfg.model.max_seq > 0) mc.max_seq = cfg.model.max_seq;
  try {
    mc.validate();
  } catch (const ContractError& e) {
    throw UsageError(std::string("model: ") + e.what());
  }
  TransformerLM model(mc);
  TrainConfig tc = cfg.train;
  tc.seed = subsystem_seed(cfg.seed, "train");
  tc.jobs = cfg.jobs;
  const TrainReport rep = train_toy(model, corpus.lm_corpus, tc);

  fs::create_directories(dir);
  save_checkpoint(model, files[0]);
  save_dataset(corpus.examples, files[2]);
  save_dataset(corpus.dev, files[3]);
  save_dataset(corpus.heldout, files[4]);
  save_sequences(corpus.neutral, files[5]);

  json r;
  r["config"] = json::parse(config_json(cfg, false));
  r["checkpoint_hash"] = file_hash(files[0]);
  r["steps"] = rep.steps;
  r["final_loss"] = rep.final_loss;
  r["loss_curve"] = rep.loss_curve;
  write_text(files[1], r.dump(2) + "\n");
  out << "trained " << rep.steps << " steps, final loss " << rep.final_loss << "\n"
      << "wrote " << dir.string() << "\n";
}

void cmd_attribute(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.paths.dataset, "paths.dataset (--dataset)");
  require_path(cfg.paths.out, "paths.out (--out)");
  ensure_fresh(cfg.paths.out, cfg.force);
  const TransformerLM model = load_model(cfg);
  const auto examples = load_examples(cfg.paths.dataset, model);
  const auto& a = cfg.attribution;
  if (a.k < 1) throw UsageError("attribution.k must be >= 1");
  if (a.m < 1) throw UsageError("attribution.m must be >= 1");
  const double sigma = a.sigma.value_or(default_smoothgrad_sigma(model));
  const std::uint64_t root = subsystem_seed(cfg.seed, "build");

  std::vector<std::string> lines(examples.size());
  parallel_for(examples.size(), cfg.jobs, [&](std::size_t i) {
    const PreferenceExample& ex = examples[i];
    const Matrix x = embed(model, ex.prompt).embeddings;
    const Matrix baseline = make_baseline(model, x.rows(), a.baseline, a.mask_id);
    const AttributionObjective obj = AttributionObjective::from_example(ex, a.objective);
    const std::uint64_t seed = example_seed(root, ex.id);
    AttributionResult res;
    TopKSets sets;
    switch (a.method) {
      case AttributionMethod::ig:
        res = integrated_gradients(model, obj, x, baseline, a.m, a.baseline);
        break;
      case AttributionMethod::vanilla:
        res = vanilla_gradients(model, obj, x);
        break;
      case AttributionMethod::smoothgrad:
        res = smoothgrad(model, obj, x, a.samples, sigma, seed);
        break;
      case AttributionMethod::random:
        res.method = AttributionMethod::random;
        res.f_x = objective_value(model, obj, x);
        res.f_baseline = objective_value(model, obj, baseline);
        break;
    }
    sets = a.method == AttributionMethod::random ? random_selection(ex.prompt, a.k, seed)
                                                 : select_topk(res, a.k, a.filter, ex.prompt);
    json rec;
    rec["example_id"] = ex.id;
    rec["method"] = to_string(a.method);
    rec["m"] = a.method == AttributionMethod::ig ? a.m : 0;
    rec["k"] = a.k;
    rec["scores"] = res.scores;
    rec["pos_ids"] = sets.positive;
    rec["neg_ids"] = sets.negative;
    rec["f_x"] = res.f_x;
    rec["f_baseline"] = res.f_baseline;
    lines[i] = rec.dump();
  });
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(cfg.paths.out, text);
  out << "wrote " << lines.size() << " attribution records to " << cfg.paths.out << "\n";
}

void cmd_build_vectors(const RunConfig& cfg, std::ostream& out) {
  require_path(cfg.paths.dataset, "paths.dataset (--dataset)");
  require_path(cfg.paths.out, "paths.out (--out)");
  ensure_fresh(cfg.paths.out, cfg.force);
  const TransformerLM model = load_model(cfg);
  const auto examples = load_examples(cfg.paths.dataset, model);
  if (cfg.attribution.k < 1) throw UsageError("attribution.k must be >= 1");
  const SteeringVectorSet vs = build_vectors(model, examples, build_config(cfg, cfg.attribution.k));
  save_vectors(vs, cfg.paths.out);
  for (const auto& lv : vs.layers) {
    out << "layer " << lv.layer << "  |v|=" << lv.combined.norm() << "  |v+|=" << lv.positive.norm()
        << "  |v-|=" << lv.negative.norm() << "\n";
  }
  out << "examples " << vs.provenance.n_examples << ", skipped " << vs.provenance.skipped.size() << "\n";
}

void cmd_steer(const RunConfig& cfg, const std::optional<std::string>& prompt, const std::string& trace_path,
               std::ostream& out) {
  require_path(cfg.paths.vectors, "paths.vectors (--vectors)");
  if (cfg.steering.lambdas.empty()) throw UsageError("steering.lambdas is empty");
  if (!cfg.paths.out.empty()) ensure_fresh(cfg.paths.out, cfg.force);
  if (!trace_path.empty()) ensure_fresh(trace_path, cfg.force);
  const TransformerLM model = load_model(cfg);
  const SteeringVectorSet vs = load_matching_vectors(cfg, model);

  std::vector<std::pair<std::string, TokenSeq>> prompts;
  if (prompt) {
    prompts.emplace_back("prompt", parse_prompt(*prompt));
  } else {
    require_path(cfg.paths.dataset, "paths.dataset (--dataset) or --prompt");
    for (auto& ex : load_examples(cfg.paths.dataset, model)) prompts.emplace_back(ex.id, ex.prompt);
  }
  for (const auto& [id, p] : prompts) p.validate(model.config().vocab_size);

  std::string text;
  json traces = json::array();
  for (double lambda : cfg.steering.lambdas) {
    const SteeringHook hook(vs, lambda, cfg.steering.layers, cfg.steering.policy);
    std::vector<std::string> lines(prompts.size());
    std::vector<json> tr(prompts.size());
    parallel_for(prompts.size(), cfg.jobs, [&](std::size_t i) {
      const TokenSeq gen = generate_greedy(model, prompts[i].second, cfg.steering.max_new, &hook);
      json rec;
      rec["lambda"] = lambda;
      rec["example_id"] = prompts[i].first;
      rec["prompt_ids"] = prompts[i].second.ids;
      rec["generated_ids"] = std::vector<int>(gen.ids.begin() + static_cast<std::ptrdiff_t>(prompts[i].second.size()),
                                              gen.ids.end());
      lines[i] = rec.dump();
      if (!trace_path.empty()) {
        ForwardOptions opts;
        opts.capture = true;
        opts.hook = &hook;
        opts.prompt_len = static_cast<Index>(prompts[i].second.size());
        const auto pass = forward_from_embeddings(model, embed(model, gen), opts);
        json layers = json::array();
        for (const Matrix& h : pass.trace->layers) {
          const Index last = h.rows() - 1;
          layers.push_back(std::vector<double>(h.row(last).begin(), h.row(last).end()));
        }
        tr[i] = {{"lambda", lambda}, {"example_id", prompts[i].first}, {"final_residual", std::move(layers)}};
      }
    });
    for (const auto& l : lines) text += l + "\n";
    for (auto& t : tr) {
      if (!t.is_null()) traces.push_back(std::move(t));
    }
  }
  if (cfg.paths.out.empty()) {
    out << text;
  } else {
    write_text(cfg.paths.out, text);
    out << "wrote " << prompts.size() * cfg.steering.lambdas.size() << " generations to " << cfg.paths.out << "\n";
  }
  if (!trace_path.empty()) write_text(trace_path, traces.dump(2) + "\n");
}

namespace {

std::vector<std::pair<std::string, std::string>> echo(const RunConfig& cfg, std::optional<double> lambda, int k) {
  std::vector<std::pair<std::string, std::string>> e;
  e.emplace_back("lambda", lambda ? fmt(*lambda) : "none");
  e.emplace_back("k", std::to_string(k));
  e.emplace_back("m", std::to_string(cfg.attribution.m));
  e.emplace_back("layers", join_ints(cfg.steering.layers));
  e.emplace_back("method", std::string(to_string(cfg.attribution.method)));
  e.emplace_back("baseline", std::string(to_string(cfg.attribution.baseline)));
  e.emplace_back("position_policy", std::string(to_string(cfg.steering.policy)));
  e.emplace_back("seed", std::to_string(cfg.seed));
  e.emplace_back("config_hash", io::hex64(io::fnv1a(config_json(cfg, false))));
  e.emplace_back("checkpoint_hash", file_hash(cfg.paths.checkpoint));
  if (!cfg.paths.dataset.empty()) e.emplace_back("dataset_hash", file_hash(cfg.paths.dataset));
  if (!cfg.paths.corpus.empty()) e.emplace_back("corpus_hash", file_hash(cfg.paths.corpus));
  if (!cfg.paths.vectors.empty()) e.emplace_back("vectors_hash", file_hash(cfg.paths.vectors));
  return e;
}

EvalReport run_metric(const std::string& metric, const TransformerLM& model,
                      const std::vector<PreferenceExample>& examples, const std::vector<TokenSeq>& corpus,
                      const ResidualHook* hook, int jobs) {
  if (metric == "win_rate") return win_rate(model, examples, hook, jobs);
  if (metric == "mcq_accuracy") return mcq_accuracy(model, examples, hook, jobs);
  if (metric == "bleu_accuracy") return bleu_accuracy(model, examples, hook, jobs);
  if (metric == "switch_rate" || metric == "agreement") {
    if (!hook) throw UsageError("metric " + metric + " needs a vector file (--vectors)");
    if (metric == "switch_rate") return generation_switch_rate(model, examples, *hook, jobs);
    return next_token_agreement(model, corpus, *hook, jobs);
  }
  throw UsageError("unknown metric \"" + metric +
                   "\" (win_rate, mcq_accuracy, bleu_accuracy, switch_rate, agreement, ablation_curve)");
}

}  // namespace

void cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const TransformerLM model = load_model(cfg);
  const std::string& metric = cfg.eval.metric;
  const fs::path dir = cfg.paths.out;

  if (metric == "ablation_curve") {
    require_path(cfg.paths.dataset, "paths.dataset (--dataset)");
    if (cfg.eval.ks.empty()) throw UsageError("eval.ks is empty");
    const auto examples = load_examples(cfg.paths.dataset, model);
    AblationCurveConfig ac;
    ac.method = cfg.attribution.method;
    ac.steps = cfg.attribution.m;
    ac.baseline = cfg.attribution.baseline;
    ac.mask_id = cfg.attribution.mask_id;
    ac.filter = cfg.attribution.filter;
    ac.smoothgrad_samples = cfg.attribution.samples;
    ac.seed = subsystem_seed(cfg.seed, "ablation");
    ac.jobs = cfg.jobs;
    const auto rows = ablation_curve_report(model, examples, cfg.eval.ks, ac);
    const std::string csv = ablation_curve_csv(rows);
    json j;
    j["metric"] = metric;
    json cfg_echo = json::object();
    for (const auto& [k, v] : echo(cfg, std::nullopt, cfg.attribution.k)) cfg_echo[k] = v;
    j["config"] = std::move(cfg_echo);
    json jr = json::array();
    for (const auto& r : rows) {
      jr.push_back({{"k", r.k}, {"n", r.n}, {"mean_neg_removed", r.mean_neg_removed},
                    {"stderr_neg_removed", r.stderr_neg_removed}, {"mean_pos_removed", r.mean_pos_removed},
                    {"stderr_pos_removed", r.stderr_pos_removed}});
    }
    j["rows"] = std::move(jr);
    if (dir.empty()) {
      out << csv;
      return;
    }
    ensure_fresh(dir / "ablation_curve.json", cfg.force);
    ensure_fresh(dir / "ablation_curve.csv", cfg.force);
    fs::create_directories(dir);
    write_text(dir / "ablation_curve.json", j.dump(2) + "\n");
    write_text(dir / "ablation_curve.csv", csv);
    out << csv;
    return;
  }

  std::vector<PreferenceExample> examples;
  std::vector<TokenSeq> corpus;
  if (metric == "agreement") {
    require_path(cfg.paths.corpus, "paths.corpus (--corpus)");
    corpus = load_sequences(cfg.paths.corpus);
  } else {
    require_path(cfg.paths.dataset, "paths.dataset (--dataset)");
    examples = load_examples(cfg.paths.dataset, model);
  }
  std::optional<SteeringVectorSet> vs;
  std::optional<SteeringHook> hook;
  std::optional<double> lambda;
  if (!cfg.paths.vectors.empty()) {
    if (cfg.steering.lambdas.size() != 1) throw UsageError("eval takes exactly one lambda; use sweep for a grid");
    lambda = cfg.steering.lambdas.front();
    vs = load_matching_vectors(cfg, model);
    hook.emplace(*vs, *lambda, cfg.steering.layers, cfg.steering.policy);
  }
  EvalReport rep = run_metric(metric, model, examples, corpus, hook ? &*hook : nullptr, cfg.jobs);
  rep.config = echo(cfg, lambda, vs ? vs->provenance.k : cfg.attribution.k);
  if (dir.empty()) {
    out << report_json(rep);
    return;
  }
  ensure_fresh(dir / (metric + ".json"), cfg.force);
  ensure_fresh(dir / (metric + ".csv"), cfg.force);
  fs::create_directories(dir);
  write_text(dir / (metric + ".json"), report_json(rep));
  write_text(dir / (metric + ".csv"), report_csv(rep));
  out << metric << " = " << fmt(rep.value) << " (n=" << rep.n << ")\n";
}

void cmd_sweep(const RunConfig& cfg, std::ostream& out) {
  if (cfg.sweep.lambdas.empty() || cfg.sweep.ks.empty()) {
    throw UsageError("sweep grid is empty (sweep.lambdas and sweep.ks must both be nonempty)");
  }
  require_path(cfg.paths.dataset, "paths.dataset (--dataset)");
  require_path(cfg.paths.out, "paths.out (--out)");
  ensure_fresh(cfg.paths.out, cfg.force);
  const std::string& metric = cfg.eval.metric;
  if (metric == "ablation_curve") throw UsageError("sweep does not support ablation_curve; use eval");
  const TransformerLM model = load_model(cfg);
  const auto build_set = load_examples(cfg.paths.dataset, model);
  const std::string eval_path = cfg.paths.eval_dataset.empty() ? cfg.paths.dataset : cfg.paths.eval_dataset;
  std::vector<PreferenceExample> eval_set;
  std::vector<TokenSeq> corpus;
  if (metric == "agreement") {
    require_path(cfg.paths.corpus, "paths.corpus (--corpus)");
    corpus = load_sequences(cfg.paths.corpus);
  } else {
    eval_set = load_examples(eval_path, model);
  }

  const char* cache_env = std::getenv("GRAINS_CACHE_DIR");
  const std::string ckpt_hash = file_hash(cfg.paths.checkpoint);
  const std::string data_hash = dataset_hash(build_set);

  std::ostringstream csv;
  csv << "k,lambda,metric,value,n\n";
  for (int k : cfg.sweep.ks) {
    if (k < 1) throw UsageError("sweep.ks must be >= 1");
    const BuildConfig bc = build_config(cfg, k);
    std::optional<SteeringVectorSet> vs;
    fs::path cached;
    if (cache_env && *cache_env) {
      RunConfig keyed = cfg;
      keyed.attribution.k = k;
      keyed.paths = {};
      keyed.sweep = {};
      keyed.steering.lambdas = {};
      keyed.eval = {};
      const std::string key = ckpt_hash + data_hash + config_json(keyed);
      cached = fs::path(cache_env) / ("vectors-" + io::hex64(io::fnv1a(key)) + ".bin");
      if (fs::exists(cached)) vs = load_vectors(cached, data_hash);
    }
    if (!vs) {
      vs = build_vectors(model, build_set, bc);
      if (!cached.empty()) {
        fs::create_directories(cached.parent_path());
        save_vectors(*vs, cached);
      }
    }
    for (double lambda : cfg.sweep.lambdas) {
      const SteeringHook hook(*vs, lambda, cfg.steering.layers, cfg.steering.policy);
      const EvalReport rep = run_metric(metric, model, eval_set, corpus, &hook, cfg.jobs);
      csv << k << ',' << fmt(lambda) << ',' << metric << ',' << fmt(rep.value) << ',' << rep.n << '\n';
    }
  }
  write_text(cfg.paths.out, csv.str());
  out << csv.str();
}

// ---- argv -------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"grains: attribution-guided activation steering on a toy transformer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool force = false;
  std::optional<std::string> checkpoint, dataset, eval_dataset, corpus, vectors, out_path;
  std::optional<std::string> method, baseline, objective, filter, policy, pca_mode, metric;
  std::optional<int> k, m, steps, max_new;
  std::optional<double> sigma;
  std::vector<double> lambdas, sweep_lambdas;
  std::vector<int> layers, ks, sweep_ks;
  std::optional<std::string> prompt;
  std::string trace_path;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed, "root seed");
    sub->add_option("--jobs", jobs, "worker threads");
    sub->add_flag("--force", force, "overwrite existing outputs");
    sub->add_option("--out", out_path, "output file or directory");
  };
  auto model_in = [&](CLI::App* sub) { sub->add_option("--checkpoint", checkpoint, "model checkpoint"); };
  auto attribution_opts = [&](CLI::App* sub) {
    sub->add_option("--method", method, "ig | vanilla | smoothgrad | random");
    sub->add_option("--k", k, "tokens per signed set");
    sub->add_option("--m", m, "IG steps");
    sub->add_option("--baseline", baseline, "zero | token_id");
    sub->add_option("--objective", objective, "preference | likelihood_pos | likelihood_neg");
    sub->add_option("--filter", filter, "joint | text_only | visual_only");
    sub->add_option("--sigma", sigma, "SmoothGrad noise");
  };
  auto steering_opts = [&](CLI::App* sub) {
    sub->add_option("--vectors", vectors, "vector file");
    sub->add_option("--lambda", lambdas, "steering strength(s)")->delimiter(',');
    sub->add_option("--layers", layers, "layer subset (0-based)")->delimiter(',');
    sub->add_option("--policy", policy, "all_positions | generated_only");
  };

  CLI::App* train = app.add_subcommand("train-toy", "generate the synthetic task and train the toy model");
  common(train);
  train->add_option("--steps", steps, "training steps");

  CLI::App* attribute = app.add_subcommand("attribute", "per-example token attributions as JSONL");
  common(attribute);
  model_in(attribute);
  attribute->add_option("--dataset", dataset, "preference dataset JSONL");
  attribution_opts(attribute);

  CLI::App* build = app.add_subcommand("build-vectors", "build per-layer steering vectors");
  common(build);
  model_in(build);
  build->add_option("--dataset", dataset, "preference dataset JSONL");
  attribution_opts(build);
  build->add_option("--pca-mode", pca_mode, "uncentered | centered");

  CLI::App* steer = app.add_subcommand("steer", "greedy generation under the steering hook");
  common(steer);
  model_in(steer);
  steering_opts(steer);
  steer->add_option("--dataset", dataset, "prompts from a preference dataset");
  steer->add_option("--prompt", prompt, "comma-separated token ids");
  steer->add_option("--max-new", max_new, "tokens to generate");
  steer->add_option("--trace", trace_path, "write final-position residuals per layer");

  CLI::App* eval = app.add_subcommand("eval", "evaluate one metric");
  common(eval);
  model_in(eval);
  steering_opts(eval);
  attribution_opts(eval);
  eval->add_option("--dataset", dataset, "preference dataset JSONL");
  eval->add_option("--corpus", corpus, "sequence corpus JSONL (agreement)");
  eval->add_option("--metric", metric,
                   "win_rate | mcq_accuracy | bleu_accuracy | switch_rate | agreement | ablation_curve");
  eval->add_option("--ks", ks, "k list for ablation_curve")->delimiter(',');

  CLI::App* sweep = app.add_subcommand("sweep", "metric over a lambda x k grid");
  common(sweep);
  model_in(sweep);
  attribution_opts(sweep);
  sweep->add_option("--dataset", dataset, "examples used to build vectors");
  sweep->add_option("--eval-dataset", eval_dataset, "examples used to score (default: --dataset)");
  sweep->add_option("--corpus", corpus, "sequence corpus JSONL (agreement)");
  sweep->add_option("--layers", layers, "layer subset (0-based)")->delimiter(',');
  sweep->add_option("--policy", policy, "all_positions | generated_only");
  sweep->add_option("--metric", metric, "metric name");
  sweep->add_option("--lambdas", sweep_lambdas, "lambda grid")->delimiter(',');
  sweep->add_option("--ks", sweep_ks, "k grid")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ExitCode::ok : ExitCode::usage;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_json(cfg, read_text(config_path));
    if (seed) cfg.seed = *seed;
    if (jobs) cfg.jobs = *jobs;
    if (cfg.jobs < 1) throw UsageError("jobs must be >= 1");
    cfg.force = force;
    if (checkpoint) cfg.paths.checkpoint = *checkpoint;
    if (dataset) cfg.paths.dataset = *dataset;
    if (eval_dataset) cfg.paths.eval_dataset = *eval_dataset;
    if (corpus) cfg.paths.corpus = *corpus;
    if (vectors) cfg.paths.vectors = *vectors;
    if (out_path) cfg.paths.out = *out_path;
    if (method) cfg.attribution.method = parse_flag<AttributionMethod>("method", *method, attribution_method_from_string);
    if (baseline) cfg.attribution.baseline = parse_flag<BaselineKind>("baseline", *baseline, baseline_kind_from_string);
    if (objective) cfg.attribution.objective = parse_flag<ObjectiveKind>("objective", *objective, objective_kind_from_string);
    if (filter) cfg.attribution.filter = parse_flag<ModalityFilter>("filter", *filter, modality_filter_from_string);
    if (policy) cfg.steering.policy = parse_flag<PositionPolicy>("policy", *policy, position_policy_from_string);
    if (pca_mode) cfg.steering.pca_mode = parse_flag<PcaMode>("pca-mode", *pca_mode, pca_mode_from_string);
    if (metric) cfg.eval.metric = *metric;
    if (k) cfg.attribution.k = *k;
    if (m) cfg.attribution.m = *m;
    if (sigma) cfg.attribution.sigma = *sigma;
    if (steps) cfg.train.steps = *steps;
    if (max_new) cfg.steering.max_new = *max_new;
    if (!lambdas.empty()) cfg.steering.lambdas = lambdas;
    if (!layers.empty()) cfg.steering.layers = layers;
    if (!ks.empty()) cfg.eval.ks = ks;
    if (!sweep_lambdas.empty()) cfg.sweep.lambdas = sweep_lambdas;
    if (!sweep_ks.empty()) cfg.sweep.ks = sweep_ks;

    if (train->parsed()) cmd_train_toy(cfg, out);
    if (attribute->parsed()) cmd_attribute(cfg, out);
    if (build->parsed()) cmd_build_vectors(cfg, out);
    if (steer->parsed()) cmd_steer(cfg, prompt, trace_path, out);
    if (eval->parsed()) cmd_eval(cfg, out);
    if (sweep->parsed()) cmd_sweep(cfg, out);
    return ExitCode::ok;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return ExitCode::usage;
  } catch (const ContractError& e) {
    err << "usage error: " << e.what() << "\n";
    return ExitCode::usage;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << "\n";
    return ExitCode::io_format;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return ExitCode::io_format;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return ExitCode::io_format;
  } catch (const CompatibilityError& e) {
    err << "compatibility error: " << e.what() << "\n";
    return ExitCode::io_format;
  } catch (const IndexError& e) {
    err << "input error: " << e.what() << "\n";
    return ExitCode::io_format;
  } catch (const LengthError& e) {
    err << "input error: " << e.what() << "\n";
    return ExitCode::io_format;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return ExitCode::numeric_build;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return ExitCode::io_format;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return ExitCode::numeric_build;
  }
}

}  // namespace grains::cli
