#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rnnkit/data_tasks.hpp"
#include "rnnkit/diagnostics.hpp"

namespace rnnkit {

// Batch front-end: train, eval, sample, gradcheck, flowtrace. One command
// per process; all randomness derives from the single config seed, so a
// given config is bit-reproducible (including the opt-in parallel batch
// mode, which reduces per-sample results in index order).

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;
inline constexpr int kExitIo = 4;

struct RunConfig {
  std::string arch = "lstm";          // rnn | lstm | gru
  std::string task = "copy";          // copy | charlm
  std::string topology = "auto";      // auto, or the task's topology spelled out
  Index hidden = 32;
  Index layers = 1;
  Index seq_len = 21;                 // copy: total steps (lag + 1); charlm: window
  Index copy_symbols = 8;             // vocabulary size incl. the filler symbol
  std::string corpus;                 // charlm corpus path

  std::uint64_t steps = 1000;
  Index batch = 8;
  std::string optimizer = "adam";     // sgd | rmsprop | adam
  double lr = 1e-3;
  double rho = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 5.0;                  // <= 0 disables
  std::string clip_mode = "global";   // global | per_tensor
  Index bptt_k = 0;                   // 0 = full backpropagation through time
  double dropout_keep = 1.0;
  bool normalize_loss = true;
  std::string init = "glorot";        // glorot | uniform | normal
  double init_scale = 0.1;
  double forget_bias = 1.0;
  bool layer_norm = false;
  Index proj_dim = 0;                 // > 0 enables the input projection
  bool trainable_init_state = false;
  std::uint64_t seed = 42;
  double divergence_threshold = 1e12;
  Index threads = 1;

  std::string metrics;                // per-step CSV path
  std::string checkpoint_out;
  std::string checkpoint_in;          // resume (train) / model (eval, sample)
  std::uint64_t checkpoint_every = 0; // 0 = only at the end
  std::uint64_t log_every = 100;

  Index eval_samples = 200;
  double tol = kGradCheckTolerance;   // gradcheck pass tolerance
  double rec_scale = 1.0;             // flowtrace: recurrent weight multiplier
  Index sample_length = 200;
  std::string prime = "\n";
  bool stochastic = false;
  std::string out;                    // gradcheck/flowtrace CSV destination
};

// ---------------------------------------------------------------------------
// Config parsing.

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "rmsprop") return OptimizerKind::kRmsprop;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd|rmsprop|adam)");
}

inline ClipMode clip_mode_from_string(const std::string& s) {
  if (s == "global") return ClipMode::kGlobalNorm;
  if (s == "per_tensor") return ClipMode::kPerTensorNorm;
  throw ConfigError("unknown clip_mode '" + s + "' (expected global|per_tensor)");
}

inline InitScheme init_from_string(const std::string& s) {
  if (s == "glorot") return InitScheme::kGlorot;
  if (s == "uniform") return InitScheme::kUniform;
  if (s == "normal") return InitScheme::kNormal;
  throw ConfigError("unknown init '" + s + "' (expected glorot|uniform|normal)");
}

inline CellKind arch_from_string(const std::string& s) {
  if (s == "rnn") return CellKind::kRnn;
  if (s == "lstm") return CellKind::kLstm;
  if (s == "gru") return CellKind::kGru;
  throw ConfigError("unknown architecture '" + s + "' (expected rnn|lstm|gru)");
}

inline Topology task_topology(const std::string& task) {
  if (task == "copy") return Topology::kManyToOne;
  if (task == "charlm") return Topology::kManyToMany;
  throw ConfigError("unknown task '" + task + "' (expected copy|charlm)");
}

inline void validate_config(const RunConfig& cfg) {
  arch_from_string(cfg.arch);
  optimizer_from_string(cfg.optimizer);
  clip_mode_from_string(cfg.clip_mode);
  init_from_string(cfg.init);
  const Topology topo = task_topology(cfg.task);
  if (cfg.topology != "auto" && cfg.topology != topology_name(topo)) {
    throw ConfigError("task '" + cfg.task + "' runs with topology " +
                      std::string(topology_name(topo)) + ", not '" + cfg.topology + "'");
  }
  if (cfg.hidden < 1) throw ConfigError("hidden must be >= 1");
  if (cfg.layers < 1) throw ConfigError("layers must be >= 1");
  if (cfg.seq_len < 1) throw ConfigError("seq_len must be >= 1");
  if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  if (cfg.task == "copy") {
    if (cfg.copy_symbols < 2) throw ConfigError("copy_symbols must be >= 2");
    if (cfg.seq_len < 2) throw ConfigError("copy task needs seq_len >= 2 (one data step plus filler)");
  }
  if (cfg.task == "charlm" && cfg.corpus.empty()) {
    throw ConfigError("charlm requires a corpus path");
  }
  if (!(cfg.dropout_keep > 0.0) || cfg.dropout_keep > 1.0) {
    throw ConfigError("dropout_keep must be in (0, 1]");
  }
  if (cfg.bptt_k < 0) throw ConfigError("bptt_k must be >= 0");
  if (cfg.bptt_k > 0 && cfg.layers > 1) {
    throw ConfigError("truncated backprop is supported for single-layer models only");
  }
  if (cfg.proj_dim < 0) throw ConfigError("proj_dim must be >= 0");
  if (cfg.lr <= 0) throw ConfigError("lr must be > 0");
  if (cfg.eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
}

// Strict JSON config: every key must be known and well-typed.
inline void apply_json_config(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");

  try {
    for (const auto& [key, val] : j.items()) {
      if (key == "arch") cfg.arch = val.get<std::string>();
      else if (key == "task") cfg.task = val.get<std::string>();
      else if (key == "topology") cfg.topology = val.get<std::string>();
      else if (key == "hidden") cfg.hidden = val.get<Index>();
      else if (key == "layers") cfg.layers = val.get<Index>();
      else if (key == "seq_len") cfg.seq_len = val.get<Index>();
      else if (key == "copy_symbols") cfg.copy_symbols = val.get<Index>();
      else if (key == "corpus") cfg.corpus = val.get<std::string>();
      else if (key == "steps") cfg.steps = val.get<std::uint64_t>();
      else if (key == "batch") cfg.batch = val.get<Index>();
      else if (key == "optimizer") cfg.optimizer = val.get<std::string>();
      else if (key == "lr") cfg.lr = val.get<double>();
      else if (key == "rho") cfg.rho = val.get<double>();
      else if (key == "beta1") cfg.beta1 = val.get<double>();
      else if (key == "beta2") cfg.beta2 = val.get<double>();
      else if (key == "eps") cfg.eps = val.get<double>();
      else if (key == "clip") cfg.clip = val.get<double>();
      else if (key == "clip_mode") cfg.clip_mode = val.get<std::string>();
      else if (key == "bptt_k") cfg.bptt_k = val.get<Index>();
      else if (key == "dropout_keep") cfg.dropout_keep = val.get<double>();
      else if (key == "normalize_loss") cfg.normalize_loss = val.get<bool>();
      else if (key == "init") cfg.init = val.get<std::string>();
      else if (key == "init_scale") cfg.init_scale = val.get<double>();
      else if (key == "forget_bias") cfg.forget_bias = val.get<double>();
      else if (key == "layer_norm") cfg.layer_norm = val.get<bool>();
      else if (key == "proj_dim") cfg.proj_dim = val.get<Index>();
      else if (key == "trainable_init_state") cfg.trainable_init_state = val.get<bool>();
      else if (key == "seed") cfg.seed = val.get<std::uint64_t>();
      else if (key == "divergence_threshold") cfg.divergence_threshold = val.get<double>();
      else if (key == "threads") cfg.threads = val.get<Index>();
      else if (key == "metrics") cfg.metrics = val.get<std::string>();
      else if (key == "checkpoint_out") cfg.checkpoint_out = val.get<std::string>();
      else if (key == "checkpoint_in") cfg.checkpoint_in = val.get<std::string>();
      else if (key == "checkpoint_every") cfg.checkpoint_every = val.get<std::uint64_t>();
      else if (key == "log_every") cfg.log_every = val.get<std::uint64_t>();
      else if (key == "eval_samples") cfg.eval_samples = val.get<Index>();
      else if (key == "tol") cfg.tol = val.get<double>();
      else if (key == "rec_scale") cfg.rec_scale = val.get<double>();
      else if (key == "sample_length") cfg.sample_length = val.get<Index>();
      else if (key == "prime") cfg.prime = val.get<std::string>();
      else if (key == "stochastic") cfg.stochastic = val.get<bool>();
      else if (key == "out") cfg.out = val.get<std::string>();
      else throw ConfigError("config file has unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config value has wrong type: " + std::string(e.what()));
  }
}

// Canonical one-line form of the effective config, embedded in checkpoints
// so eval/sample/resume can rebuild the exact model.
inline std::string config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["arch"] = cfg.arch;
  j["task"] = cfg.task;
  j["topology"] = cfg.topology;
  j["hidden"] = cfg.hidden;
  j["layers"] = cfg.layers;
  j["seq_len"] = cfg.seq_len;
  j["copy_symbols"] = cfg.copy_symbols;
  j["corpus"] = cfg.corpus;
  j["steps"] = cfg.steps;
  j["batch"] = cfg.batch;
  j["optimizer"] = cfg.optimizer;
  j["lr"] = cfg.lr;
  j["rho"] = cfg.rho;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["eps"] = cfg.eps;
  j["clip"] = cfg.clip;
  j["clip_mode"] = cfg.clip_mode;
  j["bptt_k"] = cfg.bptt_k;
  j["dropout_keep"] = cfg.dropout_keep;
  j["normalize_loss"] = cfg.normalize_loss;
  j["init"] = cfg.init;
  j["init_scale"] = cfg.init_scale;
  j["forget_bias"] = cfg.forget_bias;
  j["layer_norm"] = cfg.layer_norm;
  j["proj_dim"] = cfg.proj_dim;
  j["trainable_init_state"] = cfg.trainable_init_state;
  j["seed"] = cfg.seed;
  j["divergence_threshold"] = cfg.divergence_threshold;
  return j.dump();  // keys serialize sorted, so the line is canonical
}

inline RunConfig config_from_json_line(const std::string& line) {
  RunConfig cfg;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint config line is not valid JSON: " + std::string(e.what()));
  }
  auto grab = [&](const char* key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if (j.contains(key)) field = j.at(key).get<T>();
  };
  grab("arch", cfg.arch);
  grab("task", cfg.task);
  grab("topology", cfg.topology);
  grab("hidden", cfg.hidden);
  grab("layers", cfg.layers);
  grab("seq_len", cfg.seq_len);
  grab("copy_symbols", cfg.copy_symbols);
  grab("corpus", cfg.corpus);
  grab("steps", cfg.steps);
  grab("batch", cfg.batch);
  grab("optimizer", cfg.optimizer);
  grab("lr", cfg.lr);
  grab("rho", cfg.rho);
  grab("beta1", cfg.beta1);
  grab("beta2", cfg.beta2);
  grab("eps", cfg.eps);
  grab("clip", cfg.clip);
  grab("clip_mode", cfg.clip_mode);
  grab("bptt_k", cfg.bptt_k);
  grab("dropout_keep", cfg.dropout_keep);
  grab("normalize_loss", cfg.normalize_loss);
  grab("init", cfg.init);
  grab("init_scale", cfg.init_scale);
  grab("forget_bias", cfg.forget_bias);
  grab("layer_norm", cfg.layer_norm);
  grab("proj_dim", cfg.proj_dim);
  grab("trainable_init_state", cfg.trainable_init_state);
  grab("seed", cfg.seed);
  grab("divergence_threshold", cfg.divergence_threshold);
  return cfg;
}

// ---------------------------------------------------------------------------
// Derived seeds: every consumer gets its own splitmix stream, keyed by
// purpose and position, so parallel and sequential execution draw the
// same numbers.

inline constexpr std::uint64_t kSaltInit = 0x5EED0001ULL;
inline constexpr std::uint64_t kSaltData = 0x5EED0002ULL;
inline constexpr std::uint64_t kSaltDropout = 0x5EED0003ULL;
inline constexpr std::uint64_t kSaltEval = 0x5EED0004ULL;
inline constexpr std::uint64_t kSaltSample = 0x5EED0005ULL;

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng stream_for(std::uint64_t seed, std::uint64_t salt, std::uint64_t index) {
  return Rng(mix_seed(mix_seed(seed, salt), index));
}

// ---------------------------------------------------------------------------
// Task plumbing.

struct TaskContext {
  Topology topo = Topology::kManyToOne;
  Index input_dim = 0;
  Index output_dim = 0;
  Index seq_len = 0;
  bool is_copy = true;
  Index copy_symbols = 0;
  TextDataset text;

  static TaskContext build(const RunConfig& cfg) {
    TaskContext t;
    t.topo = task_topology(cfg.task);
    t.seq_len = cfg.seq_len;
    t.is_copy = cfg.task == "copy";
    if (t.is_copy) {
      t.copy_symbols = cfg.copy_symbols;
      t.input_dim = cfg.copy_symbols;
      t.output_dim = cfg.copy_symbols;
    } else {
      t.text = load_text_corpus(cfg.corpus);
      if (static_cast<Index>(t.text.ids.size()) < cfg.seq_len + 1) {
        throw ConfigError("corpus has " + std::to_string(t.text.ids.size()) +
                          " symbols, too short for seq_len " + std::to_string(cfg.seq_len));
      }
      t.input_dim = t.text.vocab.size();
      t.output_dim = t.text.vocab.size();
    }
    return t;
  }

  SequenceSample<double> draw(Rng& rng) const {
    if (is_copy) {
      return make_copy_sample<double>(copy_symbols, seq_len - 1, rng);
    }
    const Index starts = static_cast<Index>(text.ids.size()) - seq_len;
    const Index start = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(starts)));
    return text_window<double>(text, start, seq_len);
  }
};

// ---------------------------------------------------------------------------
// Model assembly (always double precision in the CLI).

template <class P>
struct Model {
  std::vector<P> layers;
  Projection<double> proj;
  OptimizerState opt;
};

template <class P>
Model<P> build_model(const RunConfig& cfg, const TaskContext& task) {
  CellOptions copts;
  copts.layer_norm = cfg.layer_norm;
  copts.trainable_init_state = cfg.trainable_init_state;
  copts.output_activation = OutputActivation::kSoftmax;

  Model<P> m;
  const Index cell_in = cfg.proj_dim > 0 ? cfg.proj_dim : task.input_dim;
  m.layers.reserve(static_cast<std::size_t>(cfg.layers));
  for (Index l = 0; l < cfg.layers; ++l) {
    const Index in = l == 0 ? cell_in : cfg.hidden;
    m.layers.emplace_back(in, cfg.hidden, task.output_dim, copts);
  }
  if (cfg.proj_dim > 0) {
    m.proj = Projection<double>(cfg.proj_dim, task.input_dim);
  }

  InitConfig init;
  init.scheme = init_from_string(cfg.init);
  init.scale = cfg.init_scale;
  init.forget_bias = cfg.forget_bias;
  Rng rng = stream_for(cfg.seed, kSaltInit, 0);
  for (auto& layer : m.layers) init_params(layer, init, rng);
  if (m.proj.enabled()) init_tensor_views(m.proj.views(), init, rng);
  return m;
}

template <class P>
std::vector<TensorView<double>> model_views(Model<P>& m) {
  std::vector<TensorView<double>> out;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    for (auto v : m.layers[l].views()) {
      v.name = "layer" + std::to_string(l) + "." + v.name;
      out.push_back(std::move(v));
    }
  }
  if (m.proj.enabled()) {
    for (auto v : m.proj.views()) out.push_back(std::move(v));
  }
  return out;
}

template <class P>
std::vector<TensorView<const double>> model_views(const Model<P>& m) {
  std::vector<TensorView<const double>> out;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    for (auto v : m.layers[l].views()) {
      v.name = "layer" + std::to_string(l) + "." + v.name;
      out.push_back(std::move(v));
    }
  }
  if (m.proj.enabled()) {
    for (auto v : m.proj.views()) out.push_back(std::move(v));
  }
  return out;
}

// Gradient accumulator shaped like the model.
template <class P>
struct ModelGrads {
  std::vector<P> layers;
  Projection<double> proj;

  static ModelGrads zero_of(const Model<P>& m) {
    ModelGrads g;
    g.layers.reserve(m.layers.size());
    for (const auto& l : m.layers) g.layers.push_back(zero_like(l));
    if (m.proj.enabled()) {
      g.proj = Projection<double>(m.proj.out_dim(), m.proj.in_dim());
    }
    return g;
  }

  void add(const ModelGrads& other) {
    for (std::size_t l = 0; l < layers.size(); ++l) add_in_place(layers[l], other.layers[l]);
    if (proj.enabled()) add_in_place(proj, other.proj);
  }

  void scale(double a) {
    for (auto& l : layers) scale_in_place(l, a);
    if (proj.enabled()) scale_in_place(proj, a);
  }

  std::vector<TensorView<double>> views() {
    std::vector<TensorView<double>> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (auto v : layers[l].views()) {
        v.name = "layer" + std::to_string(l) + "." + v.name;
        out.push_back(std::move(v));
      }
    }
    if (proj.enabled()) {
      for (auto v : proj.views()) out.push_back(std::move(v));
    }
    return out;
  }

  std::vector<TensorView<const double>> views() const {
    std::vector<TensorView<const double>> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (auto v : layers[l].views()) {
        v.name = "layer" + std::to_string(l) + "." + v.name;
        out.push_back(std::move(v));
      }
    }
    if (proj.enabled()) {
      for (auto v : proj.views()) out.push_back(std::move(v));
    }
    return out;
  }
};

template <class P>
Checkpoint make_checkpoint(const RunConfig& cfg, const Model<P>& m, const TaskContext& task,
                           std::uint64_t step) {
  Checkpoint ck;
  ck.arch = cell_kind_name(CellTraits<P>::kKind);
  ck.scalar = "f64";
  ck.step = step;
  ck.rng_seed = cfg.seed;
  ck.rng_counter = 0;
  ck.config_json = config_to_json(cfg);
  if (!task.is_copy) {
    for (unsigned char b : task.text.vocab.id_to_byte) ck.vocab.push_back(b);
  }
  record_views(ck, model_views(m));
  record_optimizer(ck, m.opt, model_views(m));
  return ck;
}

template <class P>
void restore_model(const Checkpoint& ck, Model<P>& m) {
  if (ck.arch != cell_kind_name(CellTraits<P>::kKind)) {
    throw ConfigError("checkpoint was trained with arch '" + ck.arch + "'");
  }
  restore_views(ck, model_views(m));
  restore_optimizer(ck, m.opt, model_views(static_cast<const Model<P>&>(m)));
}

// ---------------------------------------------------------------------------
// Training.

template <class P>
struct SampleResult {
  ModelGrads<P> grads;
  double loss = 0;
  Index len = 0;
};

template <class P>
SampleResult<P> train_sample(const Model<P>& m, const RunConfig& cfg, const TaskContext& task,
                             std::uint64_t step, Index i) {
  const std::uint64_t idx =
      (step - 1) * static_cast<std::uint64_t>(cfg.batch) + static_cast<std::uint64_t>(i);
  Rng data_rng = stream_for(cfg.seed, kSaltData, idx);
  Rng drop_rng = stream_for(cfg.seed, kSaltDropout, idx);

  SequenceSample<double> sample = task.draw(data_rng);

  UnrollOptions<double> uopt;
  uopt.projection = m.proj.enabled() ? &m.proj : nullptr;
  uopt.dropout_keep = cfg.dropout_keep;
  uopt.rng = &drop_rng;
  uopt.train_mode = true;

  SampleResult<P> out;
  out.grads = ModelGrads<P>::zero_of(m);
  out.len = static_cast<Index>(sample.inputs.size());

  if (m.layers.size() == 1 && cfg.bptt_k > 0) {
    Trace<P> tr = unroll_forward(m.layers[0], sample.inputs, task.topo, uopt);
    BpttResult<P> r = truncated_bptt(m.layers[0], tr, sample.targets, cfg.bptt_k);
    out.loss = r.loss;
    out.grads.layers[0] = std::move(r.grads);
    if (m.proj.enabled()) out.grads.proj = std::move(r.proj_grads);
    return out;
  }

  std::vector<Trace<P>> traces = stack_forward(m.layers, sample.inputs, task.topo, uopt);
  StackBpttResult<P> r = stack_bptt(m.layers, traces, sample.targets);
  out.loss = r.loss;
  out.grads.layers = std::move(r.grads);
  if (m.proj.enabled()) out.grads.proj = std::move(r.proj_grads);
  return out;
}

template <class P>
int do_train(RunConfig cfg) {
  const TaskContext task = TaskContext::build(cfg);
  Model<P> m = build_model<P>(cfg, task);

  std::uint64_t start_step = 0;
  if (!cfg.checkpoint_in.empty()) {
    Checkpoint ck = load_checkpoint(cfg.checkpoint_in);
    restore_model(ck, m);
    start_step = ck.step;
    if (start_step > cfg.steps) {
      throw ConfigError("checkpoint is at step " + std::to_string(start_step) +
                        ", beyond the requested budget of " + std::to_string(cfg.steps));
    }
  }

  std::unique_ptr<std::ofstream> metrics;
  if (!cfg.metrics.empty()) {
    metrics = std::make_unique<std::ofstream>(cfg.metrics, std::ios::trunc);
    if (!*metrics) throw IoError("cannot open metrics file: " + cfg.metrics);
    *metrics << "step,loss,norm_loss,grad_norm,clipped\n";
    metrics->flush();
  }

  const OptimizerConfig opt_cfg{optimizer_from_string(cfg.optimizer), cfg.lr, cfg.rho,
                                cfg.beta1,                            cfg.beta2, cfg.eps};
  const ClipMode clip_mode = clip_mode_from_string(cfg.clip_mode);

  auto save = [&](std::uint64_t step) {
    if (cfg.checkpoint_out.empty()) return;
    save_checkpoint(cfg.checkpoint_out, make_checkpoint(cfg, m, task, step));
  };

  for (std::uint64_t step = start_step + 1; step <= cfg.steps; ++step) {
    const Index B = cfg.batch;
    std::vector<SampleResult<P>> results(static_cast<std::size_t>(B));
    if (cfg.threads > 1) {
      std::vector<std::thread> pool;
      const Index workers = std::min<Index>(cfg.threads, B);
      for (Index w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
          for (Index i = w; i < B; i += workers) {
            results[static_cast<std::size_t>(i)] = train_sample(m, cfg, task, step, i);
          }
        });
      }
      for (auto& th : pool) th.join();
    } else {
      for (Index i = 0; i < B; ++i) {
        results[static_cast<std::size_t>(i)] = train_sample(m, cfg, task, step, i);
      }
    }

    // Index-ordered reduction keeps multi-threaded runs bit-identical to
    // sequential ones.
    ModelGrads<P> grads = ModelGrads<P>::zero_of(m);
    double loss_sum = 0;
    Index max_len = 0;
    for (Index i = 0; i < B; ++i) {
      auto& r = results[static_cast<std::size_t>(i)];
      grads.add(r.grads);
      loss_sum += r.loss;
      max_len = std::max(max_len, r.len);
    }
    grads.scale(1.0 / static_cast<double>(B));
    const double loss = loss_sum / static_cast<double>(B);
    const double norm_loss = cfg.normalize_loss ? normalize_loss(loss, max_len) : loss;

    if (!std::isfinite(loss) || loss > cfg.divergence_threshold) {
      std::cerr << "training diverged at step " << step << ": loss = " << loss << "\n";
      return kExitDiverged;
    }

    auto grad_views = grads.views();
    const ClipResult<double> clip = clip_gradients(grad_views, cfg.clip, clip_mode);
    optimizer_step<double>(model_views(m), static_cast<const ModelGrads<P>&>(grads).views(),
                           m.opt, opt_cfg);

    if (metrics) {
      *metrics << step << "," << csv_number(loss) << "," << csv_number(norm_loss) << ","
               << csv_number(clip.norm_before) << "," << (clip.clipped ? 1 : 0) << "\n";
      metrics->flush();
      if (!*metrics) throw IoError("failed writing metrics file: " + cfg.metrics);
    }
    if (cfg.log_every > 0 && step % cfg.log_every == 0) {
      std::cout << "step " << step << " loss " << loss << " norm_loss " << norm_loss << "\n";
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      save(step);
    }
  }

  save(cfg.steps);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalSummary {
  double mean_loss = 0;  // per target
  double accuracy = 0;
  Index samples = 0;
};

template <class P>
EvalSummary evaluate_model(const Model<P>& m, const RunConfig& cfg, const TaskContext& task) {
  UnrollOptions<double> uopt;
  uopt.projection = m.proj.enabled() ? &m.proj : nullptr;

  EvalSummary s;
  s.samples = cfg.eval_samples;
  double loss_sum = 0;
  std::uint64_t targets_seen = 0;
  std::uint64_t correct = 0;
  for (Index e = 0; e < cfg.eval_samples; ++e) {
    Rng rng = stream_for(cfg.seed, kSaltEval, static_cast<std::uint64_t>(e));
    SequenceSample<double> sample = task.draw(rng);
    std::vector<Trace<P>> traces = stack_forward(m.layers, sample.inputs, task.topo, uopt);
    const Trace<P>& top = traces.back();
    for (std::size_t k = 0; k < top.outputs.size(); ++k) {
      loss_sum += step_loss(top.outputs[k], sample.targets[k]);
      targets_seen += 1;
      correct += argmax(top.outputs[k]) == argmax(sample.targets[k]) ? 1 : 0;
    }
  }
  s.mean_loss = loss_sum / static_cast<double>(targets_seen);
  s.accuracy = static_cast<double>(correct) / static_cast<double>(targets_seen);
  return s;
}

template <class P>
int do_eval(const RunConfig& flags) {
  Checkpoint ck = load_checkpoint(flags.checkpoint_in);
  RunConfig cfg = config_from_json_line(ck.config_json);
  cfg.seed = flags.seed;
  cfg.eval_samples = flags.eval_samples;
  if (!flags.corpus.empty()) cfg.corpus = flags.corpus;
  validate_config(cfg);

  const TaskContext task = TaskContext::build(cfg);
  Model<P> m = build_model<P>(cfg, task);
  restore_model(ck, m);

  EvalSummary s = evaluate_model(m, cfg, task);
  std::cout << "samples " << s.samples << "\n";
  std::cout << "mean_loss " << csv_number(s.mean_loss) << "\n";
  std::cout << "accuracy " << csv_number(s.accuracy) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Sampling (charlm checkpoints).

template <class P>
int do_sample(const RunConfig& flags) {
  Checkpoint ck = load_checkpoint(flags.checkpoint_in);
  RunConfig cfg = config_from_json_line(ck.config_json);
  if (cfg.task != "charlm" || ck.vocab.empty()) {
    throw ConfigError("sampling requires a charlm checkpoint with a stored vocabulary");
  }

  std::vector<unsigned char> bytes;
  bytes.reserve(ck.vocab.size());
  for (int b : ck.vocab) {
    if (b < 0 || b > 255) throw IoError("checkpoint vocabulary entry out of range");
    bytes.push_back(static_cast<unsigned char>(b));
  }
  const Vocab vocab = Vocab::from_bytes(bytes);
  const Index K = vocab.size();

  // Rebuild the model without touching the corpus: dims come from the
  // stored vocabulary.
  TaskContext task;
  task.topo = Topology::kManyToMany;
  task.is_copy = false;
  task.input_dim = K;
  task.output_dim = K;
  task.seq_len = cfg.seq_len;
  Model<P> m = build_model<P>(cfg, task);
  restore_model(ck, m);

  if (flags.prime.empty()) {
    throw ConfigError("prime text must not be empty");
  }
  for (char ch : flags.prime) {
    if (vocab.id_of(static_cast<unsigned char>(ch)) < 0) {
      throw ConfigError(std::string("prime character '") + ch + "' is not in the vocabulary");
    }
  }

  using Traits = CellTraits<P>;
  std::vector<CellState<double>> states;
  for (const P& layer : m.layers) {
    CellState<double> st;
    st.h = layer.h0.size() > 0 ? layer.h0 : Vector::Zero(layer.hidden_dim());
    if constexpr (Traits::kHasCellState) {
      if constexpr (requires { layer.c0; }) {
        st.c = layer.c0.size() > 0 ? layer.c0 : Vector::Zero(layer.hidden_dim());
      } else {
        st.c = Vector::Zero(layer.hidden_dim());
      }
    }
    states.push_back(std::move(st));
  }

  typename Traits::Cache scratch;
  auto advance = [&](Index symbol) -> Vector {
    Vector x = one_hot<double>(symbol, K);
    if (m.proj.enabled()) x = input_projection(m.proj, x);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      states[l] = Traits::step(m.layers[l], x, states[l], scratch);
      x = states[l].h;
    }
    return output_head(m.layers.back().head, x);
  };

  Rng rng = stream_for(flags.seed, kSaltSample, 0);
  auto pick = [&](const Vector& dist) -> Index {
    if (!flags.stochastic) return argmax(dist);
    const double r = rng.uniform();
    double acc = 0;
    for (Index i = 0; i < dist.size(); ++i) {
      acc += dist[i];
      if (r < acc) return i;
    }
    return dist.size() - 1;
  };

  std::string generated = flags.prime;
  Vector dist;
  for (char ch : flags.prime) {
    dist = advance(vocab.id_of(static_cast<unsigned char>(ch)));
  }
  for (Index i = 0; i < flags.sample_length; ++i) {
    const Index next = pick(dist);
    generated.push_back(static_cast<char>(vocab.id_to_byte[static_cast<std::size_t>(next)]));
    dist = advance(next);
  }
  std::cout << generated << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Gradient check.

template <class P>
int do_gradcheck(const RunConfig& cfg, Index input_dim, Index output_dim) {
  CellOptions copts;
  copts.layer_norm = cfg.layer_norm;
  copts.trainable_init_state = cfg.trainable_init_state;
  P params(cfg.proj_dim > 0 ? cfg.proj_dim : input_dim, cfg.hidden, output_dim, copts);

  Projection<double> proj;
  if (cfg.proj_dim > 0) proj = Projection<double>(cfg.proj_dim, input_dim);

  InitConfig init;
  init.scheme = init_from_string(cfg.init);
  init.scale = cfg.init_scale;
  init.forget_bias = cfg.forget_bias;
  Rng rng = stream_for(cfg.seed, kSaltInit, 0);
  init_params(params, init, rng);
  if (proj.enabled()) init_tensor_views(proj.views(), init, rng);

  Rng data_rng = stream_for(cfg.seed, kSaltData, 0);
  std::vector<Vector> inputs;
  std::vector<Vector> targets;
  for (Index t = 0; t < cfg.seq_len; ++t) {
    Vector x(input_dim);
    for (Index i = 0; i < input_dim; ++i) x[i] = data_rng.uniform(-1.0, 1.0);
    inputs.push_back(std::move(x));
  }
  const Topology topo = Topology::kManyToMany;
  for (Index t = 0; t < cfg.seq_len; ++t) {
    targets.push_back(one_hot<double>(
        static_cast<Index>(data_rng.uniform_int(static_cast<std::uint64_t>(output_dim))),
        output_dim));
  }

  GradCheckReport<double> report =
      grad_check_model(params, proj.enabled() ? &proj : nullptr, inputs, targets, topo);

  std::printf("%-24s %-12s %s\n", "tensor", "max_rel_err", "worst (analytic vs numeric)");
  for (const auto& e : report.entries) {
    std::printf("%-24s %-12.3e %.12g vs %.12g\n", e.name.c_str(), e.max_rel_error,
                e.analytic_at_worst, e.numeric_at_worst);
  }
  std::printf("max relative error: %.6e (tolerance %.6e)\n", report.max_rel_error, cfg.tol);

  if (!cfg.out.empty()) {
    std::ofstream os(cfg.out, std::ios::trunc);
    if (!os) throw IoError("cannot open report file: " + cfg.out);
    write_gradcheck_csv(os, report);
  }
  if (report.pass(cfg.tol)) {
    std::printf("gradient check passed\n");
    return kExitOk;
  }
  std::printf("gradient check FAILED\n");
  return kExitCheckFailed;
}

// ---------------------------------------------------------------------------
// Gradient-flow trace.

template <class P>
int do_flowtrace(const RunConfig& cfg, Index input_dim, Index output_dim) {
  CellOptions copts;
  copts.layer_norm = cfg.layer_norm;
  P params(input_dim, cfg.hidden, output_dim, copts);

  InitConfig init;
  init.scheme = init_from_string(cfg.init);
  init.scale = cfg.init_scale;
  init.forget_bias = cfg.forget_bias;
  Rng rng = stream_for(cfg.seed, kSaltInit, 0);
  init_params(params, init, rng);

  // Scale the recurrent weights to stage vanishing (< 1) or exploding
  // (> 1) regimes; 0 severs the recurrence entirely.
  P::enumerate(params, [&](const std::string& name, auto& t) {
    if (name.size() >= 3 && name.compare(name.size() - 3, 3, ".wh") == 0) {
      t *= cfg.rec_scale;
    }
  });

  Rng data_rng = stream_for(cfg.seed, kSaltData, 0);
  std::vector<Vector> inputs;
  for (Index t = 0; t < cfg.seq_len; ++t) {
    Vector x(input_dim);
    for (Index i = 0; i < input_dim; ++i) x[i] = data_rng.uniform(-1.0, 1.0);
    inputs.push_back(std::move(x));
  }
  std::vector<Vector> targets;
  targets.push_back(one_hot<double>(
      static_cast<Index>(data_rng.uniform_int(static_cast<std::uint64_t>(output_dim))),
      output_dim));

  FlowTrace<double> flow = gradient_flow(params, inputs, targets, Topology::kManyToOne);

  if (!cfg.out.empty()) {
    std::ofstream os(cfg.out, std::ios::trunc);
    if (!os) throw IoError("cannot open output file: " + cfg.out);
    write_flow_csv(os, flow);
    if (!os) throw IoError("failed writing output file: " + cfg.out);
    std::printf("first %.6e last %.6e decay_ratio %.6e\n", flow.first(), flow.last(),
                flow.decay_ratio());
  } else {
    write_flow_csv(std::cout, flow);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point.

inline int dispatch_arch_train(const RunConfig& cfg) {
  switch (arch_from_string(cfg.arch)) {
    case CellKind::kRnn: return do_train<RnnParams<double>>(cfg);
    case CellKind::kLstm: return do_train<LstmParams<double>>(cfg);
    case CellKind::kGru: return do_train<GruParams<double>>(cfg);
  }
  return kExitUsage;
}

inline int run_cli(int argc, const char* const* argv) {
  RunConfig cfg;

  // Config file first, explicit flags second, so flags win.
  try {
    for (int i = 1; i + 1 < argc; ++i) {
      if (std::string(argv[i]) == "--config") {
        apply_json_config(cfg, argv[i + 1]);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }

  CLI::App app{"recurrent sequence learning toolkit"};
  app.require_subcommand(1);
  std::string config_path;  // consumed above; declared so CLI11 accepts it

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file (flags override it)");
    cmd->add_option("--seed", cfg.seed, "master seed");
    cmd->add_option("--arch", cfg.arch, "rnn | lstm | gru");
  };

  CLI::App* train = app.add_subcommand("train", "run the training loop");
  add_common(train);
  train->add_option("--task", cfg.task, "copy | charlm");
  train->add_option("--topology", cfg.topology, "auto or the task topology");
  train->add_option("--hidden", cfg.hidden, "hidden state size");
  train->add_option("--layers", cfg.layers, "stacked layers");
  train->add_option("--seq-len", cfg.seq_len, "sequence length");
  train->add_option("--copy-symbols", cfg.copy_symbols, "copy task vocabulary size");
  train->add_option("--corpus", cfg.corpus, "charlm corpus path");
  train->add_option("--steps", cfg.steps, "training step budget");
  train->add_option("--batch", cfg.batch, "sequences per step");
  train->add_option("--optimizer", cfg.optimizer, "sgd | rmsprop | adam");
  train->add_option("--lr", cfg.lr, "learning rate");
  train->add_option("--rho", cfg.rho, "rmsprop decay");
  train->add_option("--beta1", cfg.beta1, "adam beta1");
  train->add_option("--beta2", cfg.beta2, "adam beta2");
  train->add_option("--eps", cfg.eps, "optimizer epsilon");
  train->add_option("--clip", cfg.clip, "gradient norm threshold (<=0 disables)");
  train->add_option("--clip-mode", cfg.clip_mode, "global | per_tensor");
  train->add_option("--bptt-k", cfg.bptt_k, "truncation window (0 = full)");
  train->add_option("--dropout-keep", cfg.dropout_keep, "keep probability");
  train->add_flag("--normalize-loss,!--no-normalize-loss", cfg.normalize_loss,
                  "divide loss by max sequence length");
  train->add_option("--init", cfg.init, "glorot | uniform | normal");
  train->add_option("--init-scale", cfg.init_scale, "uniform/normal init scale");
  train->add_option("--forget-bias", cfg.forget_bias, "lstm forget gate bias");
  train->add_flag("--layer-norm", cfg.layer_norm, "layer norm on gate pre-activations");
  train->add_option("--proj-dim", cfg.proj_dim, "input projection size (0 disables)");
  train->add_flag("--trainable-init-state", cfg.trainable_init_state,
                  "learn the initial state");
  train->add_option("--divergence-threshold", cfg.divergence_threshold,
                    "abort when loss exceeds this");
  train->add_option("--threads", cfg.threads, "parallel batch workers");
  train->add_option("--metrics", cfg.metrics, "per-step CSV path");
  train->add_option("--checkpoint-out", cfg.checkpoint_out, "checkpoint path");
  train->add_option("--resume", cfg.checkpoint_in, "checkpoint to resume from");
  train->add_option("--checkpoint-every", cfg.checkpoint_every, "save cadence in steps");
  train->add_option("--log-every", cfg.log_every, "stdout cadence in steps");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", cfg.checkpoint_in, "checkpoint path")->required();
  eval->add_option("--samples", cfg.eval_samples, "evaluation samples");
  eval->add_option("--corpus", cfg.corpus, "override the corpus path");

  CLI::App* sample = app.add_subcommand("sample", "generate text from a charlm checkpoint");
  add_common(sample);
  sample->add_option("--checkpoint", cfg.checkpoint_in, "checkpoint path")->required();
  sample->add_option("--prime", cfg.prime, "priming text");
  sample->add_option("--length", cfg.sample_length, "characters to generate");
  sample->add_flag("--stochastic", cfg.stochastic, "sample instead of argmax");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gradcheck);
  Index gc_input = 3, gc_output = 2;
  gradcheck->add_option("--input-dim", gc_input, "input dimension");
  gradcheck->add_option("--hidden", cfg.hidden, "hidden state size");
  gradcheck->add_option("--output-dim", gc_output, "output dimension");
  gradcheck->add_option("--seq-len", cfg.seq_len, "sequence length");
  gradcheck->add_option("--tol", cfg.tol, "pass tolerance on relative error");
  gradcheck->add_flag("--layer-norm", cfg.layer_norm, "include layer norm");
  gradcheck->add_option("--proj-dim", cfg.proj_dim, "include an input projection");
  gradcheck->add_flag("--trainable-init-state", cfg.trainable_init_state,
                      "include a trainable initial state");
  gradcheck->add_option("--init", cfg.init, "glorot | uniform | normal");
  gradcheck->add_option("--init-scale", cfg.init_scale, "init scale");
  gradcheck->add_option("--out", cfg.out, "write per-tensor CSV here");

  CLI::App* flowtrace = app.add_subcommand("flowtrace", "per-step gradient norms CSV");
  add_common(flowtrace);
  Index ft_input = 8, ft_output = 4;
  flowtrace->add_option("--input-dim", ft_input, "input dimension");
  flowtrace->add_option("--hidden", cfg.hidden, "hidden state size");
  flowtrace->add_option("--output-dim", ft_output, "output dimension");
  flowtrace->add_option("--seq-len", cfg.seq_len, "sequence length");
  flowtrace->add_option("--rec-scale", cfg.rec_scale, "recurrent weight multiplier");
  flowtrace->add_option("--init", cfg.init, "glorot | uniform | normal");
  flowtrace->add_option("--init-scale", cfg.init_scale, "init scale");
  flowtrace->add_option("--forget-bias", cfg.forget_bias, "lstm forget gate bias");
  flowtrace->add_flag("--layer-norm", cfg.layer_norm, "layer norm on gate pre-activations");
  flowtrace->add_option("--out", cfg.out, "CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train->parsed()) {
      validate_config(cfg);
      return dispatch_arch_train(cfg);
    }
    if (eval->parsed()) {
      switch (arch_from_string(config_from_json_line(load_checkpoint(cfg.checkpoint_in)
                                                         .config_json)
                                   .arch)) {
        case CellKind::kRnn: return do_eval<RnnParams<double>>(cfg);
        case CellKind::kLstm: return do_eval<LstmParams<double>>(cfg);
        case CellKind::kGru: return do_eval<GruParams<double>>(cfg);
      }
    }
    if (sample->parsed()) {
      switch (arch_from_string(config_from_json_line(load_checkpoint(cfg.checkpoint_in)
                                                         .config_json)
                                   .arch)) {
        case CellKind::kRnn: return do_sample<RnnParams<double>>(cfg);
        case CellKind::kLstm: return do_sample<LstmParams<double>>(cfg);
        case CellKind::kGru: return do_sample<GruParams<double>>(cfg);
      }
    }
    if (gradcheck->parsed()) {
      if (cfg.seq_len < 1) throw ConfigError("seq_len must be >= 1");
      switch (arch_from_string(cfg.arch)) {
        case CellKind::kRnn: return do_gradcheck<RnnParams<double>>(cfg, gc_input, gc_output);
        case CellKind::kLstm: return do_gradcheck<LstmParams<double>>(cfg, gc_input, gc_output);
        case CellKind::kGru: return do_gradcheck<GruParams<double>>(cfg, gc_input, gc_output);
      }
    }
    if (flowtrace->parsed()) {
      if (cfg.seq_len < 1) throw ConfigError("seq_len must be >= 1");
      switch (arch_from_string(cfg.arch)) {
        case CellKind::kRnn: return do_flowtrace<RnnParams<double>>(cfg, ft_input, ft_output);
        case CellKind::kLstm: return do_flowtrace<LstmParams<double>>(cfg, ft_input, ft_output);
        case CellKind::kGru: return do_flowtrace<GruParams<double>>(cfg, ft_input, ft_output);
      }
    }
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitDiverged;
  }
}

}  // namespace rnnkit
