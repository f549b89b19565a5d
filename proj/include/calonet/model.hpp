#pragma once

// Full classifier: encoder -> node features -> GIN over the causal graph ->
// mean readout -> MLP head. Cross-entropy training with Adam, input-gradient
// saliency, and versioned JSON model files.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "calonet/causal.hpp"
#include "calonet/common.hpp"
#include "calonet/dataset.hpp"
#include "calonet/encoder.hpp"
#include "calonet/gnn.hpp"
#include "calonet/tensor.hpp"

namespace calonet {

inline constexpr int kModelFormatVersion = 1;

enum class GraphScope { per_sample, dataset_mean };

inline GraphScope graph_scope_from_string(const std::string& s) {
  if (s == "sample") return GraphScope::per_sample;
  if (s == "dataset-mean") return GraphScope::dataset_mean;
  throw ConfigError("unknown graph scope '" + s + "' (expected sample or dataset-mean)");
}

inline std::string to_string(GraphScope s) {
  return s == GraphScope::per_sample ? "sample" : "dataset-mean";
}

struct CausalSettings {
  BinningSpec binning;
  HistoryOrder order;
  double threshold = 0.0;
  GraphScope scope = GraphScope::per_sample;
};

struct ModelConfig {
  std::size_t n_dims = 0;
  std::size_t n_classes = 0;
  EncoderConfig encoder;
  GinConfig gin;
  CausalSettings causal;
  GnnDirection gnn_direction = GnnDirection::in;
  bool weighted_aggregation = false;
  NormalizationStats norm;  // applied to inputs at eval time; identity if none
  std::vector<std::string> class_names;
};

struct CaLoNetModel {
  ModelConfig config;
  EncoderState encoder;
  std::vector<GinLayer> gin_layers;
  Tensor head_w1, head_b1, head_w2, head_b2;  // d -> d -> n_classes, relu between
  // populated under dataset-mean graph scope: the training-set matrix that
  // evaluation must reuse
  std::optional<CausalMatrix> shared_matrix;

  template <typename Fn>
  void visit(Fn&& fn) {
    visit_params(encoder, fn);
    visit_params(gin_layers, fn);
    fn("head.w1", head_w1);
    fn("head.b1", head_b1);
    fn("head.w2", head_w2);
    fn("head.b2", head_b2);
  }

  std::vector<std::pair<std::string, Tensor>> parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
  }

  std::vector<Tensor> parameter_tensors() {
    std::vector<Tensor> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  }

  void zero_grad() {
    visit([](const std::string&, Tensor& t) { t.zero_grad(); });
  }
};

inline CaLoNetModel make_model(const ModelConfig& config, std::uint64_t seed) {
  if (config.n_dims < 1) throw ConfigError("make_model: n_dims must be >= 1");
  if (config.n_classes < 1) throw ConfigError("make_model: n_classes must be >= 1");
  ModelConfig cfg = config;
  cfg.gin.node_dim = cfg.encoder.node_dim;  // one node width through the stack
  if (cfg.norm.mean.empty()) cfg.norm = NormalizationStats::identity(cfg.n_dims);
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  CaLoNetModel m;
  m.config = cfg;
  m.encoder = make_encoder(cfg.encoder, cfg.n_dims, rng);
  m.gin_layers = make_gin(cfg.gin, rng);
  const std::size_t d = cfg.encoder.node_dim;
  m.head_w1 = detail::init_uniform({d, d}, d, rng);
  m.head_b1 = detail::init_uniform({d}, d, rng);
  m.head_w2 = detail::init_uniform({d, cfg.n_classes}, d, rng);
  m.head_b2 = detail::init_uniform({cfg.n_classes}, d, rng);
  return m;
}

// logits for one sample given its causal matrix; when `input_leaf` is given,
// the patch matrix is exposed as a gradient leaf (for saliency)
inline Tensor model_forward(const CaLoNetModel& m, const TimeSeriesSample& sample,
                            const CausalMatrix& matrix, Tensor* input_leaf = nullptr) {
  if (sample.values.size() != m.config.n_dims)
    throw ShapeError("model_forward: sample has " + std::to_string(sample.values.size()) +
                     " dimensions, model expects " + std::to_string(m.config.n_dims));
  if (matrix.n != m.config.n_dims)
    throw ShapeError("model_forward: causal matrix of " + std::to_string(matrix.n) +
                     " nodes, model expects " + std::to_string(m.config.n_dims));
  Tensor patches = patch_matrix(sample.values, m.config.encoder.patch_size);
  if (input_leaf) {
    patches.set_requires_grad(true);
    *input_leaf = patches;
  }
  Tensor encoded = encoder_forward(m.encoder, patches);
  Tensor nodes = node_features(encoded, m.encoder);
  Tensor h = gin_forward(nodes, matrix, m.gin_layers, m.config.gnn_direction,
                         m.config.weighted_aggregation);
  Tensor pooled = reshape(readout(h), {1, m.config.encoder.node_dim});
  Tensor hidden = relu(add(matmul(pooled, m.head_w1), m.head_b1));
  Tensor logits = add(matmul(hidden, m.head_w2), m.head_b2);
  return reshape(logits, {m.config.n_classes});
}

// ---------------------------------------------------------------------------
// cross-entropy over a logits batch (natural log, log-sum-exp stabilized)

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  for (int label : labels)
    if (label < 0 || static_cast<std::size_t>(label) >= m)
      throw ConfigError("cross_entropy: label " + std::to_string(label) + " out of range [0, " +
                        std::to_string(m) + ")");
  // probs cached for the backward rule
  auto probs = std::make_shared<std::vector<double>>(n * m);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * m;
    double mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    for (std::size_t j = 0; j < m; ++j) (*probs)[i * m + j] = std::exp(row[j] - lse);
    loss += lse - row[static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<double>(n);
  Tensor out = Tensor::scalar(loss);
  if (detail::recording({&logits})) {
    detail::mark_op_output(out);
    auto ld = logits.node(), od = out.node();
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    Tape::active()->record([ld, od, probs, labels_copy, n, m](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& gl = gs.accum(ld.get(), n * m);
      const double scale = (*g)[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double y = static_cast<std::size_t>((*labels_copy)[i]) == j ? 1.0 : 0.0;
          gl[i * m + j] += scale * ((*probs)[i * m + j] - y);
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// causal-matrix precomputation (Step 1 of the pipeline, cached per sample)

inline std::vector<CausalMatrix> precompute_matrices(const Dataset& ds, const CausalSettings& cs,
                                                     std::size_t n_threads = 1) {
  std::vector<CausalMatrix> out(ds.samples.size());
  parallel_for(ds.samples.size(), n_threads, [&](std::size_t i) {
    out[i] = build_causal_matrix(ds.samples[i], cs.threshold, cs.order, cs.binning);
  });
  return out;
}

// dataset-mean scope: one shared matrix for every sample
inline std::vector<CausalMatrix> shared_matrices(const CausalMatrix& m, std::size_t count) {
  return std::vector<CausalMatrix>(count, m);
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

inline int argmax_label(const Tensor& logits) {
  int best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits.data()[j] > logits.data()[best]) best = static_cast<int>(j);  // ties keep lowest
  return best;
}

inline EvalResult evaluate(const CaLoNetModel& m, const Dataset& ds,
                           const std::vector<CausalMatrix>& matrices) {
  if (matrices.size() != ds.samples.size())
    throw ConfigError("evaluate: " + std::to_string(matrices.size()) + " matrices for " +
                      std::to_string(ds.samples.size()) + " samples");
  EvalResult r;
  r.confusion.assign(m.config.n_classes, std::vector<std::size_t>(m.config.n_classes, 0));
  if (ds.samples.empty()) return r;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    Tensor logits = model_forward(m, ds.samples[i], matrices[i]);
    const int pred = argmax_label(logits);
    const int truth = ds.samples[i].label;
    r.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)]++;
    if (pred == truth) ++correct;
    loss_sum += cross_entropy(reshape(logits, {1, m.config.n_classes}), {truth}).item();
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.samples.size());
  r.loss = loss_sum / static_cast<double>(ds.samples.size());
  return r;
}

// ---------------------------------------------------------------------------
// training

struct TrainReport {
  std::vector<double> train_loss, train_acc, test_loss, test_acc;
  std::vector<double> epoch_seconds;  // informational; never serialized
  std::vector<std::vector<std::size_t>> confusion;
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t n_threads = 1;  // causal precomputation only; training is sequential
  // progress hook, called after each epoch with the report so far
  std::function<void(std::size_t, const TrainReport&)> on_epoch;
};

inline std::string report_csv(const TrainReport& r) {
  std::string out = "epoch,train_loss,train_acc,test_loss,test_acc\n";
  for (std::size_t e = 0; e < r.train_loss.size(); ++e)
    out += std::to_string(e + 1) + "," + format_double(r.train_loss[e]) + "," +
           format_double(r.train_acc[e]) + "," + format_double(r.test_loss[e]) + "," +
           format_double(r.test_acc[e]) + "\n";
  return out;
}

inline std::pair<CaLoNetModel, TrainReport> train(const Dataset& train_set, const Dataset& test_set,
                                                  const ModelConfig& model_cfg,
                                                  const TrainConfig& tc) {
  if (train_set.samples.empty()) throw ConfigError("train: empty training set");
  if (tc.epochs < 1 || tc.batch_size < 1) throw ConfigError("train: epochs and batch_size must be >= 1");
  if (test_set.n_dims != train_set.n_dims || test_set.n_classes != train_set.n_classes)
    throw ConfigError("train: train/test datasets disagree on n_dims or n_classes");

  ModelConfig cfg = model_cfg;
  cfg.n_dims = train_set.n_dims;
  cfg.n_classes = train_set.n_classes;
  cfg.class_names = train_set.class_names;
  CaLoNetModel model = make_model(cfg, tc.seed);

  // Step 1: causal graphs, once, before any training
  std::vector<CausalMatrix> train_matrices, test_matrices;
  if (cfg.causal.scope == GraphScope::dataset_mean) {
    CausalMatrix shared = mean_causal_matrix(train_set, cfg.causal.threshold, cfg.causal.order,
                                             cfg.causal.binning, tc.n_threads);
    model.shared_matrix = shared;
    train_matrices = shared_matrices(shared, train_set.samples.size());
    test_matrices = shared_matrices(shared, test_set.samples.size());
  } else {
    train_matrices = precompute_matrices(train_set, cfg.causal, tc.n_threads);
    test_matrices = precompute_matrices(test_set, cfg.causal, tc.n_threads);
  }

  std::vector<Tensor> params = model.parameter_tensors();
  AdamState adam;
  adam.lr = tc.lr;
  TrainReport report;
  const std::size_t n_train = train_set.samples.size();
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto t_start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& chunk : batches(n_train, tc.batch_size, mix_seed(tc.seed, epoch))) {
      model.zero_grad();
      const Tensor inv_batch = Tensor::scalar(1.0 / static_cast<double>(chunk.size()));
      for (std::size_t idx : chunk) {
        const auto& sample = train_set.samples[idx];
        Tape tape;
        Tensor logits = model_forward(model, sample, train_matrices[idx]);
        if (argmax_label(logits) == sample.label) ++correct;
        Tensor ce = cross_entropy(reshape(logits, {1, cfg.n_classes}), {sample.label});
        loss_sum += ce.item();
        tape.backward(mul(ce, inv_batch));
      }
      adam_step(params, adam);
    }
    EvalResult test_eval = evaluate(model, test_set, test_matrices);
    report.train_loss.push_back(loss_sum / static_cast<double>(n_train));
    report.train_acc.push_back(static_cast<double>(correct) / static_cast<double>(n_train));
    report.test_loss.push_back(test_eval.loss);
    report.test_acc.push_back(test_eval.accuracy);
    report.confusion = std::move(test_eval.confusion);
    report.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count());
    if (tc.on_epoch) tc.on_epoch(epoch + 1, report);
  }
  return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// gradient-times-input saliency: |x * d logit_pred / d x| per timestep per
// dimension, min-max normalized per dimension (an all-constant row of
// attributions normalizes to all zeros). The input factor plays the role of
// the activation map in CAM-style attributions; the bare gradient is dominated
// by the layer-norm Jacobian and does not localize.

inline std::vector<std::vector<double>> saliency(const CaLoNetModel& m,
                                                 const TimeSeriesSample& sample,
                                                 const CausalMatrix& matrix) {
  Tensor input;
  Tape tape;
  Tensor logits = model_forward(m, sample, matrix, &input);
  const int pred = argmax_label(logits);
  Tensor one_hot = Tensor::zeros({m.config.n_classes});
  one_hot.data()[static_cast<std::size_t>(pred)] = 1.0;
  tape.backward(sum_all(mul(logits, one_hot)));
  const std::size_t d_count = sample.values.size();
  const std::size_t len = sample.values[0].size();
  std::vector<double> weighted(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) weighted[i] = input.grad()[i] * input.data()[i];
  auto grads = patch_matrix_grad_to_input(weighted, d_count, len, m.config.encoder.patch_size);
  for (auto& row : grads) {
    double lo = std::abs(row[0]), hi = lo;
    for (double& v : row) {
      v = std::abs(v);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    for (double& v : row) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// model file (versioned JSON)

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["n_dims"] = cfg.n_dims;
  j["n_classes"] = cfg.n_classes;
  j["class_names"] = cfg.class_names;
  j["patch_size"] = cfg.encoder.patch_size;
  j["embed_dim"] = cfg.encoder.embed_dim;
  j["window"] = cfg.encoder.window;
  j["conv_kernel"] = cfg.encoder.conv_kernel;
  j["n_blocks"] = cfg.encoder.n_blocks;
  j["mlp_ratio"] = cfg.encoder.mlp_ratio;
  j["heads"] = cfg.encoder.heads;
  j["node_dim"] = cfg.encoder.node_dim;
  j["gin_layers"] = cfg.gin.n_layers;
  j["gin_hidden"] = cfg.gin.mlp_hidden;
  j["gin_eps_learnable"] = cfg.gin.eps_learnable;
  j["bins"] = cfg.causal.binning.n_bins;
  j["bin_strategy"] =
      cfg.causal.binning.strategy == BinStrategy::equal_width ? "equal-width" : "equal-frequency";
  j["k"] = cfg.causal.order.k;
  j["l"] = cfg.causal.order.l;
  j["threshold"] = cfg.causal.threshold;
  j["graph_scope"] = to_string(cfg.causal.scope);
  j["gnn_direction"] = to_string(cfg.gnn_direction);
  j["weighted_aggregation"] = cfg.weighted_aggregation;
  j["norm_mean"] = cfg.norm.mean;
  j["norm_std"] = cfg.norm.stddev;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_dims = j.value("n_dims", cfg.n_dims);
  cfg.n_classes = j.value("n_classes", cfg.n_classes);
  cfg.class_names = j.value("class_names", cfg.class_names);
  cfg.encoder.patch_size = j.value("patch_size", cfg.encoder.patch_size);
  cfg.encoder.embed_dim = j.value("embed_dim", cfg.encoder.embed_dim);
  cfg.encoder.window = j.value("window", cfg.encoder.window);
  cfg.encoder.conv_kernel = j.value("conv_kernel", cfg.encoder.conv_kernel);
  cfg.encoder.n_blocks = j.value("n_blocks", cfg.encoder.n_blocks);
  cfg.encoder.mlp_ratio = j.value("mlp_ratio", cfg.encoder.mlp_ratio);
  cfg.encoder.heads = j.value("heads", cfg.encoder.heads);
  cfg.encoder.node_dim = j.value("node_dim", cfg.encoder.node_dim);
  cfg.gin.n_layers = j.value("gin_layers", cfg.gin.n_layers);
  cfg.gin.mlp_hidden = j.value("gin_hidden", cfg.gin.mlp_hidden);
  cfg.gin.eps_learnable = j.value("gin_eps_learnable", cfg.gin.eps_learnable);
  cfg.gin.node_dim = cfg.encoder.node_dim;
  cfg.causal.binning.n_bins = j.value("bins", cfg.causal.binning.n_bins);
  if (j.contains("bin_strategy")) {
    const std::string s = j.at("bin_strategy").get<std::string>();
    if (s == "equal-width")
      cfg.causal.binning.strategy = BinStrategy::equal_width;
    else if (s == "equal-frequency")
      cfg.causal.binning.strategy = BinStrategy::equal_frequency;
    else
      throw ConfigError("unknown bin strategy '" + s + "'");
  }
  cfg.causal.order.k = j.value("k", cfg.causal.order.k);
  cfg.causal.order.l = j.value("l", cfg.causal.order.l);
  cfg.causal.threshold = j.value("threshold", cfg.causal.threshold);
  if (j.contains("graph_scope"))
    cfg.causal.scope = graph_scope_from_string(j.at("graph_scope").get<std::string>());
  if (j.contains("gnn_direction"))
    cfg.gnn_direction = gnn_direction_from_string(j.at("gnn_direction").get<std::string>());
  cfg.weighted_aggregation = j.value("weighted_aggregation", cfg.weighted_aggregation);
  cfg.norm.mean = j.value("norm_mean", cfg.norm.mean);
  cfg.norm.stddev = j.value("norm_std", cfg.norm.stddev);
  return cfg;
}

inline std::string model_to_json_text(CaLoNetModel& m) {
  nlohmann::json j;
  j["format"] = "calonet-model";
  j["version"] = kModelFormatVersion;
  j["config"] = model_config_to_json(m.config);
  auto params = nlohmann::json::array();
  m.visit([&](const std::string& name, Tensor& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"values", t.data()}});
  });
  j["params"] = params;
  if (m.shared_matrix) {
    std::vector<std::vector<double>> rows(m.shared_matrix->n,
                                          std::vector<double>(m.shared_matrix->n));
    for (std::size_t i = 0; i < m.shared_matrix->n; ++i)
      for (std::size_t k = 0; k < m.shared_matrix->n; ++k) rows[i][k] = m.shared_matrix->at(i, k);
    j["shared_matrix"] = {{"n", m.shared_matrix->n},
                          {"threshold", m.shared_matrix->threshold},
                          {"scores", rows}};
  }
  return j.dump();
}

inline void save_model(CaLoNetModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SerializationError("save_model: cannot open '" + path + "'");
  out << model_to_json_text(m) << "\n";
  if (!out) throw SerializationError("save_model: write to '" + path + "' failed");
}

inline CaLoNetModel model_from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError(std::string("corrupt model file: ") + e.what());
  }
  if (!j.is_object() || j.value("format", std::string{}) != "calonet-model" || !j.contains("version") ||
      !j.contains("config") || !j.contains("params"))
    throw SerializationError("corrupt model file: missing format/version/config/params");
  const int version = j.at("version").get<int>();
  if (version != kModelFormatVersion)
    throw VersionError("model format version " + std::to_string(version) +
                       " unsupported (this build reads version " +
                       std::to_string(kModelFormatVersion) + ")");
  CaLoNetModel m = make_model(model_config_from_json(j.at("config")), 0);
  std::map<std::string, nlohmann::json> by_name;
  for (const auto& p : j.at("params")) by_name[p.at("name").get<std::string>()] = p;
  std::size_t loaded = 0;
  m.visit([&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw SerializationError("corrupt model file: missing parameter '" + name + "'");
    const auto shape = it->second.at("shape").get<Shape>();
    if (shape != t.shape())
      throw SerializationError("corrupt model file: parameter '" + name + "' has shape " +
                               shape_str(shape) + ", expected " + shape_str(t.shape()));
    t.data() = it->second.at("values").get<std::vector<double>>();
    ++loaded;
  });
  if (loaded != by_name.size())
    throw SerializationError("corrupt model file: unexpected extra parameters");
  if (j.contains("shared_matrix")) {
    const auto& sm = j.at("shared_matrix");
    CausalMatrix cm;
    cm.n = sm.at("n").get<std::size_t>();
    cm.threshold = sm.at("threshold").get<double>();
    for (const auto& row : sm.at("scores"))
      for (const auto& v : row) cm.scores.push_back(v.get<double>());
    if (cm.scores.size() != cm.n * cm.n)
      throw SerializationError("corrupt model file: shared matrix size mismatch");
    m.shared_matrix = std::move(cm);
  }
  return m;
}

inline CaLoNetModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SerializationError("load_model: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return model_from_json_text(text);
}

}  // namespace calonet
