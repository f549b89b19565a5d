// calonet: multivariate time-series classification with per-sample causal
// graphs and an attention-gated sparse encoder.
//
// Subcommands: train, eval, graph, explain, synth. Machine-readable key=value
// lines go to stdout; progress and prose go to stderr. Exit codes: 0 success,
// 1 parse/config errors, 2 runtime errors.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "calonet/causal.hpp"
#include "calonet/dataset.hpp"
#include "calonet/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Every tunable of a run in one flat bag; JSON config file and CLI flags both
// feed it (defaults < config file < explicit flags).
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 1e-3;

  std::size_t bins = 8;
  std::string bin_strategy = "equal-frequency";
  std::size_t k = 1;
  std::size_t l = 1;
  double threshold = 0.0;
  std::string graph_scope = "sample";

  std::string gnn_direction = "in";
  bool weighted_aggregation = false;
  std::size_t gin_layers = 2;
  std::size_t gin_hidden = 0;
  bool gin_eps_learnable = true;

  std::string norm = "z";        // z | none
  std::string missing = "interp";  // interp | fail
  std::string length = "pad";      // pad | truncate

  std::size_t patch_size = 4;
  std::size_t embed_dim = 0;
  std::size_t window = 8;
  std::size_t conv_kernel = 7;
  std::size_t n_blocks = 2;
  double mlp_ratio = 2.0;
  std::size_t heads = 1;
  std::size_t node_dim = 32;

  std::string train_path, test_path, out_dir;
};

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "seed",          "epochs",        "batch_size",   "lr",
      "bins",          "bin_strategy",  "k",            "l",
      "threshold",     "graph_scope",   "gnn_direction", "weighted_aggregation",
      "gin_layers",    "gin_hidden",    "gin_eps_learnable",
      "norm",          "missing",       "length",
      "patch_size",    "embed_dim",     "window",       "conv_kernel",
      "n_blocks",      "mlp_ratio",     "heads",        "node_dim",
      "train_path",    "test_path",     "out_dir"};
  return keys;
}

void apply_config_json(RunConfig& rc, const json& j) {
  if (!j.is_object()) throw calonet::ConfigError("config file: top-level JSON object expected");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    const auto& known = known_config_keys();
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw calonet::ConfigError("config file: unknown key '" + key + "'");
  }
  rc.seed = j.value("seed", rc.seed);
  rc.epochs = j.value("epochs", rc.epochs);
  rc.batch_size = j.value("batch_size", rc.batch_size);
  rc.lr = j.value("lr", rc.lr);
  rc.bins = j.value("bins", rc.bins);
  rc.bin_strategy = j.value("bin_strategy", rc.bin_strategy);
  rc.k = j.value("k", rc.k);
  rc.l = j.value("l", rc.l);
  rc.threshold = j.value("threshold", rc.threshold);
  rc.graph_scope = j.value("graph_scope", rc.graph_scope);
  rc.gnn_direction = j.value("gnn_direction", rc.gnn_direction);
  rc.weighted_aggregation = j.value("weighted_aggregation", rc.weighted_aggregation);
  rc.gin_layers = j.value("gin_layers", rc.gin_layers);
  rc.gin_hidden = j.value("gin_hidden", rc.gin_hidden);
  rc.gin_eps_learnable = j.value("gin_eps_learnable", rc.gin_eps_learnable);
  rc.norm = j.value("norm", rc.norm);
  rc.missing = j.value("missing", rc.missing);
  rc.length = j.value("length", rc.length);
  rc.patch_size = j.value("patch_size", rc.patch_size);
  rc.embed_dim = j.value("embed_dim", rc.embed_dim);
  rc.window = j.value("window", rc.window);
  rc.conv_kernel = j.value("conv_kernel", rc.conv_kernel);
  rc.n_blocks = j.value("n_blocks", rc.n_blocks);
  rc.mlp_ratio = j.value("mlp_ratio", rc.mlp_ratio);
  rc.heads = j.value("heads", rc.heads);
  rc.node_dim = j.value("node_dim", rc.node_dim);
  rc.train_path = j.value("train_path", rc.train_path);
  rc.test_path = j.value("test_path", rc.test_path);
  rc.out_dir = j.value("out_dir", rc.out_dir);
}

json resolved_config_json(const RunConfig& rc) {
  json j;
  j["seed"] = rc.seed;
  j["epochs"] = rc.epochs;
  j["batch_size"] = rc.batch_size;
  j["lr"] = rc.lr;
  j["bins"] = rc.bins;
  j["bin_strategy"] = rc.bin_strategy;
  j["k"] = rc.k;
  j["l"] = rc.l;
  j["threshold"] = rc.threshold;
  j["graph_scope"] = rc.graph_scope;
  j["gnn_direction"] = rc.gnn_direction;
  j["weighted_aggregation"] = rc.weighted_aggregation;
  j["gin_layers"] = rc.gin_layers;
  j["gin_hidden"] = rc.gin_hidden;
  j["gin_eps_learnable"] = rc.gin_eps_learnable;
  j["norm"] = rc.norm;
  j["missing"] = rc.missing;
  j["length"] = rc.length;
  j["patch_size"] = rc.patch_size;
  j["embed_dim"] = rc.embed_dim;
  j["window"] = rc.window;
  j["conv_kernel"] = rc.conv_kernel;
  j["n_blocks"] = rc.n_blocks;
  j["mlp_ratio"] = rc.mlp_ratio;
  j["heads"] = rc.heads;
  j["node_dim"] = rc.node_dim;
  j["train_path"] = rc.train_path;
  j["test_path"] = rc.test_path;
  j["out_dir"] = rc.out_dir;
  return j;
}

calonet::BinningSpec binning_from(const RunConfig& rc) {
  calonet::BinningSpec spec;
  spec.n_bins = rc.bins;
  if (rc.bin_strategy == "equal-width")
    spec.strategy = calonet::BinStrategy::equal_width;
  else if (rc.bin_strategy == "equal-frequency")
    spec.strategy = calonet::BinStrategy::equal_frequency;
  else
    throw calonet::ConfigError("unknown bin strategy '" + rc.bin_strategy + "'");
  return spec;
}

calonet::ModelConfig model_config_from(const RunConfig& rc) {
  calonet::ModelConfig mc;
  mc.encoder.patch_size = rc.patch_size;
  mc.encoder.embed_dim = rc.embed_dim;
  mc.encoder.window = rc.window;
  mc.encoder.conv_kernel = rc.conv_kernel;
  mc.encoder.n_blocks = rc.n_blocks;
  mc.encoder.mlp_ratio = rc.mlp_ratio;
  mc.encoder.heads = rc.heads;
  mc.encoder.node_dim = rc.node_dim;
  mc.gin.n_layers = rc.gin_layers;
  mc.gin.mlp_hidden = rc.gin_hidden;
  mc.gin.eps_learnable = rc.gin_eps_learnable;
  mc.causal.binning = binning_from(rc);
  mc.causal.order = {rc.k, rc.l};
  mc.causal.threshold = rc.threshold;
  mc.causal.scope = calonet::graph_scope_from_string(rc.graph_scope);
  mc.gnn_direction = calonet::gnn_direction_from_string(rc.gnn_direction);
  mc.weighted_aggregation = rc.weighted_aggregation;
  return mc;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw calonet::ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

calonet::Dataset load_dataset(const std::string& path, const calonet::ParseOptions& opts) {
  const std::string text = read_file(path);
  try {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") return calonet::parse_csv(text);
    return calonet::parse_ts(text, opts);
  } catch (const calonet::ParseError& e) {
    throw calonet::ParseError(path + ": " + e.what());
  }
}

calonet::ParseOptions parse_options_from(const RunConfig& rc) {
  calonet::ParseOptions opts;
  if (rc.missing == "interp")
    opts.missing = calonet::MissingPolicy::interpolate;
  else if (rc.missing == "fail")
    opts.missing = calonet::MissingPolicy::fail;
  else
    throw calonet::ConfigError("unknown missing policy '" + rc.missing + "'");
  if (rc.length == "pad")
    opts.length = calonet::LengthPolicy::pad;
  else if (rc.length == "truncate")
    opts.length = calonet::LengthPolicy::truncate;
  else
    throw calonet::ConfigError("unknown length policy '" + rc.length + "'");
  return opts;
}

// remaps dataset labels onto the model's class order (matched by name) and
// applies the model's stored normalization
void align_to_model(calonet::Dataset& ds, const calonet::CaLoNetModel& model) {
  if (ds.n_dims != model.config.n_dims)
    throw calonet::ConfigError("dataset has " + std::to_string(ds.n_dims) +
                               " dimensions, model expects " + std::to_string(model.config.n_dims));
  std::vector<int> remap(ds.class_names.size());
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    auto it = std::find(model.config.class_names.begin(), model.config.class_names.end(),
                        ds.class_names[c]);
    if (it == model.config.class_names.end())
      throw calonet::ConfigError("dataset class '" + ds.class_names[c] + "' unknown to the model");
    remap[c] = static_cast<int>(it - model.config.class_names.begin());
  }
  for (auto& s : ds.samples) s.label = remap[static_cast<std::size_t>(s.label)];
  ds.class_names = model.config.class_names;
  ds.n_classes = model.config.n_classes;
  calonet::apply_normalization(ds, model.config.norm);
}

std::vector<calonet::CausalMatrix> matrices_for(const calonet::CaLoNetModel& model,
                                                const calonet::Dataset& ds, std::size_t threads) {
  if (model.config.causal.scope == calonet::GraphScope::dataset_mean) {
    if (!model.shared_matrix)
      throw calonet::ConfigError("model uses dataset-mean graph scope but stores no shared matrix");
    return calonet::shared_matrices(*model.shared_matrix, ds.samples.size());
  }
  return calonet::precompute_matrices(ds, model.config.causal, threads);
}

int cmd_train(const RunConfig& rc) {
  const auto opts = parse_options_from(rc);
  calonet::Dataset train_set = load_dataset(rc.train_path, opts);
  calonet::Dataset test_set = load_dataset(rc.test_path, opts);
  if (train_set.class_names != test_set.class_names)
    throw calonet::ConfigError("train and test files declare different class lists");

  calonet::ModelConfig mc = model_config_from(rc);
  if (rc.norm == "z")
    mc.norm = calonet::znormalize(train_set, {&test_set});
  else if (rc.norm == "none")
    mc.norm = calonet::NormalizationStats::identity(train_set.n_dims);
  else
    throw calonet::ConfigError("unknown norm policy '" + rc.norm + "'");

  calonet::TrainConfig tc;
  tc.epochs = rc.epochs;
  tc.batch_size = rc.batch_size;
  tc.lr = rc.lr;
  tc.seed = rc.seed;
  tc.n_threads = calonet::env_thread_cap();
  tc.on_epoch = [&](std::size_t epoch, const calonet::TrainReport& r) {
    std::fprintf(stderr, "epoch %zu/%zu  train_loss=%.4f train_acc=%.3f test_acc=%.3f (%.1fs)\n",
                 epoch, rc.epochs, r.train_loss.back(), r.train_acc.back(), r.test_acc.back(),
                 r.epoch_seconds.back());
  };

  std::fprintf(stderr, "training on %zu samples (%zu dims, length %zu, %zu classes)\n",
               train_set.samples.size(), train_set.n_dims, train_set.length, train_set.n_classes);
  auto [model, report] = calonet::train(train_set, test_set, mc, tc);

  fs::create_directories(rc.out_dir);
  calonet::save_model(model, (fs::path(rc.out_dir) / "model.json").string());
  write_file((fs::path(rc.out_dir) / "report.csv").string(), calonet::report_csv(report));
  write_file((fs::path(rc.out_dir) / "config.resolved.json").string(),
             resolved_config_json(rc).dump(2) + "\n");
  std::printf("accuracy=%.6f\n", report.test_acc.back());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_path) {
  calonet::CaLoNetModel model = calonet::load_model(model_path);
  calonet::Dataset ds = load_dataset(data_path, {});
  align_to_model(ds, model);
  auto matrices = matrices_for(model, ds, calonet::env_thread_cap());
  auto ev = calonet::evaluate(model, ds, matrices);
  std::printf("accuracy=%.6f\n", ev.accuracy);
  std::printf("loss=%.6f\n", ev.loss);
  return 0;
}

int cmd_graph(const RunConfig& rc, const std::string& data_path, std::size_t sample_idx,
              const std::string& format, const std::string& out_path) {
  calonet::Dataset ds = load_dataset(data_path, parse_options_from(rc));
  if (sample_idx >= ds.samples.size())
    throw calonet::ConfigError("sample index " + std::to_string(sample_idx) + " out of range [0, " +
                               std::to_string(ds.samples.size()) + ")");
  auto matrix = calonet::build_causal_matrix(ds.samples[sample_idx], rc.threshold, {rc.k, rc.l},
                                             binning_from(rc));
  write_file(out_path, calonet::export_graph(calonet::to_graph(matrix), format));
  std::fprintf(stderr, "wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_explain(const std::string& model_path, const std::string& data_path, std::size_t sample_idx,
                const std::string& out_path) {
  calonet::CaLoNetModel model = calonet::load_model(model_path);
  calonet::Dataset ds = load_dataset(data_path, {});
  align_to_model(ds, model);
  if (sample_idx >= ds.samples.size())
    throw calonet::ConfigError("sample index " + std::to_string(sample_idx) + " out of range [0, " +
                               std::to_string(ds.samples.size()) + ")");
  calonet::CausalMatrix matrix;
  if (model.config.causal.scope == calonet::GraphScope::dataset_mean) {
    if (!model.shared_matrix)
      throw calonet::ConfigError("model uses dataset-mean graph scope but stores no shared matrix");
    matrix = *model.shared_matrix;
  } else {
    matrix = calonet::build_causal_matrix(ds.samples[sample_idx], model.config.causal.threshold,
                                          model.config.causal.order, model.config.causal.binning);
  }
  auto sal = calonet::saliency(model, ds.samples[sample_idx], matrix);
  std::string csv;
  for (const auto& row : sal) {
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (t) csv += ",";
      csv += calonet::format_double(row[t]);
    }
    csv += "\n";
  }
  write_file(out_path, csv);
  std::fprintf(stderr, "wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_synth(const std::string& config_path, std::uint64_t seed, const std::string& out_path) {
  json j;
  try {
    j = json::parse(read_file(config_path));
  } catch (const json::exception& e) {
    throw calonet::ParseError(config_path + ": " + e.what());
  }
  auto cfg = calonet::synth_config_from_json(j);
  auto synth = calonet::synth_causal(cfg, seed);
  write_file(out_path, calonet::to_ts(synth.data));
  std::fprintf(stderr, "wrote %s (%zu samples)\n", out_path.c_str(), synth.data.samples.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multivariate time-series classification via causal graphs and sparse attention"};
  app.require_subcommand(1);

  RunConfig rc;
  std::string config_path, model_path, data_path, format = "dot", out_path;
  std::size_t sample_idx = 0;

  auto add_causal_flags = [&](CLI::App* cmd) {
    cmd->add_option("--bins", rc.bins, "bins for probability estimation (default 8)");
    cmd->add_option("--bin-strategy", rc.bin_strategy, "equal-frequency | equal-width");
    cmd->add_option("--k", rc.k, "target history order (default 1)");
    cmd->add_option("--l", rc.l, "source history order (default 1)");
    cmd->add_option("--threshold", rc.threshold, "causal score threshold c (default 0)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model and write artifacts");
  train_cmd->add_option("--train", rc.train_path, "training .ts/.csv file")->required();
  train_cmd->add_option("--test", rc.test_path, "test .ts/.csv file")->required();
  train_cmd->add_option("--config", config_path, "JSON config (all fields optional)");
  train_cmd->add_option("--out", rc.out_dir, "output directory")->required();
  train_cmd->add_option("--seed", rc.seed, "run seed (default 0)");
  train_cmd->add_option("--epochs", rc.epochs, "training epochs (default 50)");
  train_cmd->add_option("--batch", rc.batch_size, "batch size (default 16)");
  train_cmd->add_option("--lr", rc.lr, "Adam learning rate (default 1e-3)");
  add_causal_flags(train_cmd);
  train_cmd->add_option("--graph-scope", rc.graph_scope, "sample | dataset-mean");
  train_cmd->add_option("--gnn-direction", rc.gnn_direction, "in | out | sym");
  train_cmd->add_flag("--weighted-aggregation", rc.weighted_aggregation,
                      "use edge weights in GIN aggregation (default off)");
  train_cmd->add_option("--norm", rc.norm, "z | none");
  train_cmd->add_option("--missing", rc.missing, "interp | fail");
  train_cmd->add_option("--length", rc.length, "pad | truncate");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a saved model on a dataset");
  eval_cmd->add_option("--model", model_path, "model.json")->required();
  eval_cmd->add_option("--data", data_path, "dataset file")->required();

  CLI::App* graph_cmd = app.add_subcommand("graph", "export one sample's causal graph");
  graph_cmd->add_option("--data", data_path, "dataset file")->required();
  graph_cmd->add_option("--sample", sample_idx, "sample index")->required();
  graph_cmd->add_option("--format", format, "dot | json");
  graph_cmd->add_option("--out", out_path, "output file")->required();
  add_causal_flags(graph_cmd);

  CLI::App* explain_cmd = app.add_subcommand("explain", "input-gradient saliency for one sample");
  explain_cmd->add_option("--model", model_path, "model.json")->required();
  explain_cmd->add_option("--data", data_path, "dataset file")->required();
  explain_cmd->add_option("--sample", sample_idx, "sample index")->required();
  explain_cmd->add_option("--out", out_path, "output CSV (D rows x L columns)")->required();

  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a planted-structure dataset");
  synth_cmd->add_option("--config", config_path, "synth config JSON")->required();
  synth_cmd->add_option("--seed", rc.seed, "generator seed (default 0)");
  synth_cmd->add_option("--out", out_path, "output .ts file")->required();

  // config file first, then explicit flags back on top
  try {
    app.parse(argc, argv);
    if (train_cmd->parsed() && !config_path.empty()) {
      RunConfig from_file;
      json j;
      try {
        j = json::parse(read_file(config_path));
      } catch (const json::exception& e) {
        throw calonet::ConfigError(config_path + ": " + e.what());
      }
      apply_config_json(from_file, j);
      // re-apply command line over the file values
      RunConfig flags_only = rc;
      rc = from_file;
      for (const auto* opt : train_cmd->get_options()) {
        if (opt->count() == 0) continue;
        const std::string name = opt->get_name();
        if (name == "--train") rc.train_path = flags_only.train_path;
        if (name == "--test") rc.test_path = flags_only.test_path;
        if (name == "--out") rc.out_dir = flags_only.out_dir;
        if (name == "--seed") rc.seed = flags_only.seed;
        if (name == "--epochs") rc.epochs = flags_only.epochs;
        if (name == "--batch") rc.batch_size = flags_only.batch_size;
        if (name == "--lr") rc.lr = flags_only.lr;
        if (name == "--bins") rc.bins = flags_only.bins;
        if (name == "--bin-strategy") rc.bin_strategy = flags_only.bin_strategy;
        if (name == "--k") rc.k = flags_only.k;
        if (name == "--l") rc.l = flags_only.l;
        if (name == "--threshold") rc.threshold = flags_only.threshold;
        if (name == "--graph-scope") rc.graph_scope = flags_only.graph_scope;
        if (name == "--gnn-direction") rc.gnn_direction = flags_only.gnn_direction;
        if (name == "--weighted-aggregation") rc.weighted_aggregation = flags_only.weighted_aggregation;
        if (name == "--norm") rc.norm = flags_only.norm;
        if (name == "--missing") rc.missing = flags_only.missing;
        if (name == "--length") rc.length = flags_only.length;
      }
    }
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(rc);
    if (eval_cmd->parsed()) return cmd_eval(model_path, data_path);
    if (graph_cmd->parsed()) return cmd_graph(rc, data_path, sample_idx, format, out_path);
    if (explain_cmd->parsed()) return cmd_explain(model_path, data_path, sample_idx, out_path);
    if (synth_cmd->parsed()) return cmd_synth(config_path, rc.seed, out_path);
    return 1;
  } catch (const calonet::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const calonet::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const calonet::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const calonet::SerializationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}
