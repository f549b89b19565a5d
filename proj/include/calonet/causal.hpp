#pragma once

// Transfer-entropy estimation between time-series dimensions and the
// thresholded causal correlation matrix / directed graph built from it.
// Probabilities are plug-in frequencies over discretized symbols; all
// entropies in this module are in bits (log base 2).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "calonet/common.hpp"
#include "calonet/dataset.hpp"

namespace calonet {

using Symbol = std::uint32_t;
using SymbolVec = std::vector<Symbol>;

enum class BinStrategy { equal_width, equal_frequency };

struct BinningSpec {
  std::size_t n_bins = 8;
  BinStrategy strategy = BinStrategy::equal_frequency;
};

struct HistoryOrder {
  std::size_t k = 1;  // target past length
  std::size_t l = 1;  // source past length
};

// Maps each value to a bin index in [0, n_bins). Equal-frequency bins are
// assigned by stable rank (ties keep input order), so bin counts differ by at
// most one; equal-width bins span [min, max] with max in the last bin.
// A constant series maps to all zeros under either strategy.
inline SymbolVec discretize(std::span<const double> series, const BinningSpec& spec) {
  if (spec.n_bins < 2) throw ConfigError("discretize: n_bins must be >= 2");
  if (series.empty()) throw ConfigError("discretize: empty series");
  const std::size_t n = series.size();
  SymbolVec out(n, 0);
  const auto [mn_it, mx_it] = std::minmax_element(series.begin(), series.end());
  if (*mn_it == *mx_it) return out;  // constant series
  if (spec.strategy == BinStrategy::equal_width) {
    const double lo = *mn_it, width = (*mx_it - lo) / static_cast<double>(spec.n_bins);
    for (std::size_t i = 0; i < n; ++i) {
      auto b = static_cast<std::size_t>((series[i] - lo) / width);
      out[i] = static_cast<Symbol>(std::min(b, spec.n_bins - 1));
    }
  } else {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return series[a] < series[b]; });
    for (std::size_t rank = 0; rank < n; ++rank)
      out[idx[rank]] = static_cast<Symbol>(rank * spec.n_bins / n);
  }
  return out;
}

namespace detail {

// Plug-in entropy of (key, count) runs with a deterministic summation order.
// Takes a mutable vector of composite keys, sorts, and counts runs.
inline double entropy_of_keys(std::vector<std::uint64_t>& keys) {
  if (keys.empty()) return 0.0;
  std::sort(keys.begin(), keys.end());
  const double n = static_cast<double>(keys.size());
  double h = 0.0;
  std::size_t run = 1;
  for (std::size_t i = 1; i <= keys.size(); ++i) {
    if (i < keys.size() && keys[i] == keys[i - 1]) {
      ++run;
      continue;
    }
    const double p = static_cast<double>(run) / n;
    h -= p * std::log2(p);
    run = 1;
  }
  return h;
}

}  // namespace detail

// Shannon entropy H(X) of a symbol vector, in bits.
inline double entropy(const SymbolVec& x) {
  std::vector<std::uint64_t> keys(x.begin(), x.end());
  return detail::entropy_of_keys(keys);
}

// H(X|Y) = -sum p(x,y) log2 p(x|y) over plug-in joint frequencies.
// Evaluated as H(X,Y) - H(Y) on sorted runs, which keeps the summation order
// (and therefore the result) bit-deterministic.
inline double conditional_entropy(const SymbolVec& x, const SymbolVec& y) {
  if (x.size() != y.size())
    throw ShapeError("conditional_entropy: length mismatch " + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()));
  if (x.empty()) throw ConfigError("conditional_entropy: empty input");
  Symbol xmax = *std::max_element(x.begin(), x.end());
  std::vector<std::uint64_t> joint(x.size()), marg(y.size());
  const std::uint64_t stride = static_cast<std::uint64_t>(xmax) + 1;
  for (std::size_t i = 0; i < x.size(); ++i) {
    joint[i] = static_cast<std::uint64_t>(y[i]) * stride + x[i];
    marg[i] = y[i];
  }
  return detail::entropy_of_keys(joint) - detail::entropy_of_keys(marg);
}

namespace detail {

// packs histories [..., v(t), v(t-1), ...] into base-(alphabet) composite keys
inline std::uint64_t pack_history(const SymbolVec& v, std::size_t t, std::size_t depth,
                                  std::uint64_t base, std::uint64_t key) {
  for (std::size_t d = 0; d < depth; ++d) key = key * base + v[t - d];
  return key;
}

}  // namespace detail

// TE_{source->target} = H(X_{t+1} | X_t^{(k)}) - H(X_{t+1} | X_t^{(k)}, Y_t^{(l)})
// over all valid t, where X is the target and Y the source. Plug-in estimates
// can dip a hair below zero in floating point; anything within 1e-12 of zero
// is clamped to exactly 0.
inline double transfer_entropy(std::span<const double> source, std::span<const double> target,
                               const HistoryOrder& order = {}, const BinningSpec& spec = {}) {
  if (order.k < 1 || order.l < 1) throw ConfigError("transfer_entropy: history orders must be >= 1");
  if (source.size() != target.size())
    throw ShapeError("transfer_entropy: length mismatch " + std::to_string(source.size()) + " vs " +
                     std::to_string(target.size()));
  const std::size_t len = target.size();
  const std::size_t need = std::max(order.k, order.l) + 2;
  if (len < need)
    throw ConfigError("transfer_entropy: sequence of length " + std::to_string(len) +
                      " too short for history order (need >= " + std::to_string(need) + ")");
  const SymbolVec xs = discretize(target, spec);
  const SymbolVec ys = discretize(source, spec);
  const std::uint64_t base = spec.n_bins;

  const std::size_t t0 = std::max(order.k, order.l) - 1;  // first t with full histories
  const std::size_t n_steps = len - 1 - t0;
  SymbolVec x_next(n_steps);
  std::vector<std::uint64_t> x_past(n_steps), xy_past(n_steps);
  for (std::size_t i = 0; i < n_steps; ++i) {
    const std::size_t t = t0 + i;
    x_next[i] = xs[t + 1];
    const std::uint64_t xp = detail::pack_history(xs, t, order.k, base, 0);
    x_past[i] = xp;
    xy_past[i] = detail::pack_history(ys, t, order.l, base, xp);
  }
  // reuse the conditional-entropy kernel on composite conditioning symbols
  auto cond = [&](const std::vector<std::uint64_t>& given) {
    std::vector<std::uint64_t> joint(n_steps), marg(given);
    for (std::size_t i = 0; i < n_steps; ++i) joint[i] = given[i] * base + x_next[i];
    return detail::entropy_of_keys(joint) - detail::entropy_of_keys(marg);
  };
  double te = cond(x_past) - cond(xy_past);
  if (te < 0.0 && te >= -1e-12) te = 0.0;
  return te;
}

// C_{X,Y} = TE_{X->Y} - TE_{Y->X}; antisymmetric by construction.
inline double causal_score(std::span<const double> x, std::span<const double> y,
                           const HistoryOrder& order = {}, const BinningSpec& spec = {}) {
  return transfer_entropy(x, y, order, spec) - transfer_entropy(y, x, order, spec);
}

// ---------------------------------------------------------------------------
// causal correlation matrix and graph

struct CausalMatrix {
  std::size_t n = 0;
  double threshold = 0.0;
  std::vector<double> scores;  // n x n row-major; scores[i*n+j] = M[i][j]

  double at(std::size_t i, std::size_t j) const { return scores[i * n + j]; }
  double& at(std::size_t i, std::size_t j) { return scores[i * n + j]; }
};

// Unthresholded antisymmetric score matrix; used for per-sample matrices and
// for dataset-mean aggregation.
inline std::vector<double> causal_scores_raw(const TimeSeriesSample& sample,
                                             const HistoryOrder& order = {},
                                             const BinningSpec& spec = {}) {
  const std::size_t n = sample.values.size();
  std::vector<double> raw(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double te_ij = transfer_entropy(sample.values[i], sample.values[j], order, spec);
      const double te_ji = transfer_entropy(sample.values[j], sample.values[i], order, spec);
      raw[i * n + j] = te_ij - te_ji;
      raw[j * n + i] = te_ji - te_ij;
    }
  return raw;
}

inline CausalMatrix threshold_scores(std::vector<double> raw, std::size_t n, double c) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i == j || !(raw[i * n + j] > c)) raw[i * n + j] = 0.0;
  return {n, c, std::move(raw)};
}

inline CausalMatrix build_causal_matrix(const TimeSeriesSample& sample, double c,
                                        const HistoryOrder& order = {}, const BinningSpec& spec = {}) {
  const std::size_t n = sample.values.size();
  if (n < 2) throw ConfigError("build_causal_matrix: need >= 2 dimensions, got " + std::to_string(n));
  return threshold_scores(causal_scores_raw(sample, order, spec), n, c);
}

// Mean of raw causal scores across all samples, then thresholded; the
// dataset-scope alternative to per-sample graphs.
inline CausalMatrix mean_causal_matrix(const Dataset& ds, double c, const HistoryOrder& order = {},
                                       const BinningSpec& spec = {}, std::size_t n_threads = 1) {
  if (ds.n_dims < 2) throw ConfigError("mean_causal_matrix: need >= 2 dimensions");
  if (ds.samples.empty()) throw ConfigError("mean_causal_matrix: empty dataset");
  const std::size_t n = ds.n_dims;
  std::vector<std::vector<double>> raws(ds.samples.size());
  parallel_for(ds.samples.size(), n_threads,
               [&](std::size_t i) { raws[i] = causal_scores_raw(ds.samples[i], order, spec); });
  std::vector<double> mean(n * n, 0.0);
  for (const auto& r : raws)
    for (std::size_t i = 0; i < n * n; ++i) mean[i] += r[i];
  for (double& v : mean) v /= static_cast<double>(ds.samples.size());
  return threshold_scores(std::move(mean), n, c);
}

struct CausalGraph {
  struct Edge {
    std::size_t from, to;
    double weight;
  };
  std::size_t n_nodes = 0;
  double threshold = 0.0;
  std::vector<Edge> edges;
};

inline CausalGraph to_graph(const CausalMatrix& m) {
  CausalGraph g;
  g.n_nodes = m.n;
  g.threshold = m.threshold;
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j)
      if (m.at(i, j) != 0.0) g.edges.push_back({i, j, m.at(i, j)});
  return g;
}

enum class GraphFormat { dot, json };

inline GraphFormat graph_format_from_string(const std::string& s) {
  if (s == "dot") return GraphFormat::dot;
  if (s == "json") return GraphFormat::json;
  throw ConfigError("unknown graph format '" + s + "' (expected dot or json)");
}

// DOT lists every node and one labeled edge per nonzero entry (4 decimals);
// JSON carries the full matrix plus threshold so heatmaps can be rendered.
inline std::string export_graph(const CausalGraph& g, GraphFormat format) {
  if (format == GraphFormat::dot) {
    std::string out = "digraph causal {\n";
    for (std::size_t i = 0; i < g.n_nodes; ++i) out += "  " + std::to_string(i) + ";\n";
    char buf[64];
    for (const auto& e : g.edges) {
      std::snprintf(buf, sizeof(buf), "%.4f", e.weight);
      out += "  " + std::to_string(e.from) + " -> " + std::to_string(e.to) + " [label=\"" + buf +
             "\"];\n";
    }
    out += "}\n";
    return out;
  }
  nlohmann::json j;
  j["n"] = g.n_nodes;
  j["threshold"] = g.threshold;
  std::vector<std::vector<double>> scores(g.n_nodes, std::vector<double>(g.n_nodes, 0.0));
  for (const auto& e : g.edges) scores[e.from][e.to] = e.weight;
  j["scores"] = scores;
  return j.dump(2) + "\n";
}

inline std::string export_graph(const CausalGraph& g, const std::string& format) {
  return export_graph(g, graph_format_from_string(format));
}

inline CausalMatrix causal_matrix_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("causal matrix JSON: ") + e.what());
  }
  if (!j.contains("n") || !j.contains("threshold") || !j.contains("scores"))
    throw ParseError("causal matrix JSON: missing n/threshold/scores");
  CausalMatrix m;
  m.n = j.at("n").get<std::size_t>();
  m.threshold = j.at("threshold").get<double>();
  const auto& rows = j.at("scores");
  if (rows.size() != m.n) throw ParseError("causal matrix JSON: row count mismatch");
  m.scores.reserve(m.n * m.n);
  for (const auto& row : rows) {
    if (row.size() != m.n) throw ParseError("causal matrix JSON: column count mismatch");
    for (const auto& v : row) m.scores.push_back(v.get<double>());
  }
  return m;
}

}  // namespace calonet
