#pragma once

// Ingestion of UEA-format and synthetic multivariate time-series datasets:
// .ts parsing/serialization, a CSV fallback, train-statistics normalization,
// seeded batching, and a planted-structure synthetic generator.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "calonet/common.hpp"

namespace calonet {

struct TimeSeriesSample {
  std::vector<std::vector<double>> values;  // [n_dims][length]
  int label = 0;
  std::size_t orig_length = 0;  // length before any pad/truncate
};

struct Dataset {
  std::vector<TimeSeriesSample> samples;
  std::size_t n_dims = 0;
  std::size_t length = 0;
  std::size_t n_classes = 0;
  std::vector<std::string> class_names;
  std::string name;
};

enum class MissingPolicy { interpolate, fail };
enum class LengthPolicy { pad, truncate };

struct ParseOptions {
  MissingPolicy missing = MissingPolicy::interpolate;
  LengthPolicy length = LengthPolicy::pad;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.push_back(s.substr(b, i - b));
  }
  return out;
}

inline double parse_value(const std::string& token, const std::string& where) {
  std::string t = trim(token);
  if (t.empty()) throw ParseError(where + ": empty value");
  const char* begin = t.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end != begin + t.size()) throw ParseError(where + ": cannot parse value '" + t + "'");
  if (!std::isfinite(v)) throw ParseError(where + ": non-finite value '" + t + "'");
  return v;
}

// NaN slots are missing values; fills by linear interpolation, edge values by
// nearest neighbor
inline void interpolate_missing(std::vector<double>& v, const std::string& where) {
  std::size_t n = v.size();
  std::size_t first = n;
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isnan(v[i])) {
      first = i;
      break;
    }
  if (first == n) throw ParseError(where + ": all values missing");
  for (std::size_t i = 0; i < first; ++i) v[i] = v[first];
  std::size_t last = first;
  for (std::size_t i = first + 1; i < n; ++i) {
    if (std::isnan(v[i])) continue;
    if (i > last + 1) {
      const double lo = v[last], hi = v[i];
      const double span = static_cast<double>(i - last);
      for (std::size_t j = last + 1; j < i; ++j)
        v[j] = lo + (hi - lo) * static_cast<double>(j - last) / span;
    }
    last = i;
  }
  for (std::size_t i = last + 1; i < n; ++i) v[i] = v[last];
}

inline void apply_length_policy(Dataset& ds, LengthPolicy policy) {
  if (ds.samples.empty()) return;
  std::size_t lo = ds.samples[0].values.empty() ? 0 : ds.samples[0].orig_length;
  std::size_t hi = lo;
  for (const auto& s : ds.samples) {
    lo = std::min(lo, s.orig_length);
    hi = std::max(hi, s.orig_length);
  }
  const std::size_t target = policy == LengthPolicy::pad ? hi : lo;
  for (auto& s : ds.samples)
    for (auto& dim : s.values) {
      if (dim.size() > target) dim.resize(target);
      while (dim.size() < target) dim.push_back(dim.back());
    }
  ds.length = target;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// UEA .ts format

inline Dataset parse_ts(const std::string& text, ParseOptions opts = {}) {
  Dataset ds;
  bool in_data = false;
  bool have_class_labels = false;
  std::size_t declared_dims = 0;
  std::size_t record_idx = 0;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::string where_line = "line " + std::to_string(line_no);

    if (!in_data) {
      if (line[0] != '@') throw ParseError(where_line + ": expected @-prefixed header line");
      auto tokens = detail::split_ws(line);
      std::string tag = detail::lower(tokens[0]);
      if (tag == "@problemname") {
        ds.name = tokens.size() > 1 ? detail::trim(line.substr(tokens[0].size())) : "";
      } else if (tag == "@dimensions") {
        if (tokens.size() != 2) throw ParseError(where_line + ": @dimensions needs one integer");
        char* end = nullptr;
        long v = std::strtol(tokens[1].c_str(), &end, 10);
        if (*end != '\0' || v < 1) throw ParseError(where_line + ": bad dimension count '" + tokens[1] + "'");
        declared_dims = static_cast<std::size_t>(v);
      } else if (tag == "@classlabel") {
        if (tokens.size() < 2) throw ParseError(where_line + ": @classLabel needs true/false");
        std::string flag = detail::lower(tokens[1]);
        if (flag == "false")
          throw ParseError(where_line + ": @classLabel false is unsupported (labels required)");
        if (flag != "true") throw ParseError(where_line + ": @classLabel needs true/false");
        if (tokens.size() < 3) throw ParseError(where_line + ": @classLabel true needs class names");
        for (std::size_t i = 2; i < tokens.size(); ++i) {
          if (std::find(ds.class_names.begin(), ds.class_names.end(), tokens[i]) != ds.class_names.end())
            throw ParseError(where_line + ": duplicate class name '" + tokens[i] + "'");
          ds.class_names.push_back(tokens[i]);
        }
        have_class_labels = true;
      } else if (tag == "@data") {
        if (!have_class_labels) throw ParseError(where_line + ": @data before @classLabel");
        in_data = true;
      }
      // other header tags (@timeStamps, @equalLength, ...) carry no payload we need
      continue;
    }

    const std::string where = "record " + std::to_string(record_idx);
    auto fields = detail::split(line, ':');
    if (fields.size() < 2) throw ParseError(where + ": expected ':'-separated dimensions and label");
    const std::size_t dims = fields.size() - 1;
    if (declared_dims != 0 && dims != declared_dims)
      throw ParseError(where + ": expected " + std::to_string(declared_dims) + " dimensions, got " +
                       std::to_string(dims));
    if (declared_dims == 0 && ds.samples.empty()) declared_dims = dims;
    if (!ds.samples.empty() && dims != ds.samples[0].values.size())
      throw ParseError(where + ": expected " + std::to_string(ds.samples[0].values.size()) +
                       " dimensions, got " + std::to_string(dims));

    TimeSeriesSample sample;
    sample.values.resize(dims);
    for (std::size_t d = 0; d < dims; ++d) {
      auto tokens = detail::split(fields[d], ',');
      auto& series = sample.values[d];
      series.reserve(tokens.size());
      bool any_missing = false;
      for (const auto& tok : tokens) {
        std::string t = detail::trim(tok);
        if (t == "?") {
          if (opts.missing == MissingPolicy::fail)
            throw ParseError(where + ": missing value in dimension " + std::to_string(d));
          series.push_back(std::numeric_limits<double>::quiet_NaN());
          any_missing = true;
        } else {
          series.push_back(detail::parse_value(t, where + " dimension " + std::to_string(d)));
        }
      }
      if (any_missing) detail::interpolate_missing(series, where + " dimension " + std::to_string(d));
      if (d > 0 && series.size() != sample.values[0].size())
        throw ParseError(where + ": dimension " + std::to_string(d) + " has length " +
                         std::to_string(series.size()) + ", expected " +
                         std::to_string(sample.values[0].size()));
    }
    sample.orig_length = sample.values.empty() ? 0 : sample.values[0].size();

    std::string label = detail::trim(fields.back());
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), label);
    if (it == ds.class_names.end()) throw ParseError(where + ": unknown class label '" + label + "'");
    sample.label = static_cast<int>(it - ds.class_names.begin());
    ds.samples.push_back(std::move(sample));
    ++record_idx;
  }
  if (!in_data) throw ParseError("missing @data section");
  ds.n_dims = declared_dims;
  ds.n_classes = ds.class_names.size();
  detail::apply_length_policy(ds, opts.length);
  return ds;
}

inline std::string to_ts(const Dataset& ds) {
  std::string out;
  out += "@problemName " + (ds.name.empty() ? std::string("dataset") : ds.name) + "\n";
  out += "@timeStamps false\n";
  out += "@univariate " + std::string(ds.n_dims == 1 ? "true" : "false") + "\n";
  out += "@dimensions " + std::to_string(ds.n_dims) + "\n";
  out += "@equalLength true\n";
  out += "@seriesLength " + std::to_string(ds.length) + "\n";
  out += "@classLabel true";
  for (const auto& c : ds.class_names) out += " " + c;
  out += "\n@data\n";
  for (const auto& s : ds.samples) {
    for (std::size_t d = 0; d < s.values.size(); ++d) {
      for (std::size_t t = 0; t < s.values[d].size(); ++t) {
        if (t) out += ",";
        out += format_double(s.values[d][t]);
      }
      out += ":";
    }
    out += ds.class_names.at(static_cast<std::size_t>(s.label));
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV fallback: sample_id,dim,t,value,label with a mandatory header

inline Dataset parse_csv(const std::string& text) {
  Dataset ds;
  std::vector<std::string> lines = detail::split(text, '\n');
  if (lines.empty() || detail::trim(lines[0]) != "sample_id,dim,t,value,label")
    throw ParseError("line 1: CSV header must be 'sample_id,dim,t,value,label'");
  struct Cell {
    std::size_t dim, t;
    double value;
  };
  std::vector<long> order;                                   // sample ids by first appearance
  std::map<long, std::vector<Cell>> cells;
  std::map<long, std::string> labels;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    std::string line = detail::trim(lines[ln]);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(ln + 1);
    auto f = detail::split(line, ',');
    if (f.size() != 5) throw ParseError(where + ": expected 5 columns, got " + std::to_string(f.size()));
    char* end = nullptr;
    long sid = std::strtol(detail::trim(f[0]).c_str(), &end, 10);
    if (*end != '\0') throw ParseError(where + ": bad sample_id '" + f[0] + "'");
    long dim = std::strtol(detail::trim(f[1]).c_str(), &end, 10);
    if (*end != '\0' || dim < 0) throw ParseError(where + ": bad dim '" + f[1] + "'");
    long t = std::strtol(detail::trim(f[2]).c_str(), &end, 10);
    if (*end != '\0' || t < 0) throw ParseError(where + ": bad t '" + f[2] + "'");
    double v = detail::parse_value(f[3], where);
    std::string label = detail::trim(f[4]);
    if (label.empty()) throw ParseError(where + ": empty label");
    if (!cells.count(sid)) order.push_back(sid);
    cells[sid].push_back({static_cast<std::size_t>(dim), static_cast<std::size_t>(t), v});
    auto [it, inserted] = labels.emplace(sid, label);
    if (!inserted && it->second != label)
      throw ParseError(where + ": conflicting labels for sample " + std::to_string(sid));
  }
  for (long sid : order) {
    const auto& cs = cells[sid];
    std::size_t dmax = 0, tmax = 0;
    for (const auto& c : cs) {
      dmax = std::max(dmax, c.dim);
      tmax = std::max(tmax, c.t);
    }
    const std::size_t d_count = dmax + 1, t_count = tmax + 1;
    if (cs.size() != d_count * t_count)
      throw ParseError("sample " + std::to_string(sid) + ": expected " +
                       std::to_string(d_count * t_count) + " cells, got " + std::to_string(cs.size()));
    TimeSeriesSample sample;
    sample.values.assign(d_count, std::vector<double>(t_count, std::numeric_limits<double>::quiet_NaN()));
    for (const auto& c : cs) sample.values[c.dim][c.t] = c.value;
    for (const auto& dim : sample.values)
      for (double v : dim)
        if (std::isnan(v)) throw ParseError("sample " + std::to_string(sid) + ": sparse grid");
    sample.orig_length = t_count;
    const std::string& label = labels[sid];
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), label);
    if (it == ds.class_names.end()) {
      ds.class_names.push_back(label);
      it = ds.class_names.end() - 1;
    }
    sample.label = static_cast<int>(it - ds.class_names.begin());
    if (!ds.samples.empty() && sample.values.size() != ds.n_dims)
      throw ParseError("sample " + std::to_string(sid) + ": dimension count mismatch");
    ds.n_dims = sample.values.size();
    ds.samples.push_back(std::move(sample));
  }
  ds.n_classes = ds.class_names.size();
  detail::apply_length_policy(ds, LengthPolicy::pad);
  return ds;
}

inline std::string to_csv(const Dataset& ds) {
  std::string out = "sample_id,dim,t,value,label\n";
  for (std::size_t s = 0; s < ds.samples.size(); ++s) {
    const auto& sample = ds.samples[s];
    for (std::size_t d = 0; d < sample.values.size(); ++d)
      for (std::size_t t = 0; t < sample.values[d].size(); ++t)
        out += std::to_string(s) + "," + std::to_string(d) + "," + std::to_string(t) + "," +
               format_double(sample.values[d][t]) + "," +
               ds.class_names.at(static_cast<std::size_t>(sample.label)) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization with training-split statistics

struct NormalizationStats {
  std::vector<double> mean;    // per dimension
  std::vector<double> stddev;  // population std; zero-std dimensions divide by 1

  static NormalizationStats identity(std::size_t n_dims) {
    return {std::vector<double>(n_dims, 0.0), std::vector<double>(n_dims, 1.0)};
  }
};

inline NormalizationStats compute_normalization(const Dataset& train) {
  if (train.samples.empty()) throw ConfigError("compute_normalization: empty training set");
  NormalizationStats st;
  st.mean.assign(train.n_dims, 0.0);
  st.stddev.assign(train.n_dims, 0.0);
  for (std::size_t d = 0; d < train.n_dims; ++d) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : train.samples)
      for (double v : s.values[d]) {
        sum += v;
        ++count;
      }
    const double mu = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& s : train.samples)
      for (double v : s.values[d]) sq += (v - mu) * (v - mu);
    st.mean[d] = mu;
    st.stddev[d] = std::sqrt(sq / static_cast<double>(count));
  }
  return st;
}

inline void apply_normalization(Dataset& ds, const NormalizationStats& st) {
  if (st.mean.size() != ds.n_dims)
    throw ConfigError("apply_normalization: stats for " + std::to_string(st.mean.size()) +
                      " dimensions, dataset has " + std::to_string(ds.n_dims));
  for (auto& s : ds.samples)
    for (std::size_t d = 0; d < s.values.size(); ++d) {
      const double div = st.stddev[d] == 0.0 ? 1.0 : st.stddev[d];
      for (double& v : s.values[d]) v = (v - st.mean[d]) / div;
    }
}

// Computes stats on the training split only and applies them in place to the
// training split and every other dataset. Applying twice is the caller's error.
inline NormalizationStats znormalize(Dataset& train, const std::vector<Dataset*>& others = {}) {
  NormalizationStats st = compute_normalization(train);
  apply_normalization(train, st);
  for (Dataset* d : others) apply_normalization(*d, st);
  return st;
}

// ---------------------------------------------------------------------------
// seeded batching: a permutation of all indices cut into consecutive chunks

inline std::vector<std::vector<std::size_t>> batches(std::size_t n_samples, std::size_t batch_size,
                                                     std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
  auto perm = seeded_permutation(n_samples, seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n_samples; i += batch_size) {
    std::size_t end = std::min(i + batch_size, n_samples);
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, std::size_t batch_size,
                                                     std::uint64_t seed) {
  return batches(ds.samples.size(), batch_size, seed);
}

// ---------------------------------------------------------------------------
// synthetic datasets with planted causal structure and local patterns

struct Coupling {
  std::size_t src = 0, dst = 0;  // dst[t] += beta * src[t-1]
  double beta = 0.9;
};

struct PatternSpec {
  std::size_t dim = 0;
  std::size_t start = 0, length = 0;  // injected window [start, start+length)
  double period = 10.0;
  double amplitude = 1.0;
  double phase = 0.0;
};

struct ClassSpec {
  std::vector<Coupling> couplings;
  std::vector<PatternSpec> patterns;
};

struct SynthConfig {
  std::size_t n_dims = 2;
  std::size_t length = 100;
  std::size_t n_classes = 1;
  std::size_t samples_per_class = 1;
  double noise = 0.1;  // sigma on coupled dimensions
  std::vector<ClassSpec> classes;
};

struct SynthDataset {
  Dataset data;
  std::vector<std::vector<Coupling>> true_edges;  // per class
};

inline void validate(const SynthConfig& cfg) {
  if (cfg.n_dims < 1 || cfg.length < 1 || cfg.n_classes < 1 || cfg.samples_per_class < 1)
    throw ConfigError("synth_causal: all counts must be positive");
  if (cfg.classes.size() != cfg.n_classes)
    throw ConfigError("synth_causal: " + std::to_string(cfg.classes.size()) + " class specs for " +
                      std::to_string(cfg.n_classes) + " classes");
  for (const auto& cls : cfg.classes) {
    for (const auto& c : cls.couplings) {
      if (c.src >= cfg.n_dims || c.dst >= cfg.n_dims)
        throw ConfigError("synth_causal: coupling references dimension >= " + std::to_string(cfg.n_dims));
      if (c.src == c.dst) throw ConfigError("synth_causal: self-coupling is not allowed");
    }
    for (const auto& p : cls.patterns) {
      if (p.dim >= cfg.n_dims)
        throw ConfigError("synth_causal: pattern references dimension >= " + std::to_string(cfg.n_dims));
      if (p.start + p.length > cfg.length) throw ConfigError("synth_causal: pattern window out of range");
      if (p.period <= 0.0) throw ConfigError("synth_causal: pattern period must be positive");
    }
  }
}

inline SynthDataset synth_causal(const SynthConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  SynthDataset out;
  out.data.n_dims = cfg.n_dims;
  out.data.length = cfg.length;
  out.data.n_classes = cfg.n_classes;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    out.data.class_names.push_back("c" + std::to_string(c));
    out.true_edges.push_back(cfg.classes[c].couplings);
  }
  out.data.name = "synthetic";
  constexpr double two_pi = 6.283185307179586476925286766559;
  std::size_t counter = 0;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    const auto& cls = cfg.classes[c];
    // couplings into each target dimension
    std::vector<std::vector<Coupling>> into(cfg.n_dims);
    for (const auto& cp : cls.couplings) into[cp.dst].push_back(cp);
    for (std::size_t s = 0; s < cfg.samples_per_class; ++s, ++counter) {
      Rng rng(mix_seed(seed, counter));
      TimeSeriesSample sample;
      sample.label = static_cast<int>(c);
      sample.orig_length = cfg.length;
      sample.values.assign(cfg.n_dims, std::vector<double>(cfg.length, 0.0));
      for (std::size_t t = 0; t < cfg.length; ++t)
        for (std::size_t d = 0; d < cfg.n_dims; ++d) {
          const double eps = rng.gaussian();
          if (into[d].empty()) {
            sample.values[d][t] = eps;
          } else {
            double v = cfg.noise * eps;
            if (t > 0)
              for (const auto& cp : into[d]) v += cp.beta * sample.values[cp.src][t - 1];
            sample.values[d][t] = v;
          }
        }
      for (const auto& p : cls.patterns)
        for (std::size_t t = p.start; t < p.start + p.length; ++t)
          sample.values[p.dim][t] +=
              p.amplitude * std::sin(two_pi * static_cast<double>(t - p.start) / p.period + p.phase);
      out.data.samples.push_back(std::move(sample));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SynthConfig JSON form (used by the synth CLI command and test fixtures)

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig cfg;
  cfg.n_dims = j.value("n_dims", cfg.n_dims);
  cfg.length = j.value("length", cfg.length);
  cfg.n_classes = j.value("n_classes", cfg.n_classes);
  cfg.samples_per_class = j.value("samples_per_class", cfg.samples_per_class);
  cfg.noise = j.value("noise", cfg.noise);
  if (j.contains("classes")) {
    for (const auto& jc : j.at("classes")) {
      ClassSpec cls;
      if (jc.contains("couplings"))
        for (const auto& jp : jc.at("couplings"))
          cls.couplings.push_back({jp.value("src", std::size_t{0}), jp.value("dst", std::size_t{0}),
                                   jp.value("beta", 0.9)});
      if (jc.contains("patterns"))
        for (const auto& jp : jc.at("patterns"))
          cls.patterns.push_back({jp.value("dim", std::size_t{0}), jp.value("start", std::size_t{0}),
                                  jp.value("length", std::size_t{0}), jp.value("period", 10.0),
                                  jp.value("amplitude", 1.0), jp.value("phase", 0.0)});
      cfg.classes.push_back(std::move(cls));
    }
  } else {
    cfg.classes.resize(cfg.n_classes);
  }
  return cfg;
}

inline nlohmann::json synth_config_to_json(const SynthConfig& cfg) {
  nlohmann::json j;
  j["n_dims"] = cfg.n_dims;
  j["length"] = cfg.length;
  j["n_classes"] = cfg.n_classes;
  j["samples_per_class"] = cfg.samples_per_class;
  j["noise"] = cfg.noise;
  auto classes = nlohmann::json::array();
  for (const auto& cls : cfg.classes) {
    nlohmann::json jc;
    auto couplings = nlohmann::json::array();
    for (const auto& c : cls.couplings)
      couplings.push_back({{"src", c.src}, {"dst", c.dst}, {"beta", c.beta}});
    auto patterns = nlohmann::json::array();
    for (const auto& p : cls.patterns)
      patterns.push_back({{"dim", p.dim},
                          {"start", p.start},
                          {"length", p.length},
                          {"period", p.period},
                          {"amplitude", p.amplitude},
                          {"phase", p.phase}});
    jc["couplings"] = couplings;
    jc["patterns"] = patterns;
    classes.push_back(jc);
  }
  j["classes"] = classes;
  return j;
}

}  // namespace calonet
