#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "calonet/causal.hpp"
#include "calonet/dataset.hpp"

using namespace calonet;

namespace {

// Independent chain-rule oracle: H(X|Y) = H(X,Y) - H(Y) by direct histogram
// enumeration over std::map (no shared code with the implementation kernel).
double oracle_cond_entropy(const SymbolVec& x, const SymbolVec& y) {
  std::map<std::pair<Symbol, Symbol>, std::size_t> joint;
  std::map<Symbol, std::size_t> marg;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ++joint[{x[i], y[i]}];
    ++marg[y[i]];
  }
  const double n = static_cast<double>(x.size());
  double hxy = 0.0, hy = 0.0;
  for (const auto& [k, c] : joint) hxy -= (c / n) * std::log2(c / n);
  for (const auto& [k, c] : marg) hy -= (c / n) * std::log2(c / n);
  return hxy - hy;
}

// Direct evaluation of the transfer-entropy definition for k = l = 1:
// sum over the joint distribution of (x_{t+1}, x_t, y_t) triples of
// p(a,b,c) * log2( p(a|b,c) / p(a|b) ).
double brute_force_te_k1(const std::vector<double>& source, const std::vector<double>& target,
                         const BinningSpec& spec) {
  const SymbolVec xs = discretize(target, spec);
  const SymbolVec ys = discretize(source, spec);
  const std::size_t a = spec.n_bins;
  std::vector<double> p_abc(a * a * a, 0.0), p_ab(a * a, 0.0), p_bc(a * a, 0.0), p_b(a, 0.0);
  const std::size_t steps = xs.size() - 1;
  const double inv = 1.0 / static_cast<double>(steps);
  for (std::size_t t = 0; t + 1 < xs.size(); ++t) {
    const Symbol an = xs[t + 1], b = xs[t], c = ys[t];
    p_abc[(an * a + b) * a + c] += inv;
    p_ab[an * a + b] += inv;
    p_bc[b * a + c] += inv;
    p_b[b] += inv;
  }
  double te = 0.0;
  for (Symbol an = 0; an < a; ++an)
    for (Symbol b = 0; b < a; ++b)
      for (Symbol c = 0; c < a; ++c) {
        const double pabc = p_abc[(an * a + b) * a + c];
        if (pabc == 0.0) continue;
        const double cond_full = pabc / p_bc[b * a + c];
        const double cond_self = p_ab[an * a + b] / p_b[b];
        te += pabc * std::log2(cond_full / cond_self);
      }
  return te;
}

std::vector<double> gaussian_series(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.gaussian();
  return v;
}

}  // namespace

TEST_CASE("discretize: degenerate and forced cases") {
  std::vector<double> constant(17, 5.0);
  for (auto strategy : {BinStrategy::equal_width, BinStrategy::equal_frequency}) {
    auto sym = discretize(constant, {8, strategy});
    for (Symbol s : sym) REQUIRE(s == 0);
  }
  std::vector<double> ramp{1, 2, 3, 4};
  REQUIRE(discretize(ramp, {2, BinStrategy::equal_width}) == SymbolVec{0, 0, 1, 1});
  REQUIRE_THROWS_AS(discretize(ramp, {1, BinStrategy::equal_width}), ConfigError);
}

TEST_CASE("discretize: equal-frequency bins are balanced within one") {
  Rng rng(123);
  const std::size_t len = 803, bins = 8;
  auto series = gaussian_series(len, rng);
  auto sym = discretize(series, {bins, BinStrategy::equal_frequency});
  std::vector<std::size_t> counts(bins, 0);
  for (Symbol s : sym) ++counts[s];
  for (std::size_t b = 0; b < bins; ++b) {
    REQUIRE(counts[b] >= len / bins);
    REQUIRE(counts[b] <= len / bins + 1);
  }
}

TEST_CASE("conditional_entropy: exact values and the chain-rule oracle") {
  SymbolVec v{0, 1, 2, 1, 0, 2, 2};
  REQUIRE(conditional_entropy(v, v) == 0.0);
  REQUIRE(conditional_entropy({0, 0, 1, 1}, {0, 1, 0, 1}) == 1.0);
  REQUIRE_THROWS_AS(conditional_entropy({0, 1}, {0, 1, 2}), ShapeError);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(mix_seed(17, seed));
    const std::size_t n = 20 + rng.index(200);
    SymbolVec x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<Symbol>(rng.index(5));
      y[i] = static_cast<Symbol>(rng.index(4));
    }
    REQUIRE_THAT(conditional_entropy(x, y),
                 Catch::Matchers::WithinAbs(oracle_cond_entropy(x, y), 1e-12));
  }
}

TEST_CASE("transfer_entropy: degenerate cases") {
  Rng rng(5);
  auto x = gaussian_series(64, rng);
  REQUIRE(transfer_entropy(x, x) == 0.0);  // conditioning on the own past twice adds nothing

  std::vector<double> c1(32, 1.0), c2(32, 2.0);
  REQUIRE(transfer_entropy(c1, c2) == 0.0);

  std::vector<double> tiny{1.0, 2.0};
  REQUIRE_THROWS_AS(transfer_entropy(tiny, tiny), ConfigError);
  REQUIRE_THROWS_AS(transfer_entropy(x, std::span<const double>(x.data(), 32)), ShapeError);
}

TEST_CASE("transfer_entropy matches the brute-force joint-distribution oracle") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(mix_seed(31, seed));
    const std::size_t len = 8 + rng.index(57);      // L <= 64
    const std::size_t alphabet = 2 + rng.index(3);  // <= 4
    std::vector<double> src(len), dst(len);
    for (std::size_t i = 0; i < len; ++i) {
      src[i] = static_cast<double>(rng.index(alphabet));
      dst[i] = static_cast<double>(rng.index(alphabet));
    }
    BinningSpec spec{alphabet, BinStrategy::equal_width};
    const double impl = transfer_entropy(src, dst, {1, 1}, spec);
    const double oracle = brute_force_te_k1(src, dst, spec);
    REQUIRE_THAT(impl, Catch::Matchers::WithinAbs(oracle, 1e-12));
    REQUIRE(impl >= 0.0);  // non-negativity after the clamp
  }
}

TEST_CASE("transfer_entropy: lag-1 copy of an i.i.d. bit source carries ~1 bit") {
  Rng rng(2024);
  const std::size_t len = 10000;
  std::vector<double> x(len), y(len);
  for (std::size_t t = 0; t < len; ++t) x[t] = static_cast<double>(rng.index(2));
  y[0] = static_cast<double>(rng.index(2));
  for (std::size_t t = 1; t < len; ++t) y[t] = x[t - 1];
  BinningSpec spec{2, BinStrategy::equal_width};
  REQUIRE_THAT(transfer_entropy(x, y, {1, 1}, spec), Catch::Matchers::WithinAbs(1.0, 0.05));
  REQUIRE(transfer_entropy(y, x, {1, 1}, spec) <= 0.05);
}

TEST_CASE("causal_score: antisymmetry is exact") {
  Rng rng(9);
  auto x = gaussian_series(128, rng);
  auto y = gaussian_series(128, rng);
  REQUIRE(causal_score(x, x) == 0.0);
  const double s = causal_score(x, y);
  REQUIRE(causal_score(y, x) == -s);  // bit-for-bit negation
}

TEST_CASE("causal_score: planted coupling is detected across seeds") {
  SynthConfig cfg;
  cfg.n_dims = 2;
  cfg.length = 500;
  cfg.n_classes = 1;
  cfg.samples_per_class = 1;
  cfg.noise = 0.1;
  cfg.classes.resize(1);
  cfg.classes[0].couplings.push_back({0, 1, 0.9});
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto ds = synth_causal(cfg, mix_seed(77, seed));
    const auto& s = ds.data.samples[0];
    if (causal_score(s.values[0], s.values[1]) > 0.0) ++hits;
  }
  REQUIRE(hits >= 95);
}

TEST_CASE("no coupling: causal scores are statistically indistinguishable from zero") {
  SynthConfig cfg;
  cfg.n_dims = 2;
  cfg.length = 400;
  cfg.n_classes = 1;
  cfg.samples_per_class = 1;
  cfg.classes.resize(1);  // beta = 0 everywhere: all dimensions i.i.d.
  std::size_t positive = 0;
  double mean_score = 0.0;
  const std::size_t seeds = 60;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    auto ds = synth_causal(cfg, mix_seed(3030, seed));
    const auto& s = ds.data.samples[0];
    const double score = causal_score(s.values[0], s.values[1]);
    mean_score += score / static_cast<double>(seeds);
    if (score > 0.0) ++positive;
  }
  // sign is a fair coin and the mean sits near zero
  REQUIRE(positive >= seeds / 4);
  REQUIRE(positive <= seeds - seeds / 4);
  REQUIRE(std::abs(mean_score) < 0.05);
}

TEST_CASE("build_causal_matrix: thresholding, exclusivity, degenerate inputs") {
  TimeSeriesSample twin;
  twin.values = {{1, 2, 3, 4, 5, 6, 7, 8}, {1, 2, 3, 4, 5, 6, 7, 8}};
  auto m = build_causal_matrix(twin, 0.0);
  for (double v : m.scores) REQUIRE(v == 0.0);

  TimeSeriesSample one;
  one.values = {{1, 2, 3}};
  REQUIRE_THROWS_AS(build_causal_matrix(one, 0.0), ConfigError);

  Rng rng(55);
  TimeSeriesSample s;
  for (int d = 0; d < 4; ++d) s.values.push_back(gaussian_series(100, rng));
  auto inf_m = build_causal_matrix(s, std::numeric_limits<double>::infinity());
  for (double v : inf_m.scores) REQUIRE(v == 0.0);

  auto m0 = build_causal_matrix(s, 0.0);
  for (std::size_t i = 0; i < m0.n; ++i) {
    REQUIRE(m0.at(i, i) == 0.0);
    for (std::size_t j = 0; j < m0.n; ++j) {
      if (i == j) continue;
      REQUIRE(m0.at(i, j) * m0.at(j, i) == 0.0);  // exclusivity
      REQUIRE(m0.at(i, j) >= 0.0);
    }
  }
}

TEST_CASE("build_causal_matrix: permuting dimensions permutes the matrix") {
  Rng rng(66);
  TimeSeriesSample s;
  for (int d = 0; d < 5; ++d) s.values.push_back(gaussian_series(80, rng));
  auto m = build_causal_matrix(s, 0.0);
  const std::vector<std::size_t> pi{3, 0, 4, 1, 2};
  TimeSeriesSample sp;
  sp.values.resize(5);
  for (std::size_t i = 0; i < 5; ++i) sp.values[pi[i]] = s.values[i];
  auto mp = build_causal_matrix(sp, 0.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) REQUIRE(mp.at(pi[i], pi[j]) == m.at(i, j));
}

TEST_CASE("planted edge survives thresholding in the matrix") {
  SynthConfig cfg;
  cfg.n_dims = 3;
  cfg.length = 500;
  cfg.n_classes = 1;
  cfg.samples_per_class = 1;
  cfg.noise = 0.1;
  cfg.classes.resize(1);
  cfg.classes[0].couplings.push_back({0, 1, 0.9});
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto ds = synth_causal(cfg, mix_seed(88, seed));
    auto m = build_causal_matrix(ds.data.samples[0], 0.0);
    if (m.at(0, 1) > 0.0 && m.at(1, 0) == 0.0) ++hits;
  }
  REQUIRE(hits >= 95);
}

TEST_CASE("to_graph and exports") {
  CausalMatrix zero{3, 0.0, std::vector<double>(9, 0.0)};
  auto g0 = to_graph(zero);
  REQUIRE(g0.n_nodes == 3);
  REQUIRE(g0.edges.empty());
  const std::string dot0 = export_graph(g0, GraphFormat::dot);
  REQUIRE(dot0.find("->") == std::string::npos);
  REQUIRE(dot0.find("  0;\n") != std::string::npos);
  REQUIRE(dot0.find("  2;\n") != std::string::npos);

  // structural example: dimension 2 causes 0 and 1, dimension 0 causes 1
  CausalMatrix m{3, 0.0, std::vector<double>(9, 0.0)};
  m.at(2, 0) = 0.1450;
  m.at(2, 1) = 0.2389;
  m.at(0, 1) = 0.0443;
  auto g = to_graph(m);
  REQUIRE(g.edges.size() == 3);
  const std::string dot = export_graph(g, GraphFormat::dot);
  REQUIRE(dot.find("2 -> 0 [label=\"0.1450\"]") != std::string::npos);
  REQUIRE(dot.find("2 -> 1 [label=\"0.2389\"]") != std::string::npos);
  REQUIRE(dot.find("0 -> 1 [label=\"0.0443\"]") != std::string::npos);

  const std::string json = export_graph(g, GraphFormat::json);
  auto round = causal_matrix_from_json(json);
  REQUIRE(round.n == m.n);
  REQUIRE(round.threshold == m.threshold);
  REQUIRE(round.scores == m.scores);

  REQUIRE_THROWS_AS(graph_format_from_string("svg"), ConfigError);
  REQUIRE_THROWS_AS(causal_matrix_from_json("{\"n\": 2}"), ParseError);
}

TEST_CASE("mean_causal_matrix aggregates raw scores before thresholding") {
  Rng rng(44);
  Dataset ds;
  ds.n_dims = 3;
  ds.length = 60;
  ds.n_classes = 1;
  ds.class_names = {"a"};
  for (int i = 0; i < 4; ++i) {
    TimeSeriesSample s;
    for (int d = 0; d < 3; ++d) s.values.push_back(gaussian_series(60, rng));
    s.label = 0;
    ds.samples.push_back(std::move(s));
  }
  auto shared = mean_causal_matrix(ds, 0.0);
  // oracle: average the raw antisymmetric scores directly, then threshold
  std::vector<double> acc(9, 0.0);
  for (const auto& s : ds.samples) {
    auto raw = causal_scores_raw(s);
    for (std::size_t i = 0; i < 9; ++i) acc[i] += raw[i];
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double mean = acc[i * 3 + j] / 4.0;
      const double expected = (i != j && mean > 0.0) ? mean : 0.0;
      REQUIRE_THAT(shared.at(i, j), Catch::Matchers::WithinAbs(expected, 1e-15));
    }
}
