#pragma once

// Local-correlation encoder: patch embedding, CBAM channel/spatial gating,
// log-sparse windowed self-attention, and pre-norm residual blocks with a
// cyclic shift on every second block. Maps a D x L sample to per-dimension
// node features.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "calonet/common.hpp"
#include "calonet/tensor.hpp"

namespace calonet {

struct EncoderConfig {
  std::size_t patch_size = 4;
  std::size_t embed_dim = 0;  // 0 resolves to 4 * n_dims
  std::size_t window = 8;
  std::size_t conv_kernel = 7;
  std::size_t n_blocks = 2;  // every second block is shifted
  double mlp_ratio = 2.0;
  std::size_t heads = 1;
  std::size_t node_dim = 32;
};

inline std::size_t resolved_embed_dim(const EncoderConfig& cfg, std::size_t n_dims) {
  return cfg.embed_dim == 0 ? 4 * n_dims : cfg.embed_dim;
}

inline void validate(const EncoderConfig& cfg, std::size_t n_dims) {
  if (n_dims < 1) throw ConfigError("encoder: n_dims must be >= 1");
  if (cfg.patch_size < 1) throw ConfigError("encoder: patch_size must be >= 1");
  if (cfg.window < 2) throw ConfigError("encoder: window must be >= 2");
  if (cfg.conv_kernel % 2 == 0) throw ConfigError("encoder: conv_kernel must be odd");
  if (cfg.n_blocks < 1) throw ConfigError("encoder: n_blocks must be >= 1");
  if (cfg.mlp_ratio <= 0.0) throw ConfigError("encoder: mlp_ratio must be positive");
  if (cfg.node_dim < 1) throw ConfigError("encoder: node_dim must be >= 1");
  const std::size_t c = resolved_embed_dim(cfg, n_dims);
  if (cfg.heads < 1 || c % cfg.heads != 0)
    throw ConfigError("encoder: heads must divide embed_dim " + std::to_string(c));
}

// ---------------------------------------------------------------------------
// log-sparse attention mask

// W x W additive bias: row i attends to j <= i with offset i-j in {0} or a
// power of two; everything else carries the -inf sentinel. Rows have at most
// floor(log2(max(i,1))) + 2 open slots.
struct SparseMask {
  std::size_t window = 0;
  Tensor bias;
};

inline SparseMask log_sparse_mask(std::size_t w) {
  if (w < 1) throw ConfigError("log_sparse_mask: window must be >= 1");
  Tensor bias = Tensor::full({w, w}, kMaskedOut);
  for (std::size_t i = 0; i < w; ++i) {
    std::size_t open = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      const std::size_t off = i - j;
      const bool power_of_two = off != 0 && (off & (off - 1)) == 0;
      if (off == 0 || power_of_two) {
        bias.data()[i * w + j] = 0.0;
        ++open;
      }
    }
    const std::size_t bound =
        static_cast<std::size_t>(std::floor(std::log2(static_cast<double>(std::max<std::size_t>(i, 1))))) + 2;
    if (open > bound) throw ConfigError("log_sparse_mask: sparsity bound violated");
  }
  return {w, bias};
}

// top-left s x s corner, for a short final window
inline Tensor mask_view(const SparseMask& mask, std::size_t s) {
  if (s == mask.window) return mask.bias;
  return slice(slice(mask.bias, 0, 0, s), 1, 0, s);
}

// ---------------------------------------------------------------------------
// parameters

struct CbamParams {
  Tensor channel_w0, channel_w1;  // shared two-layer channel MLP (no bias, per Eq. form)
  Tensor conv_w, conv_b;          // 1-d conv over positions: [1, 2, kernel]
};

struct BlockParams {
  Tensor ln1_scale, ln1_shift;
  CbamParams cbam_q, cbam_k, cbam_v;
  // no key bias: softmax is invariant to a uniform shift of the scores in a
  // row, so a K bias would be a dead parameter
  Tensor proj_q_w, proj_q_b, proj_k_w, proj_v_w, proj_v_b;
  Tensor ln2_scale, ln2_shift;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  bool shifted = false;
};

struct EncoderState {
  EncoderConfig cfg;
  std::size_t n_dims = 0;
  Tensor patch_w, patch_b;
  std::vector<BlockParams> blocks;
  Tensor node_w, node_b;
  SparseMask mask;
};

namespace detail {

inline CbamParams make_cbam(std::size_t c, std::size_t kernel, Rng& rng) {
  const std::size_t hidden = std::max<std::size_t>(1, c / 4);
  CbamParams p;
  p.channel_w0 = init_uniform({c, hidden}, c, rng);
  p.channel_w1 = init_uniform({hidden, c}, hidden, rng);
  p.conv_w = init_uniform({1, 2, kernel}, 2 * kernel, rng);
  p.conv_b = init_uniform({1}, 2 * kernel, rng);
  return p;
}

}  // namespace detail

inline EncoderState make_encoder(const EncoderConfig& cfg, std::size_t n_dims, Rng& rng) {
  validate(cfg, n_dims);
  EncoderState st;
  st.cfg = cfg;
  st.n_dims = n_dims;
  const std::size_t c = resolved_embed_dim(cfg, n_dims);
  const std::size_t in = cfg.patch_size * n_dims;
  st.patch_w = detail::init_uniform({in, c}, in, rng);
  st.patch_b = detail::init_uniform({c}, in, rng);
  const std::size_t hidden = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.mlp_ratio * static_cast<double>(c)));
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    BlockParams blk;
    blk.ln1_scale = detail::init_const({c}, 1.0);
    blk.ln1_shift = detail::init_const({c}, 0.0);
    blk.cbam_q = detail::make_cbam(c, cfg.conv_kernel, rng);
    blk.cbam_k = detail::make_cbam(c, cfg.conv_kernel, rng);
    blk.cbam_v = detail::make_cbam(c, cfg.conv_kernel, rng);
    blk.proj_q_w = detail::init_uniform({c, c}, c, rng);
    blk.proj_q_b = detail::init_uniform({c}, c, rng);
    blk.proj_k_w = detail::init_uniform({c, c}, c, rng);
    blk.proj_v_w = detail::init_uniform({c, c}, c, rng);
    blk.proj_v_b = detail::init_uniform({c}, c, rng);
    blk.ln2_scale = detail::init_const({c}, 1.0);
    blk.ln2_shift = detail::init_const({c}, 0.0);
    blk.mlp_w1 = detail::init_uniform({c, hidden}, c, rng);
    blk.mlp_b1 = detail::init_uniform({hidden}, c, rng);
    blk.mlp_w2 = detail::init_uniform({hidden, c}, hidden, rng);
    blk.mlp_b2 = detail::init_uniform({c}, hidden, rng);
    blk.shifted = b % 2 == 1;
    st.blocks.push_back(std::move(blk));
  }
  st.node_w = detail::init_uniform({c, n_dims * cfg.node_dim}, c, rng);
  st.node_b = detail::init_uniform({n_dims * cfg.node_dim}, c, rng);
  st.mask = log_sparse_mask(cfg.window);
  return st;
}

template <typename Fn>
void visit_params(CbamParams& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".channel.w0", p.channel_w0);
  fn(prefix + ".channel.w1", p.channel_w1);
  fn(prefix + ".conv.w", p.conv_w);
  fn(prefix + ".conv.b", p.conv_b);
}

template <typename Fn>
void visit_params(EncoderState& st, Fn&& fn) {
  fn("encoder.patch.w", st.patch_w);
  fn("encoder.patch.b", st.patch_b);
  for (std::size_t b = 0; b < st.blocks.size(); ++b) {
    auto& blk = st.blocks[b];
    const std::string p = "encoder.block" + std::to_string(b);
    fn(p + ".ln1.scale", blk.ln1_scale);
    fn(p + ".ln1.shift", blk.ln1_shift);
    visit_params(blk.cbam_q, p + ".cbam_q", fn);
    visit_params(blk.cbam_k, p + ".cbam_k", fn);
    visit_params(blk.cbam_v, p + ".cbam_v", fn);
    fn(p + ".proj_q.w", blk.proj_q_w);
    fn(p + ".proj_q.b", blk.proj_q_b);
    fn(p + ".proj_k.w", blk.proj_k_w);
    fn(p + ".proj_v.w", blk.proj_v_w);
    fn(p + ".proj_v.b", blk.proj_v_b);
    fn(p + ".ln2.scale", blk.ln2_scale);
    fn(p + ".ln2.shift", blk.ln2_shift);
    fn(p + ".mlp.w1", blk.mlp_w1);
    fn(p + ".mlp.b1", blk.mlp_b1);
    fn(p + ".mlp.w2", blk.mlp_w2);
    fn(p + ".mlp.b2", blk.mlp_b2);
  }
  fn("encoder.node.w", st.node_w);
  fn("encoder.node.b", st.node_b);
}

// ---------------------------------------------------------------------------
// forward operations

// Rearranges a D x L sample into the patch matrix [P, patch_size * D] with
// P = ceil(L / patch_size); each row is one chunk of patch_size timestamps
// across all dimensions, time-major. A ragged tail is padded by replicating
// the value at t = L-1.
inline Tensor patch_matrix(const std::vector<std::vector<double>>& values, std::size_t patch_size) {
  if (values.empty() || values[0].empty()) throw ConfigError("patch_matrix: empty sample");
  const std::size_t d_count = values.size();
  const std::size_t len = values[0].size();
  const std::size_t p_count = (len + patch_size - 1) / patch_size;
  Tensor x = Tensor::zeros({p_count, patch_size * d_count});
  for (std::size_t p = 0; p < p_count; ++p)
    for (std::size_t tt = 0; tt < patch_size; ++tt)
      for (std::size_t d = 0; d < d_count; ++d) {
        const std::size_t t = std::min(p * patch_size + tt, len - 1);
        x.data()[p * patch_size * d_count + tt * d_count + d] = values[d][t];
      }
  return x;
}

// Scatters a gradient over the patch matrix back onto the D x L input,
// summing the duplicated padded slots into t = L-1.
inline std::vector<std::vector<double>> patch_matrix_grad_to_input(const std::vector<double>& grad,
                                                                   std::size_t d_count,
                                                                   std::size_t len,
                                                                   std::size_t patch_size) {
  const std::size_t p_count = (len + patch_size - 1) / patch_size;
  std::vector<std::vector<double>> out(d_count, std::vector<double>(len, 0.0));
  for (std::size_t p = 0; p < p_count; ++p)
    for (std::size_t tt = 0; tt < patch_size; ++tt)
      for (std::size_t d = 0; d < d_count; ++d) {
        const std::size_t t = std::min(p * patch_size + tt, len - 1);
        out[d][t] += grad[p * patch_size * d_count + tt * d_count + d];
      }
  return out;
}

inline Tensor patch_embed(const Tensor& patches, const Tensor& w, const Tensor& b) {
  return add(matmul(patches, w), b);
}

// gate g = sigmoid(MLP(avg over positions) + MLP(max over positions)),
// shared two-layer MLP with relu; output is E scaled per channel
inline Tensor channel_attention(const Tensor& e, const CbamParams& p) {
  const std::size_t c = e.dim(1);
  Tensor avg = reshape(mean_axis(e, 0), {1, c});
  Tensor mx = reshape(max_axis(e, 0), {1, c});
  auto shared_mlp = [&](const Tensor& v) { return matmul(relu(matmul(v, p.channel_w0)), p.channel_w1); };
  Tensor gate = sigmoid(add(shared_mlp(avg), shared_mlp(mx)));
  return mul(e, reshape(gate, {c}));
}

// per-position gate from a width-a conv over [channel-avg ; channel-max]
inline Tensor spatial_attention(const Tensor& e, const CbamParams& p) {
  const std::size_t rows = e.dim(0);
  Tensor avg = reshape(mean_axis(e, 1), {rows, 1});
  Tensor mx = reshape(max_axis(e, 1), {rows, 1});
  Tensor gate = sigmoid(conv1d(concat(avg, mx, 1), p.conv_w, p.conv_b));
  return scale_rows(e, reshape(gate, {rows}));
}

inline Tensor cbam(const Tensor& e, const CbamParams& p) {
  return spatial_attention(channel_attention(e, p), p);
}

// out[r] = in[(r + shift) mod rows]
inline Tensor rotate_rows(const Tensor& e, std::size_t shift) {
  const std::size_t rows = e.dim(0);
  const std::size_t s = rows == 0 ? 0 : shift % rows;
  if (s == 0) return e;
  return concat(slice(e, 0, s, rows), slice(e, 0, 0, s), 0);
}

// Windowed sparse self-attention. Q, K, V each come from their own CBAM gate
// stack over the input followed by a linear projection; each window computes
// softmax(Q K^T / sqrt(d_k) + B) V under the log-sparse mask (truncated for a
// short final window), heads over channel slices.
inline Tensor ssa(const Tensor& e, const BlockParams& blk, const SparseMask& mask, std::size_t heads) {
  const std::size_t rows = e.dim(0), c = e.dim(1);
  const std::size_t dk = c / heads;
  Tensor q = add(matmul(cbam(e, blk.cbam_q), blk.proj_q_w), blk.proj_q_b);
  Tensor k = matmul(cbam(e, blk.cbam_k), blk.proj_k_w);
  Tensor v = add(matmul(cbam(e, blk.cbam_v), blk.proj_v_w), blk.proj_v_b);
  const Tensor inv_sqrt_dk = Tensor::scalar(1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor out;
  bool first_window = true;
  for (std::size_t r0 = 0; r0 < rows; r0 += mask.window) {
    const std::size_t r1 = std::min(rows, r0 + mask.window);
    const Tensor bias = mask_view(mask, r1 - r0);
    Tensor window_out;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dk, c1 = c0 + dk;
      Tensor qs = slice(slice(q, 0, r0, r1), 1, c0, c1);
      Tensor ks = slice(slice(k, 0, r0, r1), 1, c0, c1);
      Tensor vs = slice(slice(v, 0, r0, r1), 1, c0, c1);
      Tensor att = softmax(mul(matmul(qs, transpose(ks)), inv_sqrt_dk), bias);
      Tensor head_out = matmul(att, vs);
      window_out = h == 0 ? head_out : concat(window_out, head_out, 1);
    }
    out = first_window ? window_out : concat(out, window_out, 0);
    first_window = false;
  }
  return out;
}

// pre-norm residual block: E1 = E + SSA(LN(E)); out = E1 + MLP(LN(E1));
// shifted blocks cyclically rotate rows by window/2 first and rotate back after
inline Tensor encoder_block(const Tensor& e_in, const BlockParams& blk, const SparseMask& mask,
                            std::size_t heads) {
  const std::size_t rows = e_in.dim(0);
  const std::size_t shift = blk.shifted ? (mask.window / 2) % rows : 0;
  Tensor e = shift ? rotate_rows(e_in, shift) : e_in;
  Tensor e1 = add(e, ssa(layer_norm(e, blk.ln1_scale, blk.ln1_shift), blk, mask, heads));
  Tensor hidden = relu(add(matmul(layer_norm(e1, blk.ln2_scale, blk.ln2_shift), blk.mlp_w1), blk.mlp_b1));
  Tensor out = add(e1, add(matmul(hidden, blk.mlp_w2), blk.mlp_b2));
  return shift ? rotate_rows(out, rows - shift) : out;
}

inline Tensor encoder_forward(const EncoderState& st, const Tensor& patches) {
  Tensor e = patch_embed(patches, st.patch_w, st.patch_b);
  for (const auto& blk : st.blocks) e = encoder_block(e, blk, st.mask, st.cfg.heads);
  return e;
}

// temporal mean-pool, linear projection to n_dims * node_dim, reshape to the
// n x d node-feature matrix
inline Tensor node_features(const Tensor& e_final, const EncoderState& st) {
  const std::size_t c = e_final.dim(1);
  Tensor pooled = reshape(mean_axis(e_final, 0), {1, c});
  Tensor projected = add(matmul(pooled, st.node_w), st.node_b);
  return reshape(projected, {st.n_dims, st.cfg.node_dim});
}

}  // namespace calonet
