#pragma once

// Transformer-style building block shared by the distiller and the analyzer:
// multi-head attention with projections, a GeGLU feed-forward, and the
// residual + layer-norm recurrence
//   x1 = LayerNorm(x + MHA(x, kv, kv))
//   x2 = LayerNorm(x1 + FFN(x1))
// Key/value projections can be computed once and reused when many queries
// attend over the same kv matrix within one tape.

#include <cmath>
#include <string>
#include <vector>

#include "ace/common.hpp"
#include "ace/tensor.hpp"

namespace ace {

// Parameter indices of one block within a ParamSet.
struct AttentionBlock {
    std::size_t wq, wk, wv, wo;
    std::size_t ln1_g, ln1_b, ln2_g, ln2_b;
    std::size_t ffn_a, ffn_b, ffn_c;
};

// Registers one block. q_width is the residual stream width (also the output
// width), kv_width the key/value input width, attn_width the internal
// attention width (must be divisible by the head count at use time).
inline AttentionBlock add_attention_block(ParamSet& ps, const std::string& prefix,
                                          std::size_t q_width, std::size_t kv_width,
                                          std::size_t attn_width, std::size_t ffn_mult,
                                          Rng& rng) {
    AttentionBlock b;
    const std::size_t hidden = ffn_mult * q_width;
    const double s_q = 1.0 / std::sqrt(static_cast<double>(q_width));
    const double s_kv = 1.0 / std::sqrt(static_cast<double>(kv_width));
    const double s_a = 1.0 / std::sqrt(static_cast<double>(attn_width));
    const double s_h = 1.0 / std::sqrt(static_cast<double>(hidden));
    b.wq = ps.add(prefix + "/wq", Tensor::randn(q_width, attn_width, rng, s_q));
    b.wk = ps.add(prefix + "/wk", Tensor::randn(kv_width, attn_width, rng, s_kv));
    b.wv = ps.add(prefix + "/wv", Tensor::randn(kv_width, attn_width, rng, s_kv));
    b.wo = ps.add(prefix + "/wo", Tensor::randn(attn_width, q_width, rng, s_a));
    b.ln1_g = ps.add(prefix + "/ln1_g", Tensor(1, q_width, 1.0));
    b.ln1_b = ps.add(prefix + "/ln1_b", Tensor(1, q_width, 0.0));
    b.ln2_g = ps.add(prefix + "/ln2_g", Tensor(1, q_width, 1.0));
    b.ln2_b = ps.add(prefix + "/ln2_b", Tensor(1, q_width, 0.0));
    b.ffn_a = ps.add(prefix + "/ffn_a", Tensor::randn(q_width, hidden, rng, s_q));
    b.ffn_b = ps.add(prefix + "/ffn_b", Tensor::randn(q_width, hidden, rng, s_q));
    b.ffn_c = ps.add(prefix + "/ffn_c", Tensor::randn(hidden, q_width, rng, s_h));
    return b;
}

// Bound tape leaves of one block.
struct BlockRefs {
    Ref wq, wk, wv, wo;
    Ref ln1_g, ln1_b, ln2_g, ln2_b;
    Ref ffn_a, ffn_b, ffn_c;
};

inline BlockRefs block_refs(const AttentionBlock& b, const std::vector<Ref>& leaves) {
    return BlockRefs{leaves[b.wq],    leaves[b.wk],    leaves[b.wv],    leaves[b.wo],
                     leaves[b.ln1_g], leaves[b.ln1_b], leaves[b.ln2_g], leaves[b.ln2_b],
                     leaves[b.ffn_a], leaves[b.ffn_b], leaves[b.ffn_c]};
}

struct KvCache {
    Ref k = nullptr;
    Ref v = nullptr;
};

inline KvCache project_kv(Tape& t, const BlockRefs& b, Ref kv_input) {
    return KvCache{matmul(t, kv_input, b.wk), matmul(t, kv_input, b.wv)};
}

// GeGLU feed-forward: (gelu(x Wa) * (x Wb)) Wc.
inline Ref ffn_geglu(Tape& t, Ref x, Ref wa, Ref wb, Ref wc) {
    return matmul(t, mul(t, gelu(t, matmul(t, x, wa)), matmul(t, x, wb)), wc);
}

// Multi-head attention with projections: concat-head core over projected
// inputs followed by the output projection.
inline Ref multi_head(Tape& t, Ref x, const KvCache& kv, Ref wq, Ref wo, std::size_t heads) {
    Ref q = matmul(t, x, wq);
    Ref core = multi_head_core(t, q, kv.k, kv.v, heads);
    return matmul(t, core, wo);
}

inline Ref apply_block(Tape& t, const BlockRefs& b, Ref x, const KvCache& kv,
                       std::size_t heads) {
    Ref attn = multi_head(t, x, kv, b.wq, b.wo, heads);
    Ref x1 = layer_norm(t, add(t, x, attn), b.ln1_g, b.ln1_b);
    Ref f = ffn_geglu(t, x1, b.ffn_a, b.ffn_b, b.ffn_c);
    return layer_norm(t, add(t, x1, f), b.ln2_g, b.ln2_b);
}

inline Ref apply_block(Tape& t, const BlockRefs& b, Ref x, Ref kv_input, std::size_t heads) {
    return apply_block(t, b, x, project_kv(t, b, kv_input), heads);
}

}  // namespace ace
