#pragma once

#include "circuitprobe/nodes.hpp"
#include "circuitprobe/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace circuitprobe {

// Dimensions of a GPT-2-family checkpoint, inferred from tensor shapes.
struct ModelConfig {
    int n_layers = 0;
    int n_heads = 0;
    int d_model = 0;
    int d_head = 0;
    int d_mlp = 0;
    int d_vocab = 0;
    int max_context = 0;
    float ln_epsilon = 1e-5f;

    void validate() const;
};

// Weights of one pre-LN decoder block. Projections are stored [in x out], the
// layout GPT-2 checkpoints use; activations multiply from the left as rows.
struct LayerWeights {
    VectorF ln1_gamma, ln1_beta;
    MatrixF w_qkv;  // [d_model x 3*d_model], packed q|k|v
    VectorF b_qkv;
    MatrixF w_attn_out;  // [d_model x d_model]
    VectorF b_attn_out;
    VectorF ln2_gamma, ln2_beta;
    MatrixF w_mlp_in;  // [d_model x d_mlp]
    VectorF b_mlp_in;
    MatrixF w_mlp_out;  // [d_mlp x d_model]
    VectorF b_mlp_out;
};

struct Weights {
    MatrixF token_embedding;       // [V x d_model]
    MatrixF positional_embedding;  // [max_context x d_model]
    std::vector<LayerWeights> layers;
    VectorF ln_f_gamma, ln_f_beta;
    MatrixF unembedding;  // [V x d_model]; transpose-tie of token_embedding when tied
};

// Immutable after load; shareable across threads.
struct Model {
    Weights weights;
    ModelConfig config;
    std::uint64_t weight_hash = 0;  // fingerprint of the archive data section
    std::vector<std::string> extra_tensors;  // archive entries the loader did not consume
};

// Per-prompt record of every residual-stream node, head output, MLP output,
// attention pattern and per-head value vector, plus the final logits.
struct ActivationCache {
    std::vector<int> tokens;
    int seq_len = 0;

    std::vector<MatrixF> resid_pre;   // [L] of [T x d_model]
    std::vector<MatrixF> resid_mid;   // [L]
    std::vector<MatrixF> resid_post;  // [L]
    std::vector<std::vector<MatrixF>> head_out;       // [L][H] of [T x d_model]
    std::vector<MatrixF> mlp_out;                     // [L] of [T x d_model]
    std::vector<std::vector<MatrixF>> attn_pattern;   // [L][H] of [T x T], row-stochastic
    std::vector<std::vector<MatrixF>> value_vectors;  // [L][H] of [T x d_head]
    MatrixF final_logits;  // [T x V]

    // Value of a node with an absolute (possibly negative) position.
    VectorF node_value(const NodeId& node) const;
    int resolve_position(int position) const;  // negative indexes from the end
};

// Extra computation spliced into a forward pass. Patch positions must already
// be resolved to absolute indices (see instrumentation for role resolution).
struct RunHooks {
    std::span<const PatchSpec> patches;
    const SuppressionSpec* suppression = nullptr;
    std::span<const MlpLinearSubstitution> mlp_substitutions;
};

// Loads a tensor archive (names per the public GPT-2 checkpoints, with or
// without the "transformer." prefix) and infers the config from shapes.
// n_heads comes from the archive's "n_head" metadata when present, else from
// the family-constant head width d_head = 64.
Model load_weights(const std::string& path);

// Process-wide count of completed forward passes, for run accounting.
std::uint64_t forward_pass_count();

ActivationCache forward_with_cache(const Model& model, std::span<const int> tokens,
                                   const RunHooks& hooks = {});

// One head's outputs and attention pattern given the LayerNormed inputs to the
// attention block: pattern = causal row-softmax of x W_QK x^T, and
// outputs[t] = sum_{s<=t} pattern[t][s] * (x[s] W_OV).
std::pair<MatrixF, MatrixF> head_output(const Model& model, int layer, int head,
                                        const MatrixF& normed_residuals);

// W_OV applied to a single (LayerNormed) residual vector; O(d_model * d_head).
VectorF ov_apply(const Model& model, int layer, int head, const VectorF& v);

// Dense per-head matrices, materialized on demand for analysis only. Row
// convention: score(t,s) = x_t * qk_matrix * x_s^T (the 1/sqrt(d_head) scale
// is folded in), and head output contribution of position s is x_s * ov_matrix.
MatrixF qk_matrix(const Model& model, int layer, int head);
MatrixF ov_matrix(const Model& model, int layer, int head);

// W_U LN_f(v): decode any residual-stream vector to logits over the vocabulary.
VectorF unembed(const Model& model, const VectorF& v);

}  // namespace circuitprobe
