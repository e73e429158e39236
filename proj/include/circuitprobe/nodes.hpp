#pragma once

#include "circuitprobe/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace circuitprobe {

enum class NodeSite { ResidPre, ResidMid, ResidPost, HeadOut, MlpOut };

// Token-position reference. Patching experiments address positions by role
// (final token, end of the located X span) because prompts differ in length;
// absolute indices are the expert-mode escape hatch (negative = from the end).
struct NodePos {
    enum class Kind { Absolute, Final, XSpanEnd };
    Kind kind = Kind::Final;
    int index = -1;  // used when kind == Absolute

    static NodePos absolute(int i) { return {Kind::Absolute, i}; }
    static NodePos final() { return {Kind::Final, -1}; }
    static NodePos x_span_end() { return {Kind::XSpanEnd, -1}; }
};

// Address of one residual-stream node in the causal graph.
struct NodeId {
    int layer = 0;
    NodeSite site = NodeSite::ResidPost;
    int head = -1;  // only for HeadOut
    NodePos position = NodePos::final();

    static NodeId resid_pre(int layer, NodePos pos = NodePos::final()) {
        return {layer, NodeSite::ResidPre, -1, pos};
    }
    static NodeId resid_mid(int layer, NodePos pos = NodePos::final()) {
        return {layer, NodeSite::ResidMid, -1, pos};
    }
    static NodeId resid_post(int layer, NodePos pos = NodePos::final()) {
        return {layer, NodeSite::ResidPost, -1, pos};
    }
    static NodeId head_out(int layer, int head, NodePos pos = NodePos::final()) {
        return {layer, NodeSite::HeadOut, head, pos};
    }
    static NodeId mlp_out(int layer, NodePos pos = NodePos::final()) {
        return {layer, NodeSite::MlpOut, -1, pos};
    }
};

std::string to_string(NodeSite site);
std::string to_string(const NodeId& node);

// do()-intervention: replace the node's activation with `replacement` before
// any downstream computation consumes it.
struct PatchSpec {
    NodeId node;
    VectorF replacement;
};

// Anti-overconfidence interventions: force heads to self-attention (one-hot
// diagonal rows) and/or subtract vectors from a layer's resid_post at the
// final position before the next stage consumes it.
struct SuppressionSpec {
    std::vector<std::pair<int, int>> masked_heads;       // (layer, head)
    std::vector<std::pair<int, VectorF>> subtract_vectors;  // (layer, vector)

    bool empty() const { return masked_heads.empty() && subtract_vectors.empty(); }
};

// Replaces one layer's MLP output at the final position with the fitted
// linear combination of that layer's live head outputs and incoming residual.
struct MlpLinearSubstitution {
    int layer = 0;
    std::vector<float> w_head;
    float w_resid = 0.0f;
    VectorF intercept;
};

}  // namespace circuitprobe
