#include "circuitprobe/instrumentation.hpp"

#include "circuitprobe/parallel.hpp"

#include <cmath>
#include <stdexcept>

namespace circuitprobe {

namespace {

// Stage order of the nodes a position flows through inside one layer.
int stage_of(NodeSite site) {
    switch (site) {
        case NodeSite::ResidPre: return 0;
        case NodeSite::HeadOut: return 1;
        case NodeSite::ResidMid: return 2;
        case NodeSite::MlpOut: return 3;
        case NodeSite::ResidPost: return 4;
    }
    return -1;
}

int order_key(const NodeId& node) { return node.layer * 5 + stage_of(node.site); }

VectorF mlp_apply(const Model& model, int layer, const VectorF& resid_mid_row) {
    const LayerWeights& lw = model.weights.layers[static_cast<std::size_t>(layer)];
    const VectorF normed =
        layer_norm(resid_mid_row, lw.ln2_gamma, lw.ln2_beta, model.config.ln_epsilon);
    VectorF hidden = lw.w_mlp_in.transpose() * normed + lw.b_mlp_in;
    for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden[i] = gelu_tanh(hidden[i]);
    return lw.w_mlp_out.transpose() * hidden + lw.b_mlp_out;
}

}  // namespace

int resolve_position(const NodePos& pos, const PromptInstance& prompt) {
    const int T = static_cast<int>(prompt.tokens.size());
    switch (pos.kind) {
        case NodePos::Kind::Final:
            return T - 1;
        case NodePos::Kind::XSpanEnd:
            return prompt.x_position();
        case NodePos::Kind::Absolute: {
            int t = pos.index;
            if (t < 0) t += T;
            if (t < 0 || t >= T) {
                throw std::runtime_error("absolute position " + std::to_string(pos.index) +
                                         " out of range for a " + std::to_string(T) +
                                         "-token prompt");
            }
            return t;
        }
    }
    throw std::runtime_error("unknown position kind");
}

NodeId resolve_node(const NodeId& node, const PromptInstance& prompt) {
    NodeId out = node;
    out.position = NodePos::absolute(resolve_position(node.position, prompt));
    return out;
}

LogitProbe::LogitProbe(const Model& model) : model_(&model) {
    // column mean of W_U, so the centering term is <mean_row, LN_f(v)>
    mean_unembedding_row_ =
        model.weights.unembedding.colwise().mean().transpose();
}

double LogitProbe::centered_logit(const VectorF& v, int token) const {
    const Model& m = *model_;
    if (token < 0 || token >= m.config.d_vocab) {
        throw std::runtime_error("token id out of range: " + std::to_string(token));
    }
    const VectorF normed =
        layer_norm(v, m.weights.ln_f_gamma, m.weights.ln_f_beta, m.config.ln_epsilon);
    const double logit_tok =
        m.weights.unembedding.row(token).transpose().cast<double>().dot(normed.cast<double>());
    const double mean_logit = mean_unembedding_row_.cast<double>().dot(normed.cast<double>());
    return logit_tok - mean_logit;
}

std::optional<double> delta_logit(double original_pi, double patched_pi) {
    if (!(std::abs(original_pi) > kDeltaLogitGuard)) {
        return std::nullopt;
    }
    return (patched_pi / original_pi - 1.0) * 100.0;
}

VectorF mean_node_activation(const Model& model, const NodeId& node,
                             const std::vector<PromptInstance>& prompts, int threads) {
    if (prompts.empty()) {
        throw std::runtime_error("mean_node_activation needs at least one prompt");
    }
    std::vector<VectorF> values(prompts.size());
    parallel_for(prompts.size(), threads, [&](std::size_t i) {
        const ActivationCache cache = forward_with_cache(model, prompts[i].tokens);
        values[i] = cache.node_value(resolve_node(node, prompts[i]));
    });
    VectorF sum = VectorF::Zero(model.config.d_model);
    for (const VectorF& v : values) sum += v;
    return sum / static_cast<float>(prompts.size());
}

ActivationCache activation_patch(const Model& model, const PromptInstance& prompt,
                                 const std::vector<PatchSpec>& patches) {
    std::vector<PatchSpec> resolved;
    resolved.reserve(patches.size());
    for (const PatchSpec& p : patches) {
        resolved.push_back({resolve_node(p.node, prompt), p.replacement});
    }
    RunHooks hooks;
    hooks.patches = resolved;
    return forward_with_cache(model, prompt.tokens, hooks);
}

bool strictly_precedes(const NodeId& sender, const NodeId& receiver) {
    return order_key(sender) < order_key(receiver);
}

VectorF direct_effect_value(const Model& model, const ActivationCache& clean, const NodeId& sender,
                            const NodeId& receiver, const VectorF& replacement) {
    if (!strictly_precedes(sender, receiver)) {
        throw std::runtime_error("sender " + to_string(sender) + " is not upstream of receiver " +
                                 to_string(receiver));
    }
    const int t_sender = sender.position.kind == NodePos::Kind::Final
                             ? clean.seq_len - 1
                             : clean.resolve_position(sender.position.index);
    const int t_receiver = receiver.position.kind == NodePos::Kind::Final
                               ? clean.seq_len - 1
                               : clean.resolve_position(receiver.position.index);
    const VectorF sender_clean = clean.node_value(sender);
    if (replacement.size() != sender_clean.size()) {
        throw std::runtime_error("replacement for " + to_string(sender) + " has wrong dimension");
    }
    const VectorF delta = replacement - sender_clean;

    switch (receiver.site) {
        case NodeSite::ResidPre:
        case NodeSite::ResidMid:
        case NodeSite::ResidPost: {
            // The residual stream is a per-position running sum; with every
            // other node frozen, the sender's delta arrives additively and
            // only at its own position.
            VectorF value = clean.node_value(receiver);
            if (t_sender == t_receiver) value += delta;
            return value;
        }
        case NodeSite::MlpOut: {
            VectorF input = clean.resid_mid[static_cast<std::size_t>(receiver.layer)]
                                .row(t_receiver)
                                .transpose();
            if (t_sender == t_receiver) input += delta;
            return mlp_apply(model, receiver.layer, input);
        }
        case NodeSite::HeadOut: {
            // The head re-reads the whole prefix, so the delta can enter
            // through keys/values at the sender's position as well as the
            // query at the receiver's position.
            MatrixF resid = clean.resid_pre[static_cast<std::size_t>(receiver.layer)];
            resid.row(t_sender) += delta.transpose();
            const LayerWeights& lw = model.weights.layers[static_cast<std::size_t>(receiver.layer)];
            const MatrixF normed =
                layer_norm_rows(resid, lw.ln1_gamma, lw.ln1_beta, model.config.ln_epsilon);
            auto [outputs, pattern] = head_output(model, receiver.layer, receiver.head, normed);
            return outputs.row(t_receiver).transpose();
        }
    }
    throw std::runtime_error("unknown receiver site");
}

std::optional<double> path_patch_effect(const Model& model, const NodeId& sender,
                                        const NodeId& receiver, const PromptInstance& original,
                                        const std::vector<PromptInstance>& interventions,
                                        int answer_token, int threads) {
    if (!strictly_precedes(sender, receiver)) {
        throw std::runtime_error("sender " + to_string(sender) + " is not upstream of receiver " +
                                 to_string(receiver));
    }
    const ActivationCache clean = forward_with_cache(model, original.tokens);
    const VectorF replacement = mean_node_activation(model, sender, interventions, threads);

    const NodeId sender_resolved = resolve_node(sender, original);
    const NodeId receiver_resolved = resolve_node(receiver, original);
    const VectorF patched_value =
        direct_effect_value(model, clean, sender_resolved, receiver_resolved, replacement);

    const LogitProbe probe(model);
    const double pi_clean = probe.centered_logit(clean.node_value(receiver_resolved), answer_token);
    const double pi_patched = probe.centered_logit(patched_value, answer_token);
    return delta_logit(pi_clean, pi_patched);
}

ActivationCache run_suppressed(const Model& model, std::span<const int> tokens,
                               const SuppressionSpec& spec) {
    for (const auto& [l, h] : spec.masked_heads) {
        if (l < 0 || l >= model.config.n_layers || h < 0 || h >= model.config.n_heads) {
            throw std::runtime_error("masked head (" + std::to_string(l) + ", " +
                                     std::to_string(h) + ") out of range");
        }
    }
    for (const auto& [l, v] : spec.subtract_vectors) {
        if (l < 0 || l >= model.config.n_layers) {
            throw std::runtime_error("subtract layer " + std::to_string(l) + " out of range");
        }
        if (v.size() != model.config.d_model) {
            throw std::runtime_error("subtract vector for layer " + std::to_string(l) +
                                     " has wrong dimension");
        }
    }
    RunHooks hooks;
    hooks.suppression = &spec;
    return forward_with_cache(model, tokens, hooks);
}

}  // namespace circuitprobe
