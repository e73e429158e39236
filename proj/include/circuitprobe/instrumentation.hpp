#pragma once

#include "circuitprobe/model.hpp"
#include "circuitprobe/nodes.hpp"
#include "circuitprobe/tasks.hpp"

#include <optional>
#include <vector>

namespace circuitprobe {

// Guard on |pi| before the division in delta_logit; guarded entries are
// reported as missing rather than zero so heatmaps carry no fabricated spikes.
inline constexpr double kDeltaLogitGuard = 1e-3;

// Resolves a role-based position against a concrete prompt.
int resolve_position(const NodePos& pos, const PromptInstance& prompt);
NodeId resolve_node(const NodeId& node, const PromptInstance& prompt);

// Decodes residual-stream vectors through the final LayerNorm + unembedding.
// Precomputes the vocabulary-mean unembedding row, which turns the centered
// logit into a single dot product.
class LogitProbe {
public:
    explicit LogitProbe(const Model& model);

    // pi(token, v) = Unembed(v)[token] - mean_v Unembed(v)[v]   (Eq-style centering)
    double centered_logit(const VectorF& v, int token) const;

    const Model& model() const { return *model_; }

private:
    const Model* model_;
    VectorF mean_unembedding_row_;
};

// (patched/original - 1) * 100%; empty when |original| is inside the guard.
std::optional<double> delta_logit(double original_pi, double patched_pi);

// Arithmetic mean of a node's activation across prompts; role positions are
// resolved per prompt.
VectorF mean_node_activation(const Model& model, const NodeId& node,
                             const std::vector<PromptInstance>& prompts, int threads = 1);

// Forward pass with every listed node replaced before downstream computation
// consumes it. Role positions are resolved against `prompt`.
ActivationCache activation_patch(const Model& model, const PromptInstance& prompt,
                                 const std::vector<PatchSpec>& patches);

// Direct effect of replacing `sender` on `receiver`, all other paths frozen at
// their clean values: the receiver is recomputed from a hybrid cache.
VectorF direct_effect_value(const Model& model, const ActivationCache& clean, const NodeId& sender,
                            const NodeId& receiver, const VectorF& replacement);

// True when `sender` strictly precedes `receiver` in the causal graph.
bool strictly_precedes(const NodeId& sender, const NodeId& receiver);

// Path patching (three passes: clean run, intervention mean, hybrid receiver
// recomputation). Returns the per-prompt delta-pi, or empty when guarded.
std::optional<double> path_patch_effect(const Model& model, const NodeId& sender,
                                        const NodeId& receiver, const PromptInstance& original,
                                        const std::vector<PromptInstance>& interventions,
                                        int answer_token, int threads = 1);

// Forward pass under anti-overconfidence interventions: masked heads attend
// only to their own position; subtract vectors are removed from the named
// layers' resid_post at the final position before the next stage consumes it.
ActivationCache run_suppressed(const Model& model, std::span<const int> tokens,
                               const SuppressionSpec& spec);

}  // namespace circuitprobe
