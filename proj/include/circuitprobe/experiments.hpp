#pragma once

#include "circuitprobe/instrumentation.hpp"
#include "circuitprobe/lens.hpp"
#include "circuitprobe/model.hpp"
#include "circuitprobe/regression.hpp"
#include "circuitprobe/reports.hpp"
#include "circuitprobe/tasks.hpp"
#include "circuitprobe/tokenizer.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace circuitprobe {

struct ExperimentConfig {
    std::string experiment;  // dynamics | patch-grid | mover | ov-probe | fit-mlp |
                             // project | fidelity | suppress
    std::string model_path;
    std::string vocab_path;
    std::string merges_path;
    std::string task_path;
    int shots = 0;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = all hardware threads

    int layer = -1;  // experiment-specific; -1 = experiment default
    int head = -1;
    std::string receiver = "resid_post:-1:final";
    std::string frequency_path;
    std::string solutions_path;
    std::string solver = "gd";  // gd | closed-form
    FitHyper hyper;
    std::vector<int> mask_layers;
    std::vector<int> subtract_intercept_layers;
    int topk = 5;
    bool expert_positions = false;
};

// Parses "site:layer[:pos]" ("head_out:9:8[:pos]" for heads). Positions are
// roles ("final", "x-end") or "-1"; other absolute indices need expert mode.
NodeId parse_node(const std::string& text, const ModelConfig& config, bool expert_positions);

// Runs the named experiment and writes its reports under out_dir.
// Throws with experiment context on any failure.
void run_experiment(const ExperimentConfig& config);

// ---- building blocks shared with the verification suite --------------------

struct GridCell {
    std::optional<double> mean_delta_pi;  // mean of per-prompt delta-pi
    std::optional<double> delta_of_mean_pi;  // the alternative aggregation
    int guarded = 0;                      // prompts excluded by the pi guard
};

struct PatchGrid {
    NodeId receiver;
    std::vector<std::vector<GridCell>> cells;  // [layer][head]
    int n_prompts = 0;
};

// Path patching a^{l,h}[-1] -> receiver for every head, the intervention set
// being the whole dataset (clean runs are shared across senders).
PatchGrid head_patch_grid(const Model& model, const std::vector<PromptInstance>& dataset,
                          const NodeId& receiver, int threads);

// One LayerSample per (layer, prompt) from a single forward pass per prompt.
std::vector<std::vector<LayerSample>> collect_samples_all_layers(
    const Model& model, const std::vector<PromptInstance>& dataset, int threads);

// Mean over prompts of a per-pair alignment of `v` with W_U[Y] - W_U[X].
double mean_pair_alignment(const Model& model, const VectorF& v, const TaskSpec& task,
                           const BpeVocab& vocab);

// Mean over prompts of cosine(v, W_U[X or Y]).
double mean_pair_cosine(const Model& model, const VectorF& v, const TaskSpec& task,
                        const BpeVocab& vocab, bool against_y);

struct SuppressionOutcome {
    double prob_mid_before = 0.0;   // prob(Y) at resid_mid of the last layer
    double prob_mid_after = 0.0;    // same, with heads masked
    double prob_post_before = 0.0;  // prob(Y) at resid_post of the last layer
    double prob_post_masked = 0.0;  // masked only
    double prob_post_after = 0.0;   // masked + intercept subtracted
};

SuppressionOutcome run_suppression_study(const Model& model,
                                         const std::vector<PromptInstance>& dataset,
                                         const std::vector<int>& mask_layers,
                                         const std::vector<std::pair<int, VectorF>>& subtractions,
                                         int threads);

nlohmann::json solutions_to_json(const std::vector<RegressionSolution>& solutions,
                                 const ReportMeta& meta);
std::vector<RegressionSolution> solutions_from_json(const nlohmann::json& j);
std::vector<RegressionSolution> load_solutions(const std::string& path);

}  // namespace circuitprobe
