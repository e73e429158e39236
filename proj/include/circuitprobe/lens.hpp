#pragma once

#include "circuitprobe/model.hpp"
#include "circuitprobe/tasks.hpp"

#include <optional>
#include <string>
#include <vector>

namespace circuitprobe {

// Early decoding always goes through the final LayerNorm + unembedding; no
// per-layer normalization is substituted.

// softmax(Unembed(v)) evaluated at `token`.
double node_probability(const Model& model, const VectorF& v, int token);

// k highest-logit tokens of Unembed(v), descending, ties broken by ascending id.
std::vector<std::pair<int, float>> decode_topk(const Model& model, const VectorF& v, int k);

enum class LensSite { ResidPre, AttnSum, ResidMid, MlpOut, ResidPost };
std::string to_string(LensSite site);

struct DynamicsCell {
    double prob_x_mean = 0.0;
    double prob_x_var = 0.0;  // population variance over prompts
    double prob_y_mean = 0.0;
    double prob_y_var = 0.0;
};

// Per-layer, per-site probabilities of each prompt's X and Y tokens decoded at
// the final position, averaged over the dataset.
struct DynamicsReport {
    std::string task;
    int shots = 0;
    int n_prompts = 0;
    std::vector<LensSite> sites;
    std::vector<std::vector<DynamicsCell>> cells;  // [layer][site index]

    const DynamicsCell& at(int layer, LensSite site) const;
};

DynamicsReport layer_dynamics(const Model& model, const std::vector<PromptInstance>& dataset,
                              const std::vector<LensSite>& sites, int threads = 1);

// attn[t][s] * ||value_vector[s]||_2, rows renormalized to sum 1.
MatrixF value_weighted_pattern(const ActivationCache& cache, int layer, int head);

struct MoverScore {
    int layer = 0;
    int head = 0;
    std::optional<double> pearson_r;  // empty when a series is degenerate
    std::vector<std::pair<double, double>> points;  // (attention to X, <a[-1], W_U[X]>)
};

// Correlation between the head's attention from the final position to the X
// span end and the projection of its output along W_U[X], over the dataset.
MoverScore mover_score(const Model& model, const std::vector<PromptInstance>& dataset, int layer,
                       int head, int threads = 1);

// Pearson correlation with flagged-undefined handling for degenerate series.
std::optional<double> pearson(const std::vector<std::pair<double, double>>& points);

}  // namespace circuitprobe
