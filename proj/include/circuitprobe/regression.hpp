#pragma once

#include "circuitprobe/model.hpp"
#include "circuitprobe/tasks.hpp"

#include <cstdint>
#include <vector>

namespace circuitprobe {

// One layer's final-position activations from a single clean forward pass:
// the regression targets m from the same run as its features.
struct LayerSample {
    std::vector<VectorF> head_out;  // H vectors of size d_model
    VectorF resid_pre;
    VectorF mlp_out;
    int prompt_id = 0;
};

struct FitHyper {
    double learning_rate = 0.005;
    int steps = 60000;
    double momentum = 0.99;
    int folds = 4;
    std::uint64_t seed = 0;
};

// m_hat = b + sum_h w_head[h] * a_h + w_resid * r_pre, with fit diagnostics.
struct RegressionSolution {
    int layer = 0;
    std::vector<float> w_head;
    float w_resid = 0.0f;
    VectorF intercept;
    std::vector<double> fold_train_mse;
    std::vector<double> fold_val_mse;
    double final_train_mse = 0.0;
    double ape_percent = 0.0;
    std::vector<double> loss_history;  // final refit loss, sampled every 100 steps
    std::string solver;                // "gd" or "closed_form"
};

std::vector<LayerSample> collect_samples(const Model& model,
                                         const std::vector<PromptInstance>& dataset, int layer,
                                         int threads = 1);

// Full-batch gradient descent with momentum (deterministic: zero init, the
// seed only shuffles the cross-validation folds). Reports per-fold train/val
// MSE, then refits on all samples. Throws on divergence, naming layer + step.
RegressionSolution fit_layer(const std::vector<LayerSample>& samples, const FitHyper& hyper,
                             int layer);

// Normal-equations solution of the same problem; the independent cross-check
// for the gradient-descent route.
RegressionSolution fit_layer_closed_form(const std::vector<LayerSample>& samples, int layer);

VectorF reconstruct(const RegressionSolution& solution, const LayerSample& sample);

// mean over samples of  sqrt(mean_d (m_hat - m)^2) / ||m||  * 100%
double ape(const RegressionSolution& solution, const std::vector<LayerSample>& samples);

MlpLinearSubstitution to_substitution(const RegressionSolution& solution);

struct FidelityResult {
    double kl_divergence = 0.0;        // mean KL(original || substituted), final position
    double mean_pi_y_original = 0.0;   // mean centered logit of Y
    double mean_pi_y_substituted = 0.0;
};

// Runs the model with every layer's MLP output replaced, at the final
// position, by the fitted linear combination of that run's own activations.
FidelityResult fidelity_check(const Model& model, const std::vector<PromptInstance>& dataset,
                              const std::vector<RegressionSolution>& solutions, int threads = 1);

}  // namespace circuitprobe
