#include "circuitprobe/regression.hpp"

#include "circuitprobe/instrumentation.hpp"
#include "circuitprobe/parallel.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace circuitprobe {

namespace {

using MatrixD = Eigen::MatrixXd;
using VectorD = Eigen::VectorXd;

// Sufficient statistics of the least-squares problem over a sample subset.
// With K = H + 1 features (head outputs then resid_pre), the full-batch MSE
// and its gradient are linear in these, so a 60k-step fit never has to touch
// the raw samples again.
struct FitStats {
    int K = 0;
    Eigen::Index D = 0;
    std::size_t S = 0;
    MatrixD gram;        // [K x K]   sum_{s,d} F_k F_j
    MatrixD feat_sum;    // [K x D]   sum_s F_{k,s,d}
    VectorD feat_m;      // [K]       sum_{s,d} F_k m
    VectorD m_sum;       // [D]       sum_s m_{s,d}
    double m_sq = 0.0;   //           sum_{s,d} m^2
};

FitStats build_stats(const std::vector<LayerSample>& samples, const std::vector<std::size_t>& idx) {
    if (idx.empty()) {
        throw std::runtime_error("regression fold has no samples");
    }
    const int H = static_cast<int>(samples.front().head_out.size());
    const int K = H + 1;
    const Eigen::Index D = samples.front().resid_pre.size();

    FitStats st;
    st.K = K;
    st.D = D;
    st.S = idx.size();
    st.gram = MatrixD::Zero(K, K);
    st.feat_sum = MatrixD::Zero(K, D);
    st.feat_m = VectorD::Zero(K);
    st.m_sum = VectorD::Zero(D);

    MatrixD features(K, D);
    for (std::size_t i : idx) {
        const LayerSample& s = samples[i];
        for (int h = 0; h < H; ++h) {
            features.row(h) = s.head_out[static_cast<std::size_t>(h)].cast<double>().transpose();
        }
        features.row(H) = s.resid_pre.cast<double>().transpose();
        const VectorD m = s.mlp_out.cast<double>();

        st.gram.noalias() += features * features.transpose();
        st.feat_sum += features;
        st.feat_m.noalias() += features * m;
        st.m_sum += m;
        st.m_sq += m.squaredNorm();
    }
    return st;
}

double mse_from_stats(const FitStats& st, const VectorD& w, const VectorD& b) {
    const double n = static_cast<double>(st.S) * static_cast<double>(st.D);
    const VectorD ub = st.feat_sum * b;
    const double quad = w.dot(st.gram * w) + 2.0 * w.dot(ub - st.feat_m) +
                        static_cast<double>(st.S) * b.squaredNorm() - 2.0 * b.dot(st.m_sum) +
                        st.m_sq;
    return quad / n;
}

struct GdResult {
    VectorD w;
    VectorD b;
    double final_mse = 0.0;
    std::vector<double> loss_history;
};

GdResult run_gd(const FitStats& st, const FitHyper& hyper, int layer, bool record_history) {
    const double inv_n = 1.0 / (static_cast<double>(st.S) * static_cast<double>(st.D));
    VectorD w = VectorD::Zero(st.K);  // zero init: the reproducible choice
    VectorD b = VectorD::Zero(st.D);
    VectorD vel_w = VectorD::Zero(st.K);
    VectorD vel_b = VectorD::Zero(st.D);

    GdResult res;
    for (int step = 0; step < hyper.steps; ++step) {
        const VectorD grad_w = 2.0 * inv_n * (st.gram * w + st.feat_sum * b - st.feat_m);
        const VectorD grad_b =
            2.0 * inv_n *
            (st.feat_sum.transpose() * w + static_cast<double>(st.S) * b - st.m_sum);
        vel_w = hyper.momentum * vel_w + grad_w;
        vel_b = hyper.momentum * vel_b + grad_b;
        w -= hyper.learning_rate * vel_w;
        b -= hyper.learning_rate * vel_b;

        if (record_history && step % 100 == 0) {
            res.loss_history.push_back(mse_from_stats(st, w, b));
        }
        if (step % 1000 == 0 || step + 1 == hyper.steps) {
            const double loss = mse_from_stats(st, w, b);
            if (!std::isfinite(loss)) {
                throw std::runtime_error("regression diverged at layer " + std::to_string(layer) +
                                         ", step " + std::to_string(step));
            }
        }
    }
    res.final_mse = mse_from_stats(st, w, b);
    res.w = std::move(w);
    res.b = std::move(b);
    return res;
}

std::uint64_t pick_below(std::mt19937_64& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                (std::numeric_limits<std::uint64_t>::max() % n);
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % n;
}

void validate_samples(const std::vector<LayerSample>& samples) {
    if (samples.empty()) {
        throw std::runtime_error("regression needs samples");
    }
    const std::size_t H = samples.front().head_out.size();
    const Eigen::Index D = samples.front().resid_pre.size();
    for (const LayerSample& s : samples) {
        if (s.head_out.size() != H || s.resid_pre.size() != D || s.mlp_out.size() != D) {
            throw std::runtime_error("regression samples have inconsistent shapes");
        }
    }
}

RegressionSolution finish_solution(const std::vector<LayerSample>& samples,
                                   RegressionSolution sol) {
    sol.ape_percent = ape(sol, samples);
    return sol;
}

}  // namespace

std::vector<LayerSample> collect_samples(const Model& model,
                                         const std::vector<PromptInstance>& dataset, int layer,
                                         int threads) {
    if (dataset.empty()) {
        throw std::runtime_error("collect_samples needs a nonempty dataset");
    }
    if (layer < 0 || layer >= model.config.n_layers) {
        throw std::runtime_error("layer out of range: " + std::to_string(layer));
    }
    std::vector<LayerSample> samples(dataset.size());
    parallel_for(dataset.size(), threads, [&](std::size_t i) {
        const ActivationCache cache = forward_with_cache(model, dataset[i].tokens);
        const int t = dataset[i].final_position();
        LayerSample s;
        s.prompt_id = static_cast<int>(i);
        s.head_out.reserve(static_cast<std::size_t>(model.config.n_heads));
        for (int h = 0; h < model.config.n_heads; ++h) {
            s.head_out.push_back(
                cache.head_out[static_cast<std::size_t>(layer)][static_cast<std::size_t>(h)].row(t).transpose());
        }
        s.resid_pre = cache.resid_pre[static_cast<std::size_t>(layer)].row(t).transpose();
        s.mlp_out = cache.mlp_out[static_cast<std::size_t>(layer)].row(t).transpose();
        samples[i] = std::move(s);
    });
    return samples;
}

RegressionSolution fit_layer(const std::vector<LayerSample>& samples, const FitHyper& hyper,
                             int layer) {
    validate_samples(samples);
    const int folds = hyper.folds;
    if (folds < 1 || samples.size() < static_cast<std::size_t>(folds)) {
        throw std::runtime_error("need at least one sample per fold");
    }
    const int H = static_cast<int>(samples.front().head_out.size());

    // seeded shuffle, assignment round-robin over the shuffled order
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(hyper.seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(pick_below(rng, i))]);
    }

    RegressionSolution sol;
    sol.layer = layer;
    sol.solver = "gd";
    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train, val;
        for (std::size_t i = 0; i < order.size(); ++i) {
            (static_cast<int>(i % static_cast<std::size_t>(folds)) == f ? val : train)
                .push_back(order[i]);
        }
        const FitStats train_stats = build_stats(samples, train);
        const GdResult fit = run_gd(train_stats, hyper, layer, false);
        const FitStats val_stats = build_stats(samples, val);
        sol.fold_train_mse.push_back(fit.final_mse);
        sol.fold_val_mse.push_back(mse_from_stats(val_stats, fit.w, fit.b));
    }

    std::vector<std::size_t> all(samples.size());
    std::iota(all.begin(), all.end(), 0);
    const FitStats stats = build_stats(samples, all);
    GdResult fit = run_gd(stats, hyper, layer, true);
    sol.final_train_mse = fit.final_mse;
    sol.loss_history = std::move(fit.loss_history);
    sol.w_head.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) sol.w_head[static_cast<std::size_t>(h)] = static_cast<float>(fit.w[h]);
    sol.w_resid = static_cast<float>(fit.w[H]);
    sol.intercept = fit.b.cast<float>();
    return finish_solution(samples, std::move(sol));
}

RegressionSolution fit_layer_closed_form(const std::vector<LayerSample>& samples, int layer) {
    validate_samples(samples);
    const int H = static_cast<int>(samples.front().head_out.size());
    std::vector<std::size_t> all(samples.size());
    std::iota(all.begin(), all.end(), 0);
    const FitStats st = build_stats(samples, all);

    // For the optimal intercept b = mean(m) - sum_k w_k mean(F_k), the problem
    // reduces to normal equations over mean-centered features.
    const double S = static_cast<double>(st.S);
    const MatrixD feat_mean = st.feat_sum / S;           // [K x D]
    const VectorD m_mean = st.m_sum / S;                 // [D]
    const MatrixD a = st.gram - S * (feat_mean * feat_mean.transpose());
    const VectorD c = st.feat_m - S * (feat_mean * m_mean);
    const VectorD w = a.ldlt().solve(c);
    const VectorD b = m_mean - feat_mean.transpose() * w;

    RegressionSolution sol;
    sol.layer = layer;
    sol.solver = "closed_form";
    sol.final_train_mse = mse_from_stats(st, w, b);
    sol.w_head.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) sol.w_head[static_cast<std::size_t>(h)] = static_cast<float>(w[h]);
    sol.w_resid = static_cast<float>(w[H]);
    sol.intercept = b.cast<float>();
    return finish_solution(samples, std::move(sol));
}

VectorF reconstruct(const RegressionSolution& solution, const LayerSample& sample) {
    if (solution.w_head.size() != sample.head_out.size()) {
        throw std::runtime_error("solution and sample disagree on head count");
    }
    VectorF out = solution.intercept;
    for (std::size_t h = 0; h < sample.head_out.size(); ++h) {
        out += solution.w_head[h] * sample.head_out[h];
    }
    out += solution.w_resid * sample.resid_pre;
    return out;
}

double ape(const RegressionSolution& solution, const std::vector<LayerSample>& samples) {
    if (samples.empty()) {
        throw std::runtime_error("ape needs samples");
    }
    double total = 0.0;
    for (const LayerSample& s : samples) {
        const double norm = s.mlp_out.cast<double>().norm();
        if (norm == 0.0) {
            throw std::runtime_error("ape undefined: sample " + std::to_string(s.prompt_id) +
                                     " has zero-norm m");
        }
        const VectorF err = reconstruct(solution, s) - s.mlp_out;
        const double rmse =
            std::sqrt(err.cast<double>().squaredNorm() / static_cast<double>(err.size()));
        total += rmse / norm;
    }
    return total / static_cast<double>(samples.size()) * 100.0;
}

MlpLinearSubstitution to_substitution(const RegressionSolution& solution) {
    MlpLinearSubstitution sub;
    sub.layer = solution.layer;
    sub.w_head = solution.w_head;
    sub.w_resid = solution.w_resid;
    sub.intercept = solution.intercept;
    return sub;
}

FidelityResult fidelity_check(const Model& model, const std::vector<PromptInstance>& dataset,
                              const std::vector<RegressionSolution>& solutions, int threads) {
    if (dataset.empty()) {
        throw std::runtime_error("fidelity_check needs a nonempty dataset");
    }
    if (static_cast<int>(solutions.size()) != model.config.n_layers) {
        throw std::runtime_error("fidelity_check needs one solution per layer, got " +
                                 std::to_string(solutions.size()));
    }
    std::vector<MlpLinearSubstitution> subs;
    subs.reserve(solutions.size());
    for (const RegressionSolution& s : solutions) subs.push_back(to_substitution(s));

    const LogitProbe probe(model);
    std::vector<double> kls(dataset.size());
    std::vector<double> pi_orig(dataset.size());
    std::vector<double> pi_sub(dataset.size());

    parallel_for(dataset.size(), threads, [&](std::size_t i) {
        const PromptInstance& prompt = dataset[i];
        const ActivationCache clean = forward_with_cache(model, prompt.tokens);
        RunHooks hooks;
        hooks.mlp_substitutions = subs;
        const ActivationCache subbed = forward_with_cache(model, prompt.tokens, hooks);

        const int t = prompt.final_position();
        const VectorF p_logits = clean.final_logits.row(t).transpose();
        const VectorF q_logits = subbed.final_logits.row(t).transpose();
        const double lse_p = [&] {
            const float mx = p_logits.maxCoeff();
            double s = 0.0;
            for (Eigen::Index k = 0; k < p_logits.size(); ++k) {
                s += std::exp(static_cast<double>(p_logits[k]) - mx);
            }
            return mx + std::log(s);
        }();
        const double lse_q = [&] {
            const float mx = q_logits.maxCoeff();
            double s = 0.0;
            for (Eigen::Index k = 0; k < q_logits.size(); ++k) {
                s += std::exp(static_cast<double>(q_logits[k]) - mx);
            }
            return mx + std::log(s);
        }();
        double kl = 0.0;
        for (Eigen::Index k = 0; k < p_logits.size(); ++k) {
            const double log_p = static_cast<double>(p_logits[k]) - lse_p;
            const double log_q = static_cast<double>(q_logits[k]) - lse_q;
            kl += std::exp(log_p) * (log_p - log_q);
        }
        kls[i] = kl;

        const VectorF final_orig = clean.resid_post.back().row(t).transpose();
        const VectorF final_sub = subbed.resid_post.back().row(t).transpose();
        pi_orig[i] = probe.centered_logit(final_orig, prompt.y_token);
        pi_sub[i] = probe.centered_logit(final_sub, prompt.y_token);
    });

    FidelityResult res;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        res.kl_divergence += kls[i];
        res.mean_pi_y_original += pi_orig[i];
        res.mean_pi_y_substituted += pi_sub[i];
    }
    const double n = static_cast<double>(dataset.size());
    res.kl_divergence /= n;
    res.mean_pi_y_original /= n;
    res.mean_pi_y_substituted /= n;
    return res;
}

}  // namespace circuitprobe
