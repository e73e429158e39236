#include "circuitprobe/lens.hpp"

#include "circuitprobe/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace circuitprobe {

namespace {

// log softmax normalizer of Unembed(v), accumulated in double
double log_sum_exp(const VectorF& logits) {
    const float max_val = logits.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        sum += std::exp(static_cast<double>(logits[i]) - max_val);
    }
    return max_val + std::log(sum);
}

struct RunningMoments {
    double sum = 0.0;
    double sum_sq = 0.0;
    int n = 0;

    void add(double v) {
        sum += v;
        sum_sq += v * v;
        ++n;
    }
    double mean() const { return n ? sum / n : 0.0; }
    double variance() const {
        if (n == 0) return 0.0;
        const double m = mean();
        return std::max(0.0, sum_sq / n - m * m);
    }
};

}  // namespace

std::string to_string(LensSite site) {
    switch (site) {
        case LensSite::ResidPre: return "resid_pre";
        case LensSite::AttnSum: return "attn_sum";
        case LensSite::ResidMid: return "resid_mid";
        case LensSite::MlpOut: return "mlp_out";
        case LensSite::ResidPost: return "resid_post";
    }
    return "?";
}

double node_probability(const Model& model, const VectorF& v, int token) {
    if (token < 0 || token >= model.config.d_vocab) {
        throw std::runtime_error("token id out of range: " + std::to_string(token));
    }
    const VectorF logits = unembed(model, v);
    return std::exp(static_cast<double>(logits[token]) - log_sum_exp(logits));
}

std::vector<std::pair<int, float>> decode_topk(const Model& model, const VectorF& v, int k) {
    if (k < 0 || k > model.config.d_vocab) {
        throw std::runtime_error("k out of range: " + std::to_string(k));
    }
    const VectorF logits = unembed(model, v);
    std::vector<int> idx(static_cast<std::size_t>(model.config.d_vocab));
    std::iota(idx.begin(), idx.end(), 0);
    const auto better = [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;  // deterministic tie break
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
    std::vector<std::pair<int, float>> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) out.emplace_back(idx[static_cast<std::size_t>(i)], logits[idx[static_cast<std::size_t>(i)]]);
    return out;
}

const DynamicsCell& DynamicsReport::at(int layer, LensSite site) const {
    for (std::size_t s = 0; s < sites.size(); ++s) {
        if (sites[s] == site) return cells[static_cast<std::size_t>(layer)][s];
    }
    throw std::runtime_error("dynamics report does not cover site " + to_string(site));
}

DynamicsReport layer_dynamics(const Model& model, const std::vector<PromptInstance>& dataset,
                              const std::vector<LensSite>& sites, int threads) {
    if (dataset.empty()) {
        throw std::runtime_error("layer_dynamics needs a nonempty dataset");
    }
    const int L = model.config.n_layers;
    const int S = static_cast<int>(sites.size());

    // per prompt: probabilities of (X, Y) at [layer][site]
    std::vector<std::vector<std::pair<double, double>>> probs(
        dataset.size(), std::vector<std::pair<double, double>>(static_cast<std::size_t>(L * S)));

    parallel_for(dataset.size(), threads, [&](std::size_t i) {
        const PromptInstance& prompt = dataset[i];
        const ActivationCache cache = forward_with_cache(model, prompt.tokens);
        const int t = prompt.final_position();

        // batch all nodes of this prompt through LN_f + W_U in one product
        MatrixF rows(L * S, model.config.d_model);
        for (int l = 0; l < L; ++l) {
            for (int s = 0; s < S; ++s) {
                Eigen::RowVectorXf row;
                switch (sites[static_cast<std::size_t>(s)]) {
                    case LensSite::ResidPre: row = cache.resid_pre[static_cast<std::size_t>(l)].row(t); break;
                    case LensSite::ResidMid: row = cache.resid_mid[static_cast<std::size_t>(l)].row(t); break;
                    case LensSite::ResidPost: row = cache.resid_post[static_cast<std::size_t>(l)].row(t); break;
                    case LensSite::MlpOut: row = cache.mlp_out[static_cast<std::size_t>(l)].row(t); break;
                    case LensSite::AttnSum: {
                        row = Eigen::RowVectorXf::Zero(model.config.d_model);
                        for (int h = 0; h < model.config.n_heads; ++h) {
                            row += cache.head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].row(t);
                        }
                        break;
                    }
                }
                rows.row(l * S + s) = row;
            }
        }
        const MatrixF normed = layer_norm_rows(rows, model.weights.ln_f_gamma,
                                               model.weights.ln_f_beta, model.config.ln_epsilon);
        const MatrixF logits = normed * model.weights.unembedding.transpose();
        for (int r = 0; r < L * S; ++r) {
            const VectorF row = logits.row(r).transpose();
            const double lse = log_sum_exp(row);
            probs[i][static_cast<std::size_t>(r)] = {
                std::exp(static_cast<double>(row[prompt.x_token]) - lse),
                std::exp(static_cast<double>(row[prompt.y_token]) - lse)};
        }
    });

    DynamicsReport report;
    report.shots = dataset.front().shots;
    report.n_prompts = static_cast<int>(dataset.size());
    report.sites = sites;
    report.cells.assign(static_cast<std::size_t>(L), std::vector<DynamicsCell>(static_cast<std::size_t>(S)));
    for (int l = 0; l < L; ++l) {
        for (int s = 0; s < S; ++s) {
            RunningMoments mx, my;
            for (std::size_t i = 0; i < dataset.size(); ++i) {
                mx.add(probs[i][static_cast<std::size_t>(l * S + s)].first);
                my.add(probs[i][static_cast<std::size_t>(l * S + s)].second);
            }
            DynamicsCell& cell = report.cells[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)];
            cell.prob_x_mean = mx.mean();
            cell.prob_x_var = mx.variance();
            cell.prob_y_mean = my.mean();
            cell.prob_y_var = my.variance();
        }
    }
    return report;
}

MatrixF value_weighted_pattern(const ActivationCache& cache, int layer, int head) {
    const MatrixF& pattern = cache.attn_pattern.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
    const MatrixF& values = cache.value_vectors.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
    const int T = static_cast<int>(pattern.rows());
    VectorF norms(T);
    for (int s = 0; s < T; ++s) norms[s] = values.row(s).norm();

    MatrixF weighted = MatrixF::Zero(T, T);
    for (int t = 0; t < T; ++t) {
        double row_sum = 0.0;
        for (int s = 0; s <= t; ++s) {
            const double w = static_cast<double>(pattern(t, s)) * norms[s];
            weighted(t, s) = static_cast<float>(w);
            row_sum += w;
        }
        if (row_sum > 0.0) {
            weighted.row(t) /= static_cast<float>(row_sum);
        }
    }
    return weighted;
}

std::optional<double> pearson(const std::vector<std::pair<double, double>>& points) {
    const std::size_t n = points.size();
    if (n < 2) return std::nullopt;
    double mean_a = 0.0, mean_b = 0.0;
    for (const auto& [a, b] : points) {
        mean_a += a;
        mean_b += b;
    }
    mean_a /= static_cast<double>(n);
    mean_b /= static_cast<double>(n);
    double cov = 0.0, var_a = 0.0, var_b = 0.0;
    for (const auto& [a, b] : points) {
        cov += (a - mean_a) * (b - mean_b);
        var_a += (a - mean_a) * (a - mean_a);
        var_b += (b - mean_b) * (b - mean_b);
    }
    if (var_a <= 0.0 || var_b <= 0.0) return std::nullopt;  // degenerate series
    return cov / std::sqrt(var_a * var_b);
}

MoverScore mover_score(const Model& model, const std::vector<PromptInstance>& dataset, int layer,
                       int head, int threads) {
    if (dataset.empty()) {
        throw std::runtime_error("mover_score needs a nonempty dataset");
    }
    if (layer < 0 || layer >= model.config.n_layers || head < 0 ||
        head >= model.config.n_heads) {
        throw std::runtime_error("layer/head out of range");
    }
    MoverScore score;
    score.layer = layer;
    score.head = head;
    score.points.resize(dataset.size());
    parallel_for(dataset.size(), threads, [&](std::size_t i) {
        const PromptInstance& prompt = dataset[i];
        const ActivationCache cache = forward_with_cache(model, prompt.tokens);
        const int t = prompt.final_position();
        const double attention =
            cache.attn_pattern[static_cast<std::size_t>(layer)][static_cast<std::size_t>(head)](t, prompt.x_position());
        const VectorF out =
            cache.head_out[static_cast<std::size_t>(layer)][static_cast<std::size_t>(head)].row(t).transpose();
        const double inner = out.cast<double>().dot(
            model.weights.unembedding.row(prompt.x_token).transpose().cast<double>());
        score.points[i] = {attention, inner};
    });
    score.pearson_r = pearson(score.points);
    return score;
}

}  // namespace circuitprobe
