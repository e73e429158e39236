#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>

namespace circuitprobe {

// Row-major everywhere: activations are [seq x d_model] with one position per
// row, weights are stored exactly as they appear in the checkpoint ([in x out]).
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;

// GPT-2 checkpoints were trained with the tanh approximation of GELU; the
// exact-erf variant drifts enough to break logit parity with the reference.
inline float gelu_tanh(float x) {
    constexpr float sqrt_2_over_pi = 0.7978845608028654f;
    constexpr float coeff = 0.044715f;
    return 0.5f * x * (1.0f + std::tanh(sqrt_2_over_pi * (x + coeff * x * x * x)));
}

// In-place row softmax, max-shifted, sum accumulated in double.
inline void softmax_inplace(Eigen::Ref<Eigen::RowVectorXf> row) {
    const float max_val = row.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < row.size(); ++i) {
        const double e = std::exp(static_cast<double>(row[i]) - max_val);
        row[i] = static_cast<float>(e);
        sum += e;
    }
    const float inv = static_cast<float>(1.0 / sum);
    row *= inv;
}

// LayerNorm of a single vector; mean/variance accumulated in double.
inline VectorF layer_norm(const Eigen::Ref<const VectorF>& x, const VectorF& gamma,
                          const VectorF& beta, float eps) {
    const Eigen::Index n = x.size();
    double mean = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const float inv_std = static_cast<float>(1.0 / std::sqrt(var + eps));
    VectorF y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        y[i] = gamma[i] * ((x[i] - static_cast<float>(mean)) * inv_std) + beta[i];
    }
    return y;
}

// Row-wise LayerNorm of a [seq x d] matrix.
inline MatrixF layer_norm_rows(const MatrixF& x, const VectorF& gamma, const VectorF& beta,
                               float eps) {
    MatrixF y(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        y.row(t) = layer_norm(x.row(t).transpose(), gamma, beta, eps).transpose();
    }
    return y;
}

// FNV-1a, used to fingerprint weight files in report metadata.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace circuitprobe
