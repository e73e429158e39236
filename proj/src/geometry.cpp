#include "circuitprobe/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace circuitprobe {

VectorF project_onto_span(const VectorF& v, const VectorF& basis0, const VectorF& basis1) {
    if (basis0.size() != v.size() || basis1.size() != v.size()) {
        throw std::runtime_error("projection basis and vector dimensions disagree");
    }
    const Eigen::VectorXd b0 = basis0.cast<double>();
    const Eigen::VectorXd b1 = basis1.cast<double>();
    const Eigen::VectorXd x = v.cast<double>();

    const double g00 = b0.squaredNorm();
    const double g11 = b1.squaredNorm();
    const double g01 = b0.dot(b1);
    const double det = g00 * g11 - g01 * g01;
    // det = ||b0||^2 ||b1||^2 (1 - cos^2); treat near-parallel bases as rank-deficient
    if (!(det > 1e-12 * g00 * g11) || g00 == 0.0 || g11 == 0.0) {
        throw std::runtime_error("projection basis is rank-deficient");
    }
    const double p0 = b0.dot(x);
    const double p1 = b1.dot(x);
    const double alpha = (g11 * p0 - g01 * p1) / det;
    const double beta = (g00 * p1 - g01 * p0) / det;
    return (alpha * b0 + beta * b1).cast<float>();
}

double cosine(const VectorF& u, const VectorF& v) {
    if (u.size() != v.size()) {
        throw std::runtime_error("cosine of vectors with different dimensions");
    }
    const double nu = u.cast<double>().norm();
    const double nv = v.cast<double>().norm();
    if (nu == 0.0 || nv == 0.0) {
        throw std::runtime_error("cosine undefined for a zero vector");
    }
    return u.cast<double>().dot(v.cast<double>()) / (nu * nv);
}

double alignment(const Model& model, const VectorF& b, int from_token, int to_token) {
    if (from_token == to_token) {
        throw std::runtime_error("alignment requires distinct tokens");
    }
    const int V = model.config.d_vocab;
    if (from_token < 0 || from_token >= V || to_token < 0 || to_token >= V) {
        throw std::runtime_error("alignment token id out of range");
    }
    const VectorF wu_from = model.weights.unembedding.row(from_token).transpose();
    const VectorF wu_to = model.weights.unembedding.row(to_token).transpose();
    const VectorF projected = project_onto_span(b, wu_from, wu_to);
    return cosine(projected, wu_to - wu_from);
}

FrequencyTable FrequencyTable::load(const std::string& path, int vocab_size) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open frequency file: " + path);
    FrequencyTable table;
    table.weight.assign(static_cast<std::size_t>(vocab_size), 0.0);
    std::string line;
    std::size_t lineno = 0;
    bool any_positive = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        long long id = -1;
        double count = 0.0;
        if (!(ss >> id >> count)) {
            throw std::runtime_error("malformed frequency line " + std::to_string(lineno) +
                                     " in " + path);
        }
        if (count < 0.0) {
            throw std::runtime_error("negative frequency at line " + std::to_string(lineno) +
                                     " in " + path);
        }
        if (id < 0 || id >= vocab_size) continue;  // ids outside this vocabulary carry nothing
        table.weight[static_cast<std::size_t>(id)] = count;
        if (count > 0.0) any_positive = true;
    }
    if (!any_positive) {
        throw std::runtime_error("frequency table " + path + " has no positive weight");
    }
    return table;
}

FrequencyTable FrequencyTable::uniform(int vocab_size) {
    FrequencyTable table;
    table.weight.assign(static_cast<std::size_t>(vocab_size), 1.0);
    return table;
}

VectorF expected_unembedding(const FrequencyTable& freq, const Model& model) {
    const int V = model.config.d_vocab;
    if (static_cast<int>(freq.weight.size()) != V) {
        throw std::runtime_error("frequency table covers " + std::to_string(freq.weight.size()) +
                                 " ids, vocabulary has " + std::to_string(V));
    }
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.config.d_model);
    bool any_positive = false;
    for (int v = 0; v < V; ++v) {
        const double w = freq.weight[static_cast<std::size_t>(v)];
        if (w == 0.0) continue;
        any_positive = true;
        acc += w * model.weights.unembedding.row(v).transpose().cast<double>();
    }
    if (!any_positive) {
        throw std::runtime_error("expected unembedding of an all-zero frequency table");
    }
    return (acc / static_cast<double>(V)).cast<float>();
}

}  // namespace circuitprobe
