#pragma once

#include "circuitprobe/model.hpp"

#include <string>
#include <vector>

namespace circuitprobe {

// Orthogonal projection of v onto span{basis0, basis1} via the 2x2 closed
// form of M (M^T M)^{-1} M^T. Throws when the basis is rank-deficient.
VectorF project_onto_span(const VectorF& v, const VectorF& basis0, const VectorF& basis1);

double cosine(const VectorF& u, const VectorF& v);

// cosine( P b , W_U[to] - W_U[from] ) with P projecting onto the unembedding
// span of the two tokens.
double alignment(const Model& model, const VectorF& b, int from_token, int to_token);

// Relative corpus frequency per token id; ids absent from the input file keep
// weight zero.
struct FrequencyTable {
    std::vector<double> weight;

    // TSV lines "token_id<TAB>count"; '#' lines are comments.
    static FrequencyTable load(const std::string& path, int vocab_size);
    static FrequencyTable uniform(int vocab_size);
};

// E[W_U] = (1/V) sum_v w_v W_U[v]
VectorF expected_unembedding(const FrequencyTable& freq, const Model& model);

}  // namespace circuitprobe
