#pragma once

#include "circuitprobe/tokenizer.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace circuitprobe {

// A factual-recall task: prompt templates with one {X} slot, (X, Y) pairs with
// unique X, and the demonstration template used to build few-shot prefixes.
struct TaskSpec {
    std::string name;
    std::vector<std::string> templates;
    std::vector<std::pair<std::string, std::string>> pairs;
    std::string shot_prefix_template;  // contains {X} and {Y}, e.g. "The capital of {X} is {Y}, "

    static TaskSpec load(const std::string& path);
    void validate() const;
};

struct PromptInstance {
    std::string text;
    std::vector<int> tokens;
    TokenSpan x_span;  // the query occurrence of X; its last token is "the X position"
    int x_token = -1;  // first subword of the leading-space form of X (logit metrics)
    int y_token = -1;  // first subword of the leading-space form of Y
    int template_index = 0;
    int pair_index = 0;
    int shots = 0;
    std::vector<int> demonstration_pairs;  // indices into TaskSpec::pairs

    int x_position() const { return x_span.end - 1; }
    int final_position() const { return static_cast<int>(tokens.size()) - 1; }
};

// |templates| x |pairs| instances; demonstrations are sampled without
// replacement, never equal to the query pair, deterministically per seed.
std::vector<PromptInstance> build_dataset(const TaskSpec& spec, const BpeVocab& vocab, int shots,
                                          std::uint64_t seed);

// The paper's protocol: the intervention set for any prompt is the entire
// test dataset, the original included.
std::vector<PromptInstance> intervention_set(const std::vector<PromptInstance>& dataset,
                                             const PromptInstance& for_prompt);

}  // namespace circuitprobe
