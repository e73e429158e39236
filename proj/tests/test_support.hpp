#pragma once

#include "circuitprobe/model.hpp"
#include "circuitprobe/tasks.hpp"
#include "circuitprobe/tokenizer.hpp"

#include <string>

namespace testsupport {

inline std::string fixtures_dir() { return CIRCUITPROBE_FIXTURES_DIR; }
inline std::string tasks_dir() { return CIRCUITPROBE_TASKS_DIR; }

inline std::string tiny_bpe_dir() { return fixtures_dir() + "/tiny_bpe"; }
inline std::string tiny_model_path() { return fixtures_dir() + "/tiny_gpt2/model.safetensors"; }
inline std::string tiny_meta_model_path() {
    return fixtures_dir() + "/tiny_gpt2_meta/model.safetensors";
}

inline const circuitprobe::BpeVocab& tiny_vocab() {
    static const circuitprobe::BpeVocab vocab = circuitprobe::BpeVocab::load(
        tiny_bpe_dir() + "/vocab.json", tiny_bpe_dir() + "/merges.txt");
    return vocab;
}

inline const circuitprobe::Model& tiny_model() {
    static const circuitprobe::Model model = circuitprobe::load_weights(tiny_model_path());
    return model;
}

inline const circuitprobe::TaskSpec& country_task() {
    static const circuitprobe::TaskSpec task =
        circuitprobe::TaskSpec::load(tasks_dir() + "/country_capital.json");
    return task;
}

}  // namespace testsupport
