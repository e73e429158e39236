// Acceptance gate: runs the verification suite and prints one line per
// criterion. Paper-value criteria need the GPT-2 small assets (see README);
// when absent they report SKIP and this binary falls back to the checked-in
// synthetic fixtures for the parity criterion so the whole pipeline is still
// exercised end to end.

#include "circuitprobe/verify.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>

int main(int argc, char** argv) {
    using circuitprobe::VerifyOptions;

    std::string assets;
    if (const char* env = std::getenv("CIRCUIT_PROBE_CACHE")) assets = env;
    if (argc > 1) assets = argv[1];

    VerifyOptions options = VerifyOptions::from_assets_dir(assets);
    options.task_dir = std::string(CIRCUITPROBE_TASKS_DIR);

    if (!std::filesystem::exists(options.model_path)) {
        const std::string fixtures = CIRCUITPROBE_FIXTURES_DIR;
        std::cout << "note: no gpt2-small assets under '"
                  << (assets.empty() ? "<unset CIRCUIT_PROBE_CACHE>" : assets)
                  << "'; using the synthetic fixture checkpoint for the parity criterion\n";
        options.model_path = fixtures + "/tiny_gpt2/model.safetensors";
        options.vocab_path = fixtures + "/tiny_bpe/vocab.json";
        options.merges_path = fixtures + "/tiny_bpe/merges.txt";
        options.golden_path = fixtures + "/tiny_gpt2/golden_logits.json";
        options.frequency_path = fixtures + "/tiny_gpt2/frequencies.tsv";
    }

    const auto results = circuitprobe::run_verification(options);
    return circuitprobe::report_verification(results);
}
