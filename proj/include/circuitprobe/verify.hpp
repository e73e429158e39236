#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace circuitprobe {

// Asset locations for the verification suite. Missing assets do not fail the
// run: criteria that need them report SKIP with the missing path named.
struct VerifyOptions {
    std::string model_path;
    std::string vocab_path;
    std::string merges_path;
    std::string golden_path;     // golden-logit JSON
    std::string frequency_path;  // corpus frequency TSV (conditional criteria)
    std::string task_dir;        // directory holding the task JSON files
    int threads = 0;
    std::string solver = "gd";  // regression route for criteria 7/8
    std::uint64_t seed = 0;

    // gpt2-small layout under a cache directory (see README); `dir` may be
    // empty, in which case the CIRCUIT_PROBE_CACHE env var is consulted.
    static VerifyOptions from_assets_dir(std::string dir);
};

struct CriterionResult {
    enum class Status { Pass, Fail, Skip };
    std::string id;
    Status status = Status::Skip;
    std::string detail;
};

std::vector<CriterionResult> run_verification(const VerifyOptions& options);

// Prints one pass/fail line per criterion; returns a process exit code
// (0 when nothing failed).
int report_verification(const std::vector<CriterionResult>& results);

}  // namespace circuitprobe
