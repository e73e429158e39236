// circuit-probe: instrumented GPT-2 analysis experiments over a model + task.

#include "circuitprobe/experiments.hpp"
#include "circuitprobe/verify.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

std::string cache_dir() {
    if (const char* env = std::getenv("CIRCUIT_PROBE_CACHE")) return env;
    return "";
}

void add_common_options(CLI::App* cmd, circuitprobe::ExperimentConfig& cfg) {
    const std::string cache = cache_dir();
    if (!cache.empty()) {
        cfg.model_path = cache + "/gpt2-small/model.safetensors";
        cfg.vocab_path = cache + "/gpt2-small/vocab.json";
        cfg.merges_path = cache + "/gpt2-small/merges.txt";
    }
    cmd->add_option("--model", cfg.model_path, "tensor archive (.safetensors)")
        ->required(cfg.model_path.empty());
    cmd->add_option("--vocab", cfg.vocab_path, "tokenizer vocab.json");
    cmd->add_option("--merges", cfg.merges_path, "tokenizer merges.txt");
    cmd->add_option("--task", cfg.task_path, "task JSON file")->required();
    cmd->add_option("--shots", cfg.shots, "in-context demonstrations (0, 1 or 2)")
        ->check(CLI::Range(0, 2));
    cmd->add_option("--out", cfg.out_dir, "output directory (default: out)");
    cmd->add_option("--seed", cfg.seed, "seed for all randomness");
    cmd->add_option("--threads", cfg.threads, "worker threads (default: all cores)");
    cmd->add_flag("--expert-positions", cfg.expert_positions,
                  "allow absolute token indices in node positions");
}

void default_tokenizer_paths(circuitprobe::ExperimentConfig& cfg) {
    // vocab.json / merges.txt next to the weight archive unless given
    const auto slash = cfg.model_path.find_last_of('/');
    const std::string dir =
        slash == std::string::npos ? std::string(".") : cfg.model_path.substr(0, slash);
    if (cfg.vocab_path.empty()) cfg.vocab_path = dir + "/vocab.json";
    if (cfg.merges_path.empty()) cfg.merges_path = dir + "/merges.txt";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"circuit-probe: residual-stream analysis of GPT-2-family checkpoints"};
    app.require_subcommand(1);

    circuitprobe::ExperimentConfig cfg;

    auto* dynamics = app.add_subcommand("dynamics", "decoded X/Y probabilities per layer");
    add_common_options(dynamics, cfg);

    auto* grid = app.add_subcommand("patch-grid", "head-output path-patching heatmap");
    add_common_options(grid, cfg);
    grid->add_option("--receiver", cfg.receiver,
                     "receiver node, site:layer[:pos] (default resid_post:-1:final)");

    auto* mover = app.add_subcommand("mover", "attention-vs-projection mover-head scores");
    add_common_options(mover, cfg);
    mover->add_option("--layer", cfg.layer, "scatter detail layer");
    mover->add_option("--head", cfg.head, "scatter detail head");

    auto* ov = app.add_subcommand("ov-probe", "decode a head's OV output at the X position");
    add_common_options(ov, cfg);
    ov->add_option("--layer", cfg.layer, "probed layer (default: n_layers-3)");
    ov->add_option("--head", cfg.head, "probed head (default: 8)");
    ov->add_option("--topk", cfg.topk, "decoded candidates per prompt");

    auto* fit = app.add_subcommand("fit-mlp", "regress MLP outputs on head outputs + residual");
    add_common_options(fit, cfg);
    fit->add_option("--layer", cfg.layer, "single layer (default: all)");
    fit->add_option("--solver", cfg.solver, "gd | closed-form")
        ->check(CLI::IsMember({"gd", "closed-form"}));
    fit->add_option("--lr", cfg.hyper.learning_rate, "gd learning rate");
    fit->add_option("--steps", cfg.hyper.steps, "gd steps");
    fit->add_option("--momentum", cfg.hyper.momentum, "gd momentum");
    fit->add_option("--folds", cfg.hyper.folds, "cross-validation folds");

    auto* project = app.add_subcommand("project", "unembedding-plane projections and cosines");
    add_common_options(project, cfg);
    project->add_option("--layer", cfg.layer, "layer (default: n_layers-2)");
    project->add_option("--solutions", cfg.solutions_path, "mlp_solutions.json from fit-mlp");
    project->add_option("--frequencies", cfg.frequency_path, "corpus frequency TSV");

    auto* fidelity = app.add_subcommand("fidelity", "KL check of the substituted-MLP model");
    add_common_options(fidelity, cfg);
    fidelity->add_option("--solutions", cfg.solutions_path, "mlp_solutions.json from fit-mlp");

    auto* suppress = app.add_subcommand("suppress", "anti-overconfidence interventions");
    add_common_options(suppress, cfg);
    suppress->add_option("--mask-layer", cfg.mask_layers,
                         "force this layer's heads to self-attention (repeatable)");
    suppress->add_option("--subtract-intercept", cfg.subtract_intercept_layers,
                         "subtract this layer's fitted intercept (repeatable)");
    suppress->add_option("--solutions", cfg.solutions_path, "mlp_solutions.json from fit-mlp");

    circuitprobe::VerifyOptions vopts = circuitprobe::VerifyOptions::from_assets_dir("");
    std::string assets_dir;
    auto* verify = app.add_subcommand("verify", "run the acceptance checks and print a table");
    verify->add_option("--assets", assets_dir, "gpt2-small asset dir ($CIRCUIT_PROBE_CACHE)");
    verify->add_option("--model", vopts.model_path, "weight archive override");
    verify->add_option("--vocab", vopts.vocab_path, "vocab.json override");
    verify->add_option("--merges", vopts.merges_path, "merges.txt override");
    verify->add_option("--golden", vopts.golden_path, "golden logits JSON override");
    verify->add_option("--frequencies", vopts.frequency_path, "corpus frequency TSV override");
    verify->add_option("--tasks", vopts.task_dir, "task JSON directory (default: data/tasks)");
    verify->add_option("--threads", vopts.threads, "worker threads");
    verify->add_option("--seed", vopts.seed, "seed");
    verify->add_option("--solver", vopts.solver, "regression route for criteria 7/8")
        ->check(CLI::IsMember({"gd", "closed-form"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (verify->parsed()) {
            if (!assets_dir.empty()) {
                circuitprobe::VerifyOptions from_dir =
                    circuitprobe::VerifyOptions::from_assets_dir(assets_dir);
                from_dir.task_dir = vopts.task_dir;
                from_dir.threads = vopts.threads;
                from_dir.seed = vopts.seed;
                from_dir.solver = vopts.solver;
                if (!verify->get_option("--model")->empty()) from_dir.model_path = vopts.model_path;
                if (!verify->get_option("--vocab")->empty()) from_dir.vocab_path = vopts.vocab_path;
                if (!verify->get_option("--merges")->empty()) from_dir.merges_path = vopts.merges_path;
                if (!verify->get_option("--golden")->empty()) from_dir.golden_path = vopts.golden_path;
                if (!verify->get_option("--frequencies")->empty()) {
                    from_dir.frequency_path = vopts.frequency_path;
                }
                vopts = from_dir;
            }
            return circuitprobe::report_verification(circuitprobe::run_verification(vopts));
        }
        for (CLI::App* cmd : {dynamics, grid, mover, ov, fit, project, fidelity, suppress}) {
            if (cmd->parsed()) {
                cfg.experiment = cmd->get_name();
                default_tokenizer_paths(cfg);
                circuitprobe::run_experiment(cfg);
                return 0;
            }
        }
        std::cerr << "no subcommand selected\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
