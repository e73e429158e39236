#include "circuitprobe/experiments.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>

using namespace circuitprobe;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json slurp_json(const std::string& path) { return nlohmann::json::parse(slurp(path)); }

ExperimentConfig base_config(const std::string& experiment, const std::string& out) {
    ExperimentConfig cfg;
    cfg.experiment = experiment;
    cfg.model_path = testsupport::tiny_model_path();
    cfg.vocab_path = testsupport::tiny_bpe_dir() + "/vocab.json";
    cfg.merges_path = testsupport::tiny_bpe_dir() + "/merges.txt";
    cfg.task_path = testsupport::tasks_dir() + "/country_capital.json";
    cfg.out_dir = out;
    cfg.seed = 11;
    cfg.threads = 2;
    return cfg;
}

const std::string kOut = std::filesystem::temp_directory_path() / "circuitprobe_test_out";

}  // namespace

TEST_CASE("parse_node handles sites, layers, heads and role positions") {
    const ModelConfig& cfg = testsupport::tiny_model().config;
    NodeId n = parse_node("resid_post:-1:final", cfg, false);
    CHECK(n.site == NodeSite::ResidPost);
    CHECK(n.layer == cfg.n_layers - 1);
    CHECK(n.position.kind == NodePos::Kind::Final);

    n = parse_node("head_out:1:0:x-end", cfg, false);
    CHECK(n.site == NodeSite::HeadOut);
    CHECK(n.layer == 1);
    CHECK(n.head == 0);
    CHECK(n.position.kind == NodePos::Kind::XSpanEnd);

    n = parse_node("resid_mid:0", cfg, false);
    CHECK(n.position.kind == NodePos::Kind::Final);

    CHECK_THROWS(parse_node("garbage", cfg, false));
    CHECK_THROWS(parse_node("resid_post:99", cfg, false));
    CHECK_THROWS(parse_node("head_out:0:99", cfg, false));
    // absolute positions gate behind expert mode
    CHECK_THROWS_WITH_AS(parse_node("resid_post:1:3", cfg, false), doctest::Contains("expert"),
                         std::runtime_error);
    n = parse_node("resid_post:1:3", cfg, true);
    CHECK(n.position.kind == NodePos::Kind::Absolute);
    CHECK(n.position.index == 3);
}

TEST_CASE("dynamics experiment writes reproducible reports") {
    const std::string out = kOut + "/dynamics";
    std::filesystem::remove_all(out);
    run_experiment(base_config("dynamics", out));

    const std::string csv1 = slurp(out + "/dynamics.csv");
    CHECK(csv1.find("layer,site,prob_x_mean") != std::string::npos);
    const nlohmann::json j = slurp_json(out + "/dynamics.json");
    CHECK(j.at("meta").at("experiment") == "dynamics");
    CHECK(j.at("meta").at("seed") == 11);
    CHECK(j.at("n_prompts") == 225);
    CHECK(j.at("cells").size() == 3 * 5);  // layers x sites
    const std::string svg = slurp(out + "/dynamics.svg");
    CHECK(svg.find("<svg") != std::string::npos);

    // identical config + seed => byte-identical reports
    run_experiment(base_config("dynamics", out));
    CHECK(slurp(out + "/dynamics.csv") == csv1);
}

TEST_CASE("patch-grid experiment emits the full head grid") {
    const std::string out = kOut + "/grid";
    std::filesystem::remove_all(out);
    ExperimentConfig cfg = base_config("patch-grid", out);
    cfg.receiver = "resid_post:-1:final";
    run_experiment(cfg);

    const nlohmann::json j = slurp_json(out + "/patch_grid.json");
    CHECK(j.at("receiver") == "resid_post:2:final");
    CHECK(j.at("cells").size() == 3 * 2);
    int upstream_cells = 0;
    for (const auto& cell : j.at("cells")) {
        if (cell.contains("mean_delta_pi")) ++upstream_cells;
    }
    // heads of layers 0..2 all feed resid_post:2
    CHECK(upstream_cells == 6);
    CHECK(slurp(out + "/patch_grid.csv").find("# receiver=resid_post:2:final") !=
          std::string::npos);
    CHECK(slurp(out + "/patch_grid.svg").find("<svg") != std::string::npos);

    // a receiver below the first layer's heads has no upstream senders
    cfg.receiver = "resid_pre:0:final";
    CHECK_NOTHROW(run_experiment(cfg));
    const nlohmann::json j0 = slurp_json(out + "/patch_grid.json");
    for (const auto& cell : j0.at("cells")) {
        CHECK_FALSE(cell.contains("mean_delta_pi"));
    }
}

TEST_CASE("mover experiment writes the r table and scatter detail") {
    const std::string out = kOut + "/mover";
    std::filesystem::remove_all(out);
    ExperimentConfig cfg = base_config("mover", out);
    cfg.layer = 1;
    cfg.head = 0;
    run_experiment(cfg);
    const nlohmann::json j = slurp_json(out + "/mover.json");
    CHECK(j.at("scores").size() == 6);
    CHECK(j.at("detail").size() == 1);
    CHECK(j.at("detail")[0].at("points").size() == 225);
    CHECK(slurp(out + "/mover_r.csv").find("layer,h0,h1") != std::string::npos);
}

TEST_CASE("ov-probe experiment aggregates per pair") {
    const std::string out = kOut + "/ovprobe";
    std::filesystem::remove_all(out);
    ExperimentConfig cfg = base_config("ov-probe", out);
    cfg.layer = 1;
    cfg.head = 1;
    run_experiment(cfg);
    const nlohmann::json j = slurp_json(out + "/ov_probe.json");
    CHECK(j.at("layer") == 1);
    CHECK(j.at("pairs_total") == 15);
    CHECK(j.at("prompts").size() == 225);
    CHECK(j.at("pairs_recalled").get<int>() >= 0);  // random model recalls nothing in particular
}

TEST_CASE("fit-mlp, project, fidelity and suppress chain through solutions") {
    const std::string out = kOut + "/chain";
    std::filesystem::remove_all(out);

    ExperimentConfig fit = base_config("fit-mlp", out);
    fit.solver = "closed-form";  // fast path for the chain test
    run_experiment(fit);
    const nlohmann::json sols = slurp_json(out + "/mlp_solutions.json");
    CHECK(sols.at("solutions").size() == 3);
    CHECK(slurp(out + "/mlp_coefficients.csv").find("layer,w0,w1,w_r") != std::string::npos);

    // solutions round-trip through the JSON schema
    const std::vector<RegressionSolution> loaded = load_solutions(out + "/mlp_solutions.json");
    REQUIRE(loaded.size() == 3);
    CHECK(loaded[1].layer == 1);
    CHECK(loaded[1].w_head.size() == 2);
    CHECK(loaded[1].intercept.size() == 128);

    ExperimentConfig project = base_config("project", out);
    project.layer = 1;
    project.solutions_path = out + "/mlp_solutions.json";
    project.frequency_path = testsupport::fixtures_dir() + "/tiny_gpt2/frequencies.tsv";
    run_experiment(project);
    const nlohmann::json pj = slurp_json(out + "/projection.json");
    CHECK(pj.at("layer") == 1);
    CHECK(std::abs(pj.at("cos_b_proj_vs_y_minus_x").get<double>()) <= 1.0);
    CHECK(pj.contains("cos_b_vs_expected_unembedding"));
    CHECK(pj.at("raw_cosines").contains("mlp_out"));

    ExperimentConfig fid = base_config("fidelity", out);
    fid.solutions_path = out + "/mlp_solutions.json";
    run_experiment(fid);
    const nlohmann::json fj = slurp_json(out + "/fidelity.json");
    CHECK(fj.at("kl_divergence").get<double>() >= 0.0);
    CHECK(fj.at("meta").at("model_hash").get<std::string>().size() == 16);

    ExperimentConfig sup = base_config("suppress", out);
    sup.mask_layers = {2};
    sup.subtract_intercept_layers = {2};
    sup.solutions_path = out + "/mlp_solutions.json";
    run_experiment(sup);
    const nlohmann::json sj = slurp_json(out + "/suppress.json");
    REQUIRE(sj.at("records").size() == 3);
    for (const auto& rec : sj.at("records")) {
        CHECK(rec.at("prob_before").get<double>() >= 0.0);
        CHECK(rec.at("prob_after").get<double>() >= 0.0);
        CHECK(rec.at("token") == "Y");
    }
}

TEST_CASE("fit-mlp gd solver on one layer matches the closed form") {
    const std::string out = kOut + "/gd";
    std::filesystem::remove_all(out);
    ExperimentConfig fit = base_config("fit-mlp", out);
    fit.layer = 0;
    fit.solver = "gd";
    // this random model's features are nearly collinear across prompts; give
    // the solver enough steps that any residual gap is its own, not the
    // schedule's
    fit.hyper.steps = 200000;
    run_experiment(fit);
    const auto gd = load_solutions(out + "/mlp_solutions.json");
    REQUIRE(gd.size() == 1);

    ExperimentConfig fit2 = base_config("fit-mlp", out + "_cf");
    fit2.layer = 0;
    fit2.solver = "closed-form";
    run_experiment(fit2);
    const auto cf = load_solutions(out + "_cf/mlp_solutions.json");
    REQUIRE(cf.size() == 1);

    for (std::size_t h = 0; h < gd[0].w_head.size(); ++h) {
        CHECK(std::abs(gd[0].w_head[h] - cf[0].w_head[h]) <= 1e-2f);
    }
    CHECK(std::abs(gd[0].w_resid - cf[0].w_resid) <= 1e-2f);
}

TEST_CASE("experiment errors carry context and bad configs are rejected") {
    ExperimentConfig cfg = base_config("dynamics", kOut + "/err");
    cfg.model_path = "/nonexistent/model.safetensors";
    CHECK_THROWS_WITH_AS(run_experiment(cfg), doctest::Contains("cannot open"),
                         std::runtime_error);

    ExperimentConfig unknown = base_config("does-not-exist", kOut + "/err");
    CHECK_THROWS(run_experiment(unknown));
}
