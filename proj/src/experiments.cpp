#include "circuitprobe/experiments.hpp"

#include "circuitprobe/geometry.hpp"
#include "circuitprobe/parallel.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

namespace circuitprobe {

namespace {

struct Assets {
    Model model;
    BpeVocab vocab;
    TaskSpec task;
    std::vector<PromptInstance> dataset;
    ReportMeta meta;
    int threads = 1;
};

Assets load_assets(const ExperimentConfig& cfg) {
    Assets a{load_weights(cfg.model_path),
             BpeVocab::load(cfg.vocab_path, cfg.merges_path),
             TaskSpec::load(cfg.task_path),
             {},
             {},
             cfg.threads > 0 ? cfg.threads : default_thread_count()};
    a.dataset = build_dataset(a.task, a.vocab, cfg.shots, cfg.seed);
    a.meta = ReportMeta{cfg.experiment, cfg.model_path, a.model.weight_hash,
                        a.task.name,    cfg.shots,      cfg.seed,
                        a.threads};
    return a;
}

int default_deep_layer(const ModelConfig& cfg, int requested, int fallback_from_back) {
    if (requested >= 0) {
        if (requested >= cfg.n_layers) {
            throw std::runtime_error("layer " + std::to_string(requested) + " out of range");
        }
        return requested;
    }
    return cfg.n_layers - fallback_from_back;
}

std::vector<std::uint8_t> vector_bytes(const VectorF& v) {
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(v.size()) * sizeof(float));
    std::memcpy(bytes.data(), v.data(), bytes.size());
    return bytes;
}

VectorF bytes_vector(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() % sizeof(float) != 0) {
        throw std::runtime_error("intercept byte payload is not a float array");
    }
    VectorF v(static_cast<Eigen::Index>(bytes.size() / sizeof(float)));
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

// --- experiment bodies -------------------------------------------------------

const std::vector<LensSite> kAllSites = {LensSite::ResidPre, LensSite::AttnSum,
                                         LensSite::ResidMid, LensSite::MlpOut,
                                         LensSite::ResidPost};

void run_dynamics(const ExperimentConfig& cfg, const Assets& a) {
    const DynamicsReport report = layer_dynamics(a.model, a.dataset, kAllSites, a.threads);

    std::ostringstream csv;
    csv << meta_csv_comment(a.meta);
    csv << "layer,site,prob_x_mean,prob_x_var,prob_y_mean,prob_y_var\n";
    for (int l = 0; l < a.model.config.n_layers; ++l) {
        for (std::size_t s = 0; s < report.sites.size(); ++s) {
            const DynamicsCell& c = report.cells[static_cast<std::size_t>(l)][s];
            csv << l << "," << to_string(report.sites[s]) << "," << format_double(c.prob_x_mean)
                << "," << format_double(c.prob_x_var) << "," << format_double(c.prob_y_mean)
                << "," << format_double(c.prob_y_var) << "\n";
        }
    }
    write_file(cfg.out_dir + "/dynamics.csv", csv.str());

    nlohmann::json j;
    j["meta"] = meta_json(a.meta);
    j["n_prompts"] = report.n_prompts;
    for (int l = 0; l < a.model.config.n_layers; ++l) {
        for (std::size_t s = 0; s < report.sites.size(); ++s) {
            const DynamicsCell& c = report.cells[static_cast<std::size_t>(l)][s];
            j["cells"].push_back({{"layer", l},
                                  {"site", to_string(report.sites[s])},
                                  {"prob_x_mean", c.prob_x_mean},
                                  {"prob_x_var", c.prob_x_var},
                                  {"prob_y_mean", c.prob_y_mean},
                                  {"prob_y_var", c.prob_y_var}});
        }
    }
    write_file(cfg.out_dir + "/dynamics.json", dump_json(j));

    SvgSeries sx{"prob(X) at resid_post", "#1f77b4", {}, {}};
    SvgSeries sy{"prob(Y) at resid_post", "#d62728", {}, {}};
    for (int l = 0; l < a.model.config.n_layers; ++l) {
        const DynamicsCell& c = report.at(l, LensSite::ResidPost);
        sx.values.push_back(c.prob_x_mean);
        sx.band.push_back(std::sqrt(c.prob_x_var));
        sy.values.push_back(c.prob_y_mean);
        sy.band.push_back(std::sqrt(c.prob_y_var));
    }
    write_file(cfg.out_dir + "/dynamics.svg",
               svg_line_chart("Decoded probabilities by layer (" + a.task.name + ", " +
                                  std::to_string(cfg.shots) + "-shot)",
                              "layer", "probability", {sx, sy}));
}

void run_patch_grid(const ExperimentConfig& cfg, const Assets& a) {
    const NodeId receiver = parse_node(cfg.receiver, a.model.config, cfg.expert_positions);
    const PatchGrid grid = head_patch_grid(a.model, a.dataset, receiver, a.threads);
    const int L = a.model.config.n_layers;
    const int H = a.model.config.n_heads;

    std::ostringstream csv;
    csv << meta_csv_comment(a.meta);
    csv << "# receiver=" << to_string(receiver)
        << " aggregation=mean_per_prompt_delta_pi values=percent\n";
    csv << "layer";
    for (int h = 0; h < H; ++h) csv << ",h" << h;
    csv << "\n";
    for (int l = 0; l < L; ++l) {
        csv << l;
        for (int h = 0; h < H; ++h) {
            const GridCell& c = grid.cells[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
            csv << ",";
            if (c.mean_delta_pi) csv << format_double(*c.mean_delta_pi);
        }
        csv << "\n";
    }
    write_file(cfg.out_dir + "/patch_grid.csv", csv.str());

    nlohmann::json j;
    j["meta"] = meta_json(a.meta);
    j["receiver"] = to_string(receiver);
    j["n_prompts"] = grid.n_prompts;
    j["aggregation"] = "mean of per-prompt delta_pi (percent)";
    j["alt_aggregation"] = "delta of dataset-mean pi, reported per cell as delta_of_mean_pi";
    for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h) {
            const GridCell& c = grid.cells[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
            nlohmann::json cell{{"layer", l}, {"head", h}, {"guarded", c.guarded}};
            if (c.mean_delta_pi) cell["mean_delta_pi"] = *c.mean_delta_pi;
            if (c.delta_of_mean_pi) cell["delta_of_mean_pi"] = *c.delta_of_mean_pi;
            j["cells"].push_back(std::move(cell));
        }
    }
    write_file(cfg.out_dir + "/patch_grid.json", dump_json(j));

    std::vector<std::vector<std::optional<double>>> heat(
        static_cast<std::size_t>(L), std::vector<std::optional<double>>(static_cast<std::size_t>(H)));
    for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h) {
            heat[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] =
                grid.cells[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].mean_delta_pi;
        }
    }
    write_file(cfg.out_dir + "/patch_grid.svg",
               svg_heatmap("Mean delta-pi(Y), head output to " + to_string(receiver) + " (%)",
                           heat, "L", "H"));
}

void run_mover(const ExperimentConfig& cfg, const Assets& a) {
    const int L = a.model.config.n_layers;
    const int H = a.model.config.n_heads;

    // one forward per prompt; every head's (attention-to-X, <a, W_U[X]>) point
    std::vector<MatrixF> attn(a.dataset.size());   // [L x H]
    std::vector<MatrixF> inner(a.dataset.size());  // [L x H]
    parallel_for(a.dataset.size(), a.threads, [&](std::size_t i) {
        const PromptInstance& prompt = a.dataset[i];
        const ActivationCache cache = forward_with_cache(a.model, prompt.tokens);
        const int t = prompt.final_position();
        const VectorF wu_x = a.model.weights.unembedding.row(prompt.x_token).transpose();
        attn[i].resize(L, H);
        inner[i].resize(L, H);
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < H; ++h) {
                attn[i](l, h) = cache.attn_pattern[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)](
                    t, prompt.x_position());
                inner[i](l, h) = static_cast<float>(
                    cache.head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]
                        .row(t)
                        .transpose()
                        .cast<double>()
                        .dot(wu_x.cast<double>()));
            }
        }
    });

    auto score_of = [&](int l, int h) {
        MoverScore s;
        s.layer = l;
        s.head = h;
        s.points.reserve(a.dataset.size());
        for (std::size_t i = 0; i < a.dataset.size(); ++i) {
            s.points.emplace_back(attn[i](l, h), inner[i](l, h));
        }
        s.pearson_r = pearson(s.points);
        return s;
    };

    std::ostringstream csv;
    csv << meta_csv_comment(a.meta);
    csv << "layer";
    for (int h = 0; h < H; ++h) csv << ",h" << h;
    csv << "\n";
    std::vector<MoverScore> all;
    for (int l = 0; l < L; ++l) {
        csv << l;
        for (int h = 0; h < H; ++h) {
            all.push_back(score_of(l, h));
            csv << ",";
            if (all.back().pearson_r) csv << format_double(*all.back().pearson_r);
        }
        csv << "\n";
    }
    write_file(cfg.out_dir + "/mover_r.csv", csv.str());

    // scatter detail: the requested head, or the two best-correlated ones
    std::vector<MoverScore> detail;
    if (cfg.layer >= 0 && cfg.head >= 0) {
        detail.push_back(score_of(cfg.layer, cfg.head));
    } else {
        std::vector<const MoverScore*> ranked;
        for (const MoverScore& s : all) {
            if (s.pearson_r) ranked.push_back(&s);
        }
        std::sort(ranked.begin(), ranked.end(), [](const MoverScore* x, const MoverScore* y) {
            return *x->pearson_r > *y->pearson_r;
        });
        for (std::size_t i = 0; i < ranked.size() && i < 2; ++i) detail.push_back(*ranked[i]);
    }

    nlohmann::json j;
    j["meta"] = meta_json(a.meta);
    for (const MoverScore& s : all) {
        nlohmann::json row{{"layer", s.layer}, {"head", s.head}};
        if (s.pearson_r) {
            row["pearson_r"] = *s.pearson_r;
        } else {
            row["pearson_r"] = nullptr;  // degenerate series
        }
        j["scores"].push_back(std::move(row));
    }
    std::vector<SvgScatterSeries> scatter_series;
    const char* colors[] = {"#1f77b4", "#d62728"};
    std::ostringstream pcsv;
    pcsv << meta_csv_comment(a.meta);
    pcsv << "layer,head,prompt,attention_to_x,inner_product\n";
    for (std::size_t d = 0; d < detail.size(); ++d) {
        const MoverScore& s = detail[d];
        nlohmann::json points = nlohmann::json::array();
        for (std::size_t i = 0; i < s.points.size(); ++i) {
            points.push_back({s.points[i].first, s.points[i].second});
            pcsv << s.layer << "," << s.head << "," << i << ","
                 << format_double(s.points[i].first) << "," << format_double(s.points[i].second)
                 << "\n";
        }
        j["detail"].push_back({{"layer", s.layer},
                               {"head", s.head},
                               {"pearson_r", s.pearson_r ? nlohmann::json(*s.pearson_r)
                                                         : nlohmann::json(nullptr)},
                               {"points", std::move(points)}});
        std::ostringstream label;
        label << "L" << s.layer << "H" << s.head;
        if (s.pearson_r) label << " (r=" << format_double(*s.pearson_r, 3) << ")";
        scatter_series.push_back({label.str(), colors[d % 2], s.points});
    }
    write_file(cfg.out_dir + "/mover.json", dump_json(j));
    write_file(cfg.out_dir + "/mover_points.csv", pcsv.str());
    write_file(cfg.out_dir + "/mover.svg",
               svg_scatter("Attention to X vs. projection along W_U[X]", "attention to X",
                           "<a, W_U[X]>", scatter_series));
}

void run_ov_probe(const ExperimentConfig& cfg, const Assets& a) {
    const int layer = default_deep_layer(a.model.config, cfg.layer, 3);  // gpt2-small: L9
    const int head = cfg.head >= 0 ? cfg.head : 8;
    if (head >= a.model.config.n_heads) {
        throw std::runtime_error("head " + std::to_string(head) + " out of range");
    }
    const LayerWeights& lw = a.model.weights.layers[static_cast<std::size_t>(layer)];

    // decoded OV output at the X position, one row per prompt
    std::vector<std::vector<std::pair<int, float>>> tops(a.dataset.size());
    parallel_for(a.dataset.size(), a.threads, [&](std::size_t i) {
        const PromptInstance& prompt = a.dataset[i];
        const ActivationCache cache = forward_with_cache(a.model, prompt.tokens);
        const VectorF resid =
            cache.resid_pre[static_cast<std::size_t>(layer)].row(prompt.x_position()).transpose();
        const VectorF normed =
            layer_norm(resid, lw.ln1_gamma, lw.ln1_beta, a.model.config.ln_epsilon);
        tops[i] = decode_topk(a.model, ov_apply(a.model, layer, head, normed), cfg.topk);
    });

    // aggregate per pair: a pair counts as recalled when the majority of its
    // templates put Y's first subword in the top-k
    std::map<int, std::pair<int, int>> pair_hits;  // pair -> (hits, total)
    nlohmann::json per_prompt = nlohmann::json::array();
    for (std::size_t i = 0; i < a.dataset.size(); ++i) {
        const PromptInstance& prompt = a.dataset[i];
        bool hit = false;
        nlohmann::json decoded = nlohmann::json::array();
        for (const auto& [tok, logit] : tops[i]) {
            decoded.push_back({{"token", tok}, {"text", a.vocab.token_text(tok)}, {"logit", logit}});
            if (tok == prompt.y_token) hit = true;
        }
        pair_hits[prompt.pair_index].first += hit ? 1 : 0;
        pair_hits[prompt.pair_index].second += 1;
        per_prompt.push_back({{"pair", prompt.pair_index},
                              {"template", prompt.template_index},
                              {"x", a.task.pairs[static_cast<std::size_t>(prompt.pair_index)].first},
                              {"hit", hit},
                              {"topk", std::move(decoded)}});
    }

    int recalled = 0;
    nlohmann::json pairs = nlohmann::json::array();
    std::ostringstream csv;
    csv << meta_csv_comment(a.meta);
    csv << "pair,x,y,hits,templates,recalled\n";
    for (const auto& [pair_idx, counts] : pair_hits) {
        const bool ok = 2 * counts.first > counts.second;
        recalled += ok ? 1 : 0;
        const auto& [x, y] = a.task.pairs[static_cast<std::size_t>(pair_idx)];
        pairs.push_back({{"pair", pair_idx},
                         {"x", x},
                         {"y", y},
                         {"hits", counts.first},
                         {"templates", counts.second},
                         {"recalled", ok}});
        csv << pair_idx << "," << x << "," << y << "," << counts.first << "," << counts.second
            << "," << (ok ? 1 : 0) << "\n";
    }

    nlohmann::json j;
    j["meta"] = meta_json(a.meta);
    j["layer"] = layer;
    j["head"] = head;
    j["k"] = cfg.topk;
    j["pairs_recalled"] = recalled;
    j["pairs_total"] = static_cast<int>(pair_hits.size());
    j["pairs"] = std::move(pairs);
    j["prompts"] = std::move(per_prompt);
    write_file(cfg.out_dir + "/ov_probe.json", dump_json(j));
    write_file(cfg.out_dir + "/ov_probe.csv", csv.str());
}

void run_fit_mlp(const ExperimentConfig& cfg, const Assets& a) {
    std::vector<int> layers;
    if (cfg.layer >= 0) {
        layers.push_back(cfg.layer);
    } else {
        layers.resize(static_cast<std::size_t>(a.model.config.n_layers));
        std::iota(layers.begin(), layers.end(), 0);
    }
    const std::vector<std::vector<LayerSample>> samples =
        collect_samples_all_layers(a.model, a.dataset, a.threads);

    std::vector<RegressionSolution> solutions(layers.size());
    parallel_for(layers.size(), a.threads, [&](std::size_t i) {
        const int layer = layers[i];
        if (cfg.solver == "closed-form") {
            solutions[i] = fit_layer_closed_form(samples[static_cast<std::size_t>(layer)], layer);
        } else {
            solutions[i] = fit_layer(samples[static_cast<std::size_t>(layer)], cfg.hyper, layer);
        }
    });

    write_file(cfg.out_dir + "/mlp_solutions.json",
               dump_json(solutions_to_json(solutions, a.meta)));

    std::ostringstream csv;
    csv << meta_csv_comment(a.meta);
    csv << "layer";
    for (int h = 0; h < a.model.config.n_heads; ++h) csv << ",w" << h;
    csv << ",w_r,val_mse_f0,val_mse_f1,val_mse_f2,val_mse_f3,ape_percent\n";
    for (const RegressionSolution& s : solutions) {
        csv << s.layer;
        for (float w : s.w_head) csv << "," << format_double(w, 4);
        csv << "," << format_double(s.w_resid, 4);
        for (int f = 0; f < 4; ++f) {
            csv << ",";
            if (f < static_cast<int>(s.fold_val_mse.size())) {
                csv << format_double(s.fold_val_mse[static_cast<std::size_t>(f)], 4);
            }
        }
        csv << "," << format_double(s.ape_percent, 4) << "\n";
    }
    write_file(cfg.out_dir + "/mlp_coefficients.csv", csv.str());
}

std::vector<RegressionSolution> obtain_solutions(const ExperimentConfig& cfg, const Assets& a,
                                                 const std::vector<int>& layers,
                                                 std::string& source) {
    if (!cfg.solutions_path.empty()) {
        source = cfg.solutions_path;
        std::vector<RegressionSolution> all = load_solutions(cfg.solutions_path);
        std::vector<RegressionSolution> picked;
        for (int layer : layers) {
            auto it = std::find_if(all.begin(), all.end(),
                                   [&](const RegressionSolution& s) { return s.layer == layer; });
            if (it == all.end()) {
                throw std::runtime_error("solutions file " + cfg.solutions_path +
                                         " has no layer " + std::to_string(layer));
            }
            picked.push_back(*it);
        }
        return picked;
    }
    // no file given: fit on the fly with the closed-form solver
    source = "closed_form_on_the_fly";
    const std::vector<std::vector<LayerSample>> samples =
        collect_samples_all_layers(a.model, a.dataset, a.threads);
    std::vector<RegressionSolution> picked(layers.size());
    parallel_for(layers.size(), a.threads, [&](std::size_t i) {
        picked[i] =
            fit_layer_closed_form(samples[static_cast<std::size_t>(layers[i])], layers[i]);
    });
    return picked;
}

void run_project(const ExperimentConfig& cfg, const Assets& a) {
    const int layer = default_deep_layer(a.model.config, cfg.layer, 2);  // gpt2-small: L10
    std::string source;
    const RegressionSolution solution = obtain_solutions(cfg, a, {layer}, source)[0];

    // dataset-mean activations at the final position
    std::vector<VectorF> mean_vecs(3, VectorF::Zero(a.model.config.d_model));
    {
        std::vector<std::array<VectorF, 3>> rows(a.dataset.size());
        parallel_for(a.dataset.size(), a.threads, [&](std::size_t i) {
            const ActivationCache cache = forward_with_cache(a.model, a.dataset[i].tokens);
            const int t = a.dataset[i].final_position();
            rows[i][0] = cache.mlp_out[static_cast<std::size_t>(layer)].row(t).transpose();
            rows[i][1] = cache.resid_mid[static_cast<std::size_t>(layer)].row(t).transpose();
            rows[i][2] = cache.resid_post[static_cast<std::size_t>(layer)].row(t).transpose();
        });
        for (const auto& r : rows) {
            for (int k = 0; k < 3; ++k) mean_vecs[static_cast<std::size_t>(k)] += r[static_cast<std::size_t>(k)];
        }
        for (auto& v : mean_vecs) v /= static_cast<float>(a.dataset.size());
    }

    nlohmann::json j;
    j["meta"] = meta_json(a.meta);
    j["layer"] = layer;
    j["solutions_source"] = source;
    j["cos_b_proj_vs_y_minus_x"] = mean_pair_alignment(a.model, solution.intercept, a.task, a.vocab);
    j["cos_m_proj_vs_y_minus_x"] = mean_pair_alignment(a.model, mean_vecs[0], a.task, a.vocab);
    const char* names[3] = {"mlp_out", "resid_mid", "resid_post"};
    for (int k = 0; k < 3; ++k) {
        j["raw_cosines"][names[k]] = {
            {"x", mean_pair_cosine(a.model, mean_vecs[static_cast<std::size_t>(k)], a.task, a.vocab, false)},
            {"y", mean_pair_cosine(a.model, mean_vecs[static_cast<std::size_t>(k)], a.task, a.vocab, true)}};
    }

    if (!cfg.frequency_path.empty()) {
        const FrequencyTable freq = FrequencyTable::load(cfg.frequency_path, a.model.config.d_vocab);
        const VectorF expected = expected_unembedding(freq, a.model);
        j["cos_b_vs_expected_unembedding"] = cosine(solution.intercept, expected);
    }
    write_file(cfg.out_dir + "/projection.json", dump_json(j));
}

void run_fidelity(const ExperimentConfig& cfg, const Assets& a) {
    std::vector<int> layers(static_cast<std::size_t>(a.model.config.n_layers));
    std::iota(layers.begin(), layers.end(), 0);
    std::string source;
    const std::vector<RegressionSolution> solutions = obtain_solutions(cfg, a, layers, source);
    const FidelityResult res = fidelity_check(a.model, a.dataset, solutions, a.threads);

    nlohmann::json j;
    j["meta"] = meta_json(a.meta);
    j["solutions_source"] = source;
    j["kl_divergence"] = res.kl_divergence;
    j["mean_logit_y_original"] = res.mean_pi_y_original;
    j["mean_logit_y_substituted"] = res.mean_pi_y_substituted;
    write_file(cfg.out_dir + "/fidelity.json", dump_json(j));
}

void run_suppress(const ExperimentConfig& cfg, const Assets& a) {
    const int last = a.model.config.n_layers - 1;
    std::vector<int> mask_layers = cfg.mask_layers;
    if (mask_layers.empty()) mask_layers.push_back(last);

    std::vector<std::pair<int, VectorF>> subtractions;
    std::string source = "none";
    if (!cfg.subtract_intercept_layers.empty()) {
        const std::vector<RegressionSolution> sols =
            obtain_solutions(cfg, a, cfg.subtract_intercept_layers, source);
        for (const RegressionSolution& s : sols) {
            subtractions.emplace_back(s.layer, s.intercept);
        }
    }
    const SuppressionOutcome out =
        run_suppression_study(a.model, a.dataset, mask_layers, subtractions, a.threads);

    nlohmann::json j;
    j["meta"] = meta_json(a.meta);
    j["masked_layers"] = mask_layers;
    j["subtract_intercept_layers"] = cfg.subtract_intercept_layers;
    j["solutions_source"] = source;
    const std::string mid = "resid_mid:" + std::to_string(last) + ":final";
    const std::string post = "resid_post:" + std::to_string(last) + ":final";
    j["records"] = nlohmann::json::array(
        {{{"node", mid}, {"token", "Y"}, {"intervention", "mask"},
          {"prob_before", out.prob_mid_before}, {"prob_after", out.prob_mid_after}},
         {{"node", post}, {"token", "Y"}, {"intervention", "mask"},
          {"prob_before", out.prob_post_before}, {"prob_after", out.prob_post_masked}},
         {{"node", post}, {"token", "Y"}, {"intervention", "mask+subtract"},
          {"prob_before", out.prob_post_before}, {"prob_after", out.prob_post_after}}});
    write_file(cfg.out_dir + "/suppress.json", dump_json(j));
}

}  // namespace

NodeId parse_node(const std::string& text, const ModelConfig& config, bool expert_positions) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ':')) parts.push_back(item);
    if (parts.size() < 2) {
        throw std::runtime_error("cannot parse node '" + text + "' (want site:layer[:pos])");
    }

    NodeId node;
    std::size_t pos_index = 2;
    if (parts[0] == "resid_pre") {
        node.site = NodeSite::ResidPre;
    } else if (parts[0] == "resid_mid") {
        node.site = NodeSite::ResidMid;
    } else if (parts[0] == "resid_post") {
        node.site = NodeSite::ResidPost;
    } else if (parts[0] == "mlp_out") {
        node.site = NodeSite::MlpOut;
    } else if (parts[0] == "head_out") {
        node.site = NodeSite::HeadOut;
        if (parts.size() < 3) {
            throw std::runtime_error("head node '" + text + "' needs site:layer:head[:pos]");
        }
        node.head = std::stoi(parts[2]);
        pos_index = 3;
    } else {
        throw std::runtime_error("unknown node site '" + parts[0] + "'");
    }

    node.layer = std::stoi(parts[1]);
    if (node.layer < 0) node.layer += config.n_layers;
    if (node.layer < 0 || node.layer >= config.n_layers) {
        throw std::runtime_error("node layer out of range in '" + text + "'");
    }
    if (node.site == NodeSite::HeadOut && (node.head < 0 || node.head >= config.n_heads)) {
        throw std::runtime_error("node head out of range in '" + text + "'");
    }

    node.position = NodePos::final();
    if (parts.size() > pos_index) {
        const std::string& p = parts[pos_index];
        if (p == "final" || p == "-1") {
            node.position = NodePos::final();
        } else if (p == "x-end") {
            node.position = NodePos::x_span_end();
        } else {
            if (!expert_positions) {
                throw std::runtime_error("absolute position '" + p +
                                         "' requires expert mode; use final/x-end/-1");
            }
            node.position = NodePos::absolute(std::stoi(p));
        }
    }
    return node;
}

PatchGrid head_patch_grid(const Model& model, const std::vector<PromptInstance>& dataset,
                          const NodeId& receiver, int threads) {
    if (dataset.empty()) {
        throw std::runtime_error("patch grid needs a nonempty dataset");
    }
    if (receiver.site != NodeSite::ResidPre && receiver.site != NodeSite::ResidMid &&
        receiver.site != NodeSite::ResidPost) {
        throw std::runtime_error("patch grid receiver must be a residual node");
    }
    const int L = model.config.n_layers;
    const int H = model.config.n_heads;
    const int d = model.config.d_model;

    // one clean run per prompt, summarized
    struct Summary {
        MatrixF head_final;      // [(L*H) x d], head outputs at the final position
        VectorF receiver_clean;  // receiver value
        int receiver_t = 0;
        int final_t = 0;
    };
    std::vector<Summary> sums(dataset.size());
    parallel_for(dataset.size(), threads, [&](std::size_t i) {
        const ActivationCache cache = forward_with_cache(model, dataset[i].tokens);
        Summary s;
        s.final_t = dataset[i].final_position();
        s.receiver_t = resolve_position(receiver.position, dataset[i]);
        s.head_final.resize(L * H, d);
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < H; ++h) {
                s.head_final.row(l * H + h) =
                    cache.head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].row(s.final_t);
            }
        }
        s.receiver_clean = cache.node_value(resolve_node(receiver, dataset[i]));
        sums[i] = std::move(s);
    });

    // the intervention set is the whole dataset: per-head means at t = -1
    MatrixF mean_head = MatrixF::Zero(L * H, d);
    for (const Summary& s : sums) mean_head += s.head_final;
    mean_head /= static_cast<float>(dataset.size());

    const LogitProbe probe(model);
    const int receiver_key = receiver.layer * 5 +
                             (receiver.site == NodeSite::ResidPre
                                  ? 0
                                  : (receiver.site == NodeSite::ResidMid ? 2 : 4));

    PatchGrid grid;
    grid.receiver = receiver;
    grid.n_prompts = static_cast<int>(dataset.size());
    grid.cells.assign(static_cast<std::size_t>(L), std::vector<GridCell>(static_cast<std::size_t>(H)));

    std::vector<std::vector<GridCell>>& cells = grid.cells;
    parallel_for(static_cast<std::size_t>(L * H), threads, [&](std::size_t lh) {
        const int l = static_cast<int>(lh) / H;
        const int h = static_cast<int>(lh) % H;
        GridCell& cell = cells[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
        const int sender_key = l * 5 + 1;
        if (sender_key >= receiver_key) {
            return;  // not upstream: no cell
        }
        double sum_delta = 0.0;
        int n_ok = 0;
        double sum_pi_clean = 0.0;
        double sum_pi_patched = 0.0;
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            const Summary& s = sums[i];
            // direct effect: the head's contribution at the final position is
            // replaced by the dataset mean while every other path is frozen
            VectorF patched = s.receiver_clean;
            if (s.receiver_t == s.final_t) {
                patched += (mean_head.row(static_cast<Eigen::Index>(lh)) -
                            s.head_final.row(static_cast<Eigen::Index>(lh)))
                               .transpose();
            }
            const double pi_clean = probe.centered_logit(s.receiver_clean, dataset[i].y_token);
            const double pi_patched = probe.centered_logit(patched, dataset[i].y_token);
            sum_pi_clean += pi_clean;
            sum_pi_patched += pi_patched;
            if (const auto dp = delta_logit(pi_clean, pi_patched)) {
                sum_delta += *dp;
                ++n_ok;
            } else {
                ++cell.guarded;
            }
        }
        if (n_ok > 0) {
            cell.mean_delta_pi = sum_delta / n_ok;
        }
        const double n = static_cast<double>(dataset.size());
        if (const auto alt = delta_logit(sum_pi_clean / n, sum_pi_patched / n)) {
            cell.delta_of_mean_pi = *alt;
        }
    });
    return grid;
}

std::vector<std::vector<LayerSample>> collect_samples_all_layers(
    const Model& model, const std::vector<PromptInstance>& dataset, int threads) {
    if (dataset.empty()) {
        throw std::runtime_error("collect_samples needs a nonempty dataset");
    }
    const int L = model.config.n_layers;
    std::vector<std::vector<LayerSample>> out(
        static_cast<std::size_t>(L), std::vector<LayerSample>(dataset.size()));
    parallel_for(dataset.size(), threads, [&](std::size_t i) {
        const ActivationCache cache = forward_with_cache(model, dataset[i].tokens);
        const int t = dataset[i].final_position();
        for (int l = 0; l < L; ++l) {
            LayerSample s;
            s.prompt_id = static_cast<int>(i);
            s.head_out.reserve(static_cast<std::size_t>(model.config.n_heads));
            for (int h = 0; h < model.config.n_heads; ++h) {
                s.head_out.push_back(
                    cache.head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].row(t).transpose());
            }
            s.resid_pre = cache.resid_pre[static_cast<std::size_t>(l)].row(t).transpose();
            s.mlp_out = cache.mlp_out[static_cast<std::size_t>(l)].row(t).transpose();
            out[static_cast<std::size_t>(l)][i] = std::move(s);
        }
    });
    return out;
}

double mean_pair_alignment(const Model& model, const VectorF& v, const TaskSpec& task,
                           const BpeVocab& vocab) {
    double total = 0.0;
    for (const auto& [x, y] : task.pairs) {
        const int xt = vocab.encode(" " + x).front();
        const int yt = vocab.encode(" " + y).front();
        total += alignment(model, v, xt, yt);
    }
    return total / static_cast<double>(task.pairs.size());
}

double mean_pair_cosine(const Model& model, const VectorF& v, const TaskSpec& task,
                        const BpeVocab& vocab, bool against_y) {
    double total = 0.0;
    for (const auto& [x, y] : task.pairs) {
        const int tok = vocab.encode(" " + (against_y ? y : x)).front();
        total += cosine(v, model.weights.unembedding.row(tok).transpose());
    }
    return total / static_cast<double>(task.pairs.size());
}

SuppressionOutcome run_suppression_study(const Model& model,
                                         const std::vector<PromptInstance>& dataset,
                                         const std::vector<int>& mask_layers,
                                         const std::vector<std::pair<int, VectorF>>& subtractions,
                                         int threads) {
    if (dataset.empty()) {
        throw std::runtime_error("suppression study needs a nonempty dataset");
    }
    const int last = model.config.n_layers - 1;

    SuppressionSpec masked;
    for (int l : mask_layers) {
        for (int h = 0; h < model.config.n_heads; ++h) masked.masked_heads.emplace_back(l, h);
    }
    SuppressionSpec masked_sub = masked;
    masked_sub.subtract_vectors = subtractions;

    struct Row {
        double mid_before, mid_after, post_before, post_masked, post_after;
    };
    std::vector<Row> rows(dataset.size());
    parallel_for(dataset.size(), threads, [&](std::size_t i) {
        const PromptInstance& prompt = dataset[i];
        const int t = prompt.final_position();
        const ActivationCache clean = forward_with_cache(model, prompt.tokens);
        const ActivationCache masked_run = run_suppressed(model, prompt.tokens, masked);
        Row r;
        r.mid_before = node_probability(
            model, clean.resid_mid[static_cast<std::size_t>(last)].row(t).transpose(), prompt.y_token);
        r.mid_after = node_probability(
            model, masked_run.resid_mid[static_cast<std::size_t>(last)].row(t).transpose(), prompt.y_token);
        r.post_before = node_probability(
            model, clean.resid_post[static_cast<std::size_t>(last)].row(t).transpose(), prompt.y_token);
        r.post_masked = node_probability(
            model, masked_run.resid_post[static_cast<std::size_t>(last)].row(t).transpose(), prompt.y_token);
        if (subtractions.empty()) {
            r.post_after = r.post_masked;
        } else {
            const ActivationCache sub_run = run_suppressed(model, prompt.tokens, masked_sub);
            r.post_after = node_probability(
                model, sub_run.resid_post[static_cast<std::size_t>(last)].row(t).transpose(), prompt.y_token);
        }
        rows[i] = r;
    });

    SuppressionOutcome out;
    for (const Row& r : rows) {
        out.prob_mid_before += r.mid_before;
        out.prob_mid_after += r.mid_after;
        out.prob_post_before += r.post_before;
        out.prob_post_masked += r.post_masked;
        out.prob_post_after += r.post_after;
    }
    const double n = static_cast<double>(dataset.size());
    out.prob_mid_before /= n;
    out.prob_mid_after /= n;
    out.prob_post_before /= n;
    out.prob_post_masked /= n;
    out.prob_post_after /= n;
    return out;
}

nlohmann::json solutions_to_json(const std::vector<RegressionSolution>& solutions,
                                 const ReportMeta& meta) {
    nlohmann::json j;
    j["meta"] = meta_json(meta);
    j["solutions"] = nlohmann::json::array();
    for (const RegressionSolution& s : solutions) {
        j["solutions"].push_back({{"layer", s.layer},
                                  {"w_head", s.w_head},
                                  {"w_resid", s.w_resid},
                                  {"b", base64_encode(vector_bytes(s.intercept))},
                                  {"fold_train_mse", s.fold_train_mse},
                                  {"fold_val_mse", s.fold_val_mse},
                                  {"final_train_mse", s.final_train_mse},
                                  {"ape_percent", s.ape_percent},
                                  {"solver", s.solver}});
    }
    return j;
}

std::vector<RegressionSolution> solutions_from_json(const nlohmann::json& j) {
    std::vector<RegressionSolution> out;
    for (const auto& sj : j.at("solutions")) {
        RegressionSolution s;
        s.layer = sj.at("layer").get<int>();
        s.w_head = sj.at("w_head").get<std::vector<float>>();
        s.w_resid = sj.at("w_resid").get<float>();
        s.intercept = bytes_vector(base64_decode(sj.at("b").get<std::string>()));
        if (sj.contains("fold_train_mse")) {
            s.fold_train_mse = sj.at("fold_train_mse").get<std::vector<double>>();
        }
        if (sj.contains("fold_val_mse")) {
            s.fold_val_mse = sj.at("fold_val_mse").get<std::vector<double>>();
        }
        if (sj.contains("final_train_mse")) s.final_train_mse = sj.at("final_train_mse").get<double>();
        if (sj.contains("ape_percent")) s.ape_percent = sj.at("ape_percent").get<double>();
        if (sj.contains("solver")) s.solver = sj.at("solver").get<std::string>();
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<RegressionSolution> load_solutions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open solutions file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed solutions file " + path + ": " + e.what());
    }
    return solutions_from_json(j);
}

void run_experiment(const ExperimentConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t forwards_before = forward_pass_count();

    ensure_directory(cfg.out_dir);
    Assets a = load_assets(cfg);
    for (const std::string& extra : a.model.extra_tensors) {
        std::cerr << "note: ignoring archive tensor '" << extra << "'\n";
    }

    try {
        if (cfg.experiment == "dynamics") {
            run_dynamics(cfg, a);
        } else if (cfg.experiment == "patch-grid") {
            run_patch_grid(cfg, a);
        } else if (cfg.experiment == "mover") {
            run_mover(cfg, a);
        } else if (cfg.experiment == "ov-probe") {
            run_ov_probe(cfg, a);
        } else if (cfg.experiment == "fit-mlp") {
            run_fit_mlp(cfg, a);
        } else if (cfg.experiment == "project") {
            run_project(cfg, a);
        } else if (cfg.experiment == "fidelity") {
            run_fidelity(cfg, a);
        } else if (cfg.experiment == "suppress") {
            run_suppress(cfg, a);
        } else {
            throw std::runtime_error("unknown experiment '" + cfg.experiment + "'");
        }
    } catch (const std::exception& e) {
        throw std::runtime_error("experiment " + cfg.experiment + ": " + e.what());
    }

    const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - start)
                             .count();
    std::cerr << cfg.experiment << ": prompts=" << a.dataset.size()
              << " forward_passes=" << (forward_pass_count() - forwards_before)
              << " wall=" << static_cast<double>(elapsed) / 1000.0 << "s\n";
}

}  // namespace circuitprobe
