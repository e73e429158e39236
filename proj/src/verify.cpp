#include "circuitprobe/verify.hpp"

#include "circuitprobe/experiments.hpp"
#include "circuitprobe/geometry.hpp"
#include "circuitprobe/instrumentation.hpp"
#include "circuitprobe/lens.hpp"
#include "circuitprobe/model.hpp"
#include "circuitprobe/parallel.hpp"
#include "circuitprobe/regression.hpp"
#include "circuitprobe/tasks.hpp"
#include "circuitprobe/tokenizer.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

namespace circuitprobe {

namespace {

using Status = CriterionResult::Status;

std::string fmt(double v, int precision = 4) { return format_double(v, precision); }

bool file_exists(const std::string& path) {
    return !path.empty() && std::filesystem::exists(path);
}

// ---- self-contained random model for the property suites --------------------

float uniform_float(std::mt19937_64& rng, float lo, float hi) {
    // portable: derive from raw bits, not from distribution objects
    const double u = static_cast<double>(rng() >> 11) / static_cast<double>(1ULL << 53);
    return lo + static_cast<float>(u * (hi - lo));
}

MatrixF random_matrix(std::mt19937_64& rng, int rows, int cols, float scale) {
    MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = uniform_float(rng, -scale, scale);
    }
    return m;
}

VectorF random_vector(std::mt19937_64& rng, int n, float scale) {
    VectorF v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform_float(rng, -scale, scale);
    return v;
}

Model make_random_model(std::uint64_t seed, int n_layers = 3, int n_heads = 2, int d_head = 16,
                        int d_vocab = 96, int max_context = 32) {
    std::mt19937_64 rng(seed);
    Model model;
    ModelConfig& cfg = model.config;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.d_head = d_head;
    cfg.d_model = n_heads * d_head;
    cfg.d_mlp = 4 * cfg.d_model;
    cfg.d_vocab = d_vocab;
    cfg.max_context = max_context;

    Weights& w = model.weights;
    w.token_embedding = random_matrix(rng, cfg.d_vocab, cfg.d_model, 0.25f);
    w.positional_embedding = random_matrix(rng, cfg.max_context, cfg.d_model, 0.05f);
    w.ln_f_gamma = VectorF::Ones(cfg.d_model) + random_vector(rng, cfg.d_model, 0.05f);
    w.ln_f_beta = random_vector(rng, cfg.d_model, 0.05f);
    w.layers.resize(static_cast<std::size_t>(n_layers));
    for (LayerWeights& lw : w.layers) {
        lw.ln1_gamma = VectorF::Ones(cfg.d_model) + random_vector(rng, cfg.d_model, 0.05f);
        lw.ln1_beta = random_vector(rng, cfg.d_model, 0.05f);
        lw.ln2_gamma = VectorF::Ones(cfg.d_model) + random_vector(rng, cfg.d_model, 0.05f);
        lw.ln2_beta = random_vector(rng, cfg.d_model, 0.05f);
        lw.w_qkv = random_matrix(rng, cfg.d_model, 3 * cfg.d_model, 0.15f);
        lw.b_qkv = random_vector(rng, 3 * cfg.d_model, 0.02f);
        lw.w_attn_out = random_matrix(rng, cfg.d_model, cfg.d_model, 0.15f);
        lw.b_attn_out = random_vector(rng, cfg.d_model, 0.02f);
        lw.w_mlp_in = random_matrix(rng, cfg.d_model, cfg.d_mlp, 0.15f);
        lw.b_mlp_in = random_vector(rng, cfg.d_mlp, 0.02f);
        lw.w_mlp_out = random_matrix(rng, cfg.d_mlp, cfg.d_model, 0.15f);
        lw.b_mlp_out = random_vector(rng, cfg.d_model, 0.02f);
    }
    w.unembedding = w.token_embedding;
    model.weight_hash = seed;
    return model;
}

std::vector<int> random_tokens(std::mt19937_64& rng, int n, int vocab) {
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int& t : out) t = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
    return out;
}

// ---- criterion 12: property suites ------------------------------------------

std::vector<LayerSample> planted_samples(std::mt19937_64& rng, int n_heads, int d_model,
                                         int n_samples, const std::vector<float>& w_head,
                                         float w_resid, const VectorF& intercept,
                                         float noise_scale) {
    std::vector<LayerSample> samples;
    samples.reserve(static_cast<std::size_t>(n_samples));
    for (int s = 0; s < n_samples; ++s) {
        LayerSample ls;
        ls.prompt_id = s;
        VectorF m = intercept;
        for (int h = 0; h < n_heads; ++h) {
            ls.head_out.push_back(random_vector(rng, d_model, 1.0f));
            m += w_head[static_cast<std::size_t>(h)] * ls.head_out.back();
        }
        ls.resid_pre = random_vector(rng, d_model, 1.0f);
        m += w_resid * ls.resid_pre;
        if (noise_scale > 0.0f) m += random_vector(rng, d_model, noise_scale);
        ls.mlp_out = m;
        samples.push_back(std::move(ls));
    }
    return samples;
}

CriterionResult check_property_suites() {
    CriterionResult res{"12 property-suites", Status::Pass, ""};
    std::vector<std::string> failures;
    std::vector<std::string> notes;
    std::mt19937_64 rng(20240117);

    const Model model = make_random_model(7);

    // residual additivity (the attention projection bias joins resid_mid once,
    // attributed to no head)
    {
        double worst = 0.0;
        for (int rep = 0; rep < 4; ++rep) {
            const std::vector<int> tokens = random_tokens(rng, 6 + rep, model.config.d_vocab);
            const ActivationCache cache = forward_with_cache(model, tokens);
            for (int l = 0; l < model.config.n_layers; ++l) {
                MatrixF sum = cache.resid_pre[static_cast<std::size_t>(l)];
                for (const MatrixF& a : cache.head_out[static_cast<std::size_t>(l)]) sum += a;
                sum.rowwise() +=
                    model.weights.layers[static_cast<std::size_t>(l)].b_attn_out.transpose();
                worst = std::max<double>(
                    worst, (cache.resid_mid[static_cast<std::size_t>(l)] - sum).cwiseAbs().maxCoeff());
                const MatrixF post = cache.resid_mid[static_cast<std::size_t>(l)] +
                                     cache.mlp_out[static_cast<std::size_t>(l)];
                worst = std::max<double>(
                    worst, (cache.resid_post[static_cast<std::size_t>(l)] - post).cwiseAbs().maxCoeff());
            }
        }
        if (worst > 1e-4) {
            failures.push_back("residual additivity worst " + fmt(worst));
        } else {
            notes.push_back("additivity " + fmt(worst, 2));
        }
    }

    // self-patch no-op, bit-for-bit
    {
        const std::vector<int> tokens = random_tokens(rng, 8, model.config.d_vocab);
        const ActivationCache clean = forward_with_cache(model, tokens);
        std::vector<PatchSpec> patches;
        patches.push_back({NodeId::resid_post(model.config.n_layers - 1, NodePos::final()),
                           clean.resid_post.back().row(clean.seq_len - 1).transpose()});
        patches.push_back({NodeId::head_out(0, 1, NodePos::absolute(2)),
                           clean.head_out[0][1].row(2).transpose()});
        patches.push_back({NodeId::mlp_out(1, NodePos::absolute(-2)),
                           clean.mlp_out[1].row(clean.seq_len - 2).transpose()});
        RunHooks hooks;
        hooks.patches = patches;
        const ActivationCache patched = forward_with_cache(model, tokens, hooks);
        bool identical = (patched.final_logits.array() == clean.final_logits.array()).all();
        for (int l = 0; l < model.config.n_layers && identical; ++l) {
            identical = (patched.resid_post[static_cast<std::size_t>(l)].array() ==
                         clean.resid_post[static_cast<std::size_t>(l)].array())
                            .all();
        }
        if (!identical) {
            failures.push_back("self-patch changed the run");
        } else {
            notes.push_back("self-patch bit-identical");
        }
    }

    // projection idempotence + residual orthogonality
    {
        double worst_idem = 0.0, worst_orth = 0.0;
        for (int rep = 0; rep < 16; ++rep) {
            const VectorF b0 = random_vector(rng, 48, 1.0f);
            const VectorF b1 = random_vector(rng, 48, 1.0f);
            const VectorF v = random_vector(rng, 48, 2.0f);
            const VectorF pv = project_onto_span(v, b0, b1);
            const VectorF ppv = project_onto_span(pv, b0, b1);
            worst_idem = std::max<double>(worst_idem, (ppv - pv).cwiseAbs().maxCoeff());
            const VectorF r = v - pv;
            worst_orth = std::max(worst_orth, std::abs(r.cast<double>().dot(b0.cast<double>())));
            worst_orth = std::max(worst_orth, std::abs(r.cast<double>().dot(b1.cast<double>())));
        }
        if (worst_idem > 1e-5) failures.push_back("projection idempotence " + fmt(worst_idem));
        if (worst_orth > 1e-4) failures.push_back("residual orthogonality " + fmt(worst_orth));
        if (worst_idem <= 1e-5 && worst_orth <= 1e-4) notes.push_back("projection ok");
    }

    // softmax normalization of the decoded distribution
    {
        double worst = 0.0;
        for (int rep = 0; rep < 4; ++rep) {
            const VectorF v = random_vector(rng, model.config.d_model, 2.0f);
            double total = 0.0;
            for (int tok = 0; tok < model.config.d_vocab; ++tok) {
                total += node_probability(model, v, tok);
            }
            worst = std::max(worst, std::abs(total - 1.0));
        }
        if (worst > 1e-5) {
            failures.push_back("probability normalization off by " + fmt(worst));
        } else {
            notes.push_back("softmax normalized");
        }
    }

    // tokenizer round-trip on the byte-fallback vocabulary
    {
        const BpeVocab vocab = BpeVocab::byte_fallback();
        bool ok = true;
        std::vector<std::string> corpus = {
            "",
            "The capital of France is",
            "  leading and trailing  ",
            "don't you'll we've it's I'm he'd they're",
            "mixed 123 numbers, punct!?; and\nnewlines\ttabs",
            "unicode: naïve café — 東京 🗼",
        };
        for (int rep = 0; rep < 64; ++rep) {
            std::string s;
            const int len = static_cast<int>(rng() % 24);
            for (int k = 0; k < len; ++k) {
                s.push_back(static_cast<char>(32 + rng() % 95));
            }
            corpus.push_back(std::move(s));
        }
        for (const std::string& s : corpus) {
            if (vocab.decode(vocab.encode(s)) != s) {
                ok = false;
                failures.push_back("tokenizer round-trip broke on '" + s + "'");
                break;
            }
        }
        if (ok) notes.push_back("round-trip x" + std::to_string(corpus.size()));
    }

    // planted-coefficient recovery with the paper's optimizer settings
    {
        const int H = 4, D = 64, S = 60;
        std::vector<float> w_true = {0.42f, -0.31f, 0.08f, -0.64f};
        const float wr_true = 0.05f;
        const VectorF b_true = random_vector(rng, D, 0.5f);
        const std::vector<LayerSample> samples =
            planted_samples(rng, H, D, S, w_true, wr_true, b_true, 0.0f);
        FitHyper hyper;
        hyper.seed = 11;
        const RegressionSolution gd = fit_layer(samples, hyper, 0);
        double worst = std::abs(gd.w_resid - wr_true);
        for (int h = 0; h < H; ++h) {
            worst = std::max<double>(worst, std::abs(gd.w_head[static_cast<std::size_t>(h)] -
                                                     w_true[static_cast<std::size_t>(h)]));
        }
        worst = std::max<double>(worst, (gd.intercept - b_true).cwiseAbs().maxCoeff());
        if (worst > 1e-3) {
            failures.push_back("planted recovery worst " + fmt(worst));
        }
        if (gd.ape_percent >= 0.1) {
            failures.push_back("planted APE " + fmt(gd.ape_percent) + "%");
        }
        if (worst <= 1e-3 && gd.ape_percent < 0.1) {
            notes.push_back("planted recovery " + fmt(worst, 2));
        }

        // route agreement on noisy data: gradient descent vs normal equations
        const std::vector<LayerSample> noisy =
            planted_samples(rng, H, D, S, w_true, wr_true, b_true, 0.05f);
        const RegressionSolution gd2 = fit_layer(noisy, hyper, 0);
        const RegressionSolution cf = fit_layer_closed_form(noisy, 0);
        double worst2 = std::abs(gd2.w_resid - cf.w_resid);
        for (int h = 0; h < H; ++h) {
            worst2 = std::max<double>(worst2, std::abs(gd2.w_head[static_cast<std::size_t>(h)] -
                                                       cf.w_head[static_cast<std::size_t>(h)]));
        }
        if (worst2 > 1e-2) {
            failures.push_back("gd vs closed-form worst " + fmt(worst2));
        } else {
            notes.push_back("gd=closed-form " + fmt(worst2, 2));
        }
    }

    if (!failures.empty()) {
        res.status = Status::Fail;
        std::string msg;
        for (const std::string& f : failures) msg += (msg.empty() ? "" : "; ") + f;
        res.detail = msg;
    } else {
        std::string msg;
        for (const std::string& n : notes) msg += (msg.empty() ? "" : "; ") + n;
        res.detail = msg;
    }
    return res;
}

// ---- weight-dependent criteria ----------------------------------------------

struct GoldenPrompt {
    std::string prompt;
    std::vector<int> token_ids;
    std::vector<float> logits;
};

std::vector<GoldenPrompt> load_golden(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open golden file: " + path);
    nlohmann::json j;
    in >> j;
    std::vector<GoldenPrompt> out;
    for (const auto& pj : j.at("prompts")) {
        GoldenPrompt g;
        g.prompt = pj.at("prompt").get<std::string>();
        g.token_ids = pj.at("token_ids").get<std::vector<int>>();
        g.logits = pj.at("final_logits_last_position").get<std::vector<float>>();
        out.push_back(std::move(g));
    }
    return out;
}

struct SmallModelContext {
    const Model* model = nullptr;
    const BpeVocab* vocab = nullptr;
    TaskSpec country;
    TaskSpec product;
    std::vector<PromptInstance> country0;
    std::vector<PromptInstance> product0;
    int threads = 1;
    std::uint64_t seed = 0;
};

// expected layer-10 table (Fig 5a): site -> (prob X, prob Y)
struct TableRow {
    LensSite site;
    double x, y;
};

}  // namespace

VerifyOptions VerifyOptions::from_assets_dir(std::string dir) {
    if (dir.empty()) {
        if (const char* env = std::getenv("CIRCUIT_PROBE_CACHE")) dir = env;
    }
    VerifyOptions o;
    if (!dir.empty()) {
        const std::string base = dir + "/gpt2-small/";
        o.model_path = base + "model.safetensors";
        o.vocab_path = base + "vocab.json";
        o.merges_path = base + "merges.txt";
        o.golden_path = base + "golden_logits.json";
        o.frequency_path = base + "frequencies.tsv";
    }
    o.task_dir = "data/tasks";
    return o;
}

std::vector<CriterionResult> run_verification(const VerifyOptions& options) {
    std::vector<CriterionResult> results;
    const int threads = options.threads > 0 ? options.threads : default_thread_count();

    // 12 runs first: it needs no assets at all
    results.push_back(check_property_suites());

    // load whatever assets exist
    std::optional<Model> model;
    std::optional<BpeVocab> vocab;
    std::string load_note;
    if (file_exists(options.model_path)) {
        try {
            model = load_weights(options.model_path);
        } catch (const std::exception& e) {
            load_note = std::string("model load failed: ") + e.what();
        }
    } else {
        load_note = "model archive not found at '" + options.model_path + "'";
    }
    if (file_exists(options.vocab_path) && file_exists(options.merges_path)) {
        try {
            vocab = BpeVocab::load(options.vocab_path, options.merges_path);
        } catch (const std::exception& e) {
            load_note += std::string(load_note.empty() ? "" : "; ") + "tokenizer load failed: " +
                         e.what();
        }
    } else {
        load_note += std::string(load_note.empty() ? "" : "; ") + "tokenizer files not found";
    }

    // 1. forward parity against the reference golden file
    {
        CriterionResult c{"1 forward-parity", Status::Skip, ""};
        if (model && file_exists(options.golden_path)) {
            try {
                const std::vector<GoldenPrompt> golden = load_golden(options.golden_path);
                if (golden.size() < 5) {
                    c.status = Status::Fail;
                    c.detail = "golden file has only " + std::to_string(golden.size()) +
                               " prompts (need >= 5)";
                } else {
                    double worst = 0.0;
                    bool token_match = true;
                    for (const GoldenPrompt& g : golden) {
                        std::vector<int> ids = g.token_ids;
                        if (vocab) {
                            const std::vector<int> enc = vocab->encode(g.prompt);
                            if (enc != g.token_ids) token_match = false;
                        }
                        const ActivationCache cache = forward_with_cache(*model, ids);
                        const Eigen::Map<const VectorF> want(g.logits.data(),
                                                             static_cast<Eigen::Index>(g.logits.size()));
                        const VectorF got = cache.final_logits.row(cache.seq_len - 1).transpose();
                        worst = std::max<double>(worst, (got - want).cwiseAbs().maxCoeff());
                    }
                    const bool ok = worst <= 1e-3 && token_match;
                    c.status = ok ? Status::Pass : Status::Fail;
                    c.detail = "max|logit diff|=" + fmt(worst) + " over " +
                               std::to_string(golden.size()) + " prompts" +
                               (token_match ? "" : "; tokenization mismatch vs golden ids");
                }
            } catch (const std::exception& e) {
                c.status = Status::Fail;
                c.detail = e.what();
            }
        } else {
            c.detail = model ? ("golden file not found at '" + options.golden_path + "'")
                             : load_note;
        }
        results.push_back(c);
    }

    // everything further needs the GPT-2 small checkpoint and the task files
    const bool is_small = model && model->config.n_layers == 12 && model->config.n_heads == 12 &&
                          model->config.d_model == 768 && model->config.d_vocab == 50257;
    SmallModelContext ctx;
    std::string skip_reason;
    bool ready = false;
    if (!model || !vocab) {
        skip_reason = load_note.empty() ? "model/tokenizer assets unavailable" : load_note;
    } else if (!is_small) {
        skip_reason = "loaded model is not GPT-2 small (" +
                      std::to_string(model->config.n_layers) + "L/" +
                      std::to_string(model->config.n_heads) + "H/" +
                      std::to_string(model->config.d_model) + "d); paper-value criteria apply to "
                      "the 12L/12H/768d checkpoint";
    } else {
        try {
            ctx.model = &*model;
            ctx.vocab = &*vocab;
            ctx.threads = threads;
            ctx.seed = options.seed;
            ctx.country = TaskSpec::load(options.task_dir + "/country_capital.json");
            ctx.product = TaskSpec::load(options.task_dir + "/product_developer.json");
            ctx.country0 = build_dataset(ctx.country, *vocab, 0, options.seed);
            ctx.product0 = build_dataset(ctx.product, *vocab, 0, options.seed);
            ready = true;
        } catch (const std::exception& e) {
            skip_reason = std::string("task data unavailable: ") + e.what();
        }
    }

    auto skip = [&](const std::string& id) {
        results.push_back({id, Status::Skip, skip_reason});
    };

    if (!ready) {
        for (const char* id : {"2 dynamics", "3 layer10-table", "4 patch-grid", "5 mover-scores",
                               "6 ov-probe", "7 regression-tables", "8 fidelity", "9 geometry",
                               "10 suppression", "11 expected-unembedding",
                               "A few-shot-qualitative"}) {
            skip(id);
        }
        return results;
    }

    const Model& m = *ctx.model;
    const std::vector<LensSite> all_sites = {LensSite::ResidPre, LensSite::AttnSum,
                                             LensSite::ResidMid, LensSite::MlpOut,
                                             LensSite::ResidPost};
    const DynamicsReport dyn = layer_dynamics(m, ctx.country0, all_sites, ctx.threads);

    // 2. probability dynamics across layers
    {
        CriterionResult c{"2 dynamics", Status::Fail, ""};
        int first_x = -1, first_y_over_x = -1;
        for (int l = 0; l < 12; ++l) {
            const DynamicsCell& cell = dyn.at(l, LensSite::ResidPost);
            if (first_x < 0 && cell.prob_x_mean > 0.05) first_x = l;
            if (first_y_over_x < 0 && cell.prob_y_mean > cell.prob_x_mean) first_y_over_x = l;
        }
        const double x9 = dyn.at(9, LensSite::ResidPost).prob_x_mean;
        const double x10 = dyn.at(10, LensSite::ResidPost).prob_x_mean;
        const double x11 = dyn.at(11, LensSite::ResidPost).prob_x_mean;
        const double y9 = dyn.at(9, LensSite::ResidPost).prob_y_mean;
        const double y10 = dyn.at(10, LensSite::ResidPost).prob_y_mean;
        const double y11 = dyn.at(11, LensSite::ResidPost).prob_y_mean;
        const bool declines = x11 < x10 && y11 < y10 && x11 < x9 && y11 < y9;
        const bool ok = first_x == 9 && first_y_over_x == 10 && declines;
        c.status = ok ? Status::Pass : Status::Fail;
        c.detail = "prob(X)>5% first at layer " + std::to_string(first_x) +
                   " (want 9); Y>X first at layer " + std::to_string(first_y_over_x) +
                   " (want 10); declines=" + (declines ? "yes" : "no");
        results.push_back(c);
    }

    // 3. within-layer-10 table
    {
        CriterionResult c{"3 layer10-table", Status::Pass, ""};
        const TableRow expected[] = {{LensSite::ResidPre, 0.46, 0.20},
                                     {LensSite::ResidMid, 0.54, 0.28},
                                     {LensSite::MlpOut, 0.00, 0.00},
                                     {LensSite::ResidPost, 0.29, 0.32}};
        std::string detail;
        for (const TableRow& row : expected) {
            const DynamicsCell& cell = dyn.at(10, row.site);
            const double dx = std::abs(cell.prob_x_mean - row.x);
            const double dy = std::abs(cell.prob_y_mean - row.y);
            if (dx > 0.08 || dy > 0.08) c.status = Status::Fail;
            detail += to_string(row.site) + "=(" + fmt(cell.prob_x_mean, 3) + "," +
                      fmt(cell.prob_y_mean, 3) + ") ";
        }
        c.detail = detail + "(tolerance +/-0.08)";
        results.push_back(c);
    }

    // 4. patch grid: country-capital and product-developer
    const NodeId grid_receiver = NodeId::resid_post(11, NodePos::final());
    {
        CriterionResult c{"4 patch-grid", Status::Fail, ""};
        const PatchGrid gc = head_patch_grid(m, ctx.country0, grid_receiver, ctx.threads);
        const PatchGrid gp = head_patch_grid(m, ctx.product0, grid_receiver, ctx.threads);

        auto ranked = [](const PatchGrid& g) {
            std::vector<std::pair<double, std::pair<int, int>>> cells;
            for (int l = 0; l < 12; ++l) {
                for (int h = 0; h < 12; ++h) {
                    const GridCell& cell = g.cells[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
                    if (cell.mean_delta_pi) cells.push_back({*cell.mean_delta_pi, {l, h}});
                }
            }
            std::sort(cells.begin(), cells.end());  // most negative first
            return cells;
        };
        const auto rc = ranked(gc);
        const auto rp = ranked(gp);
        auto rank_of = [](const std::vector<std::pair<double, std::pair<int, int>>>& cells, int l,
                          int h) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (cells[i].second == std::make_pair(l, h)) return static_cast<int>(i);
            }
            return -1;
        };
        const bool top2 = rc.size() >= 2 &&
                          ((rc[0].second == std::make_pair(9, 8) &&
                            rc[1].second == std::make_pair(10, 0)) ||
                           (rc[0].second == std::make_pair(10, 0) &&
                            rc[1].second == std::make_pair(9, 8)));
        const auto& neg_a = gc.cells[10][7].mean_delta_pi;
        const auto& neg_b = gc.cells[11][10].mean_delta_pi;
        const bool negatives = neg_a && neg_b && *neg_a > 0.0 && *neg_b > 0.0;
        const int p_l10h0 = rank_of(rp, 10, 0);
        const int p_l9h8 = rank_of(rp, 9, 8);
        const bool product_ok = p_l10h0 >= 0 && p_l10h0 < 3 && (p_l9h8 < 0 || p_l9h8 >= 10);
        c.status = (top2 && negatives && product_ok) ? Status::Pass : Status::Fail;
        std::ostringstream detail;
        detail << "country top2=";
        for (std::size_t i = 0; i < rc.size() && i < 2; ++i) {
            detail << "L" << rc[i].second.first << "H" << rc[i].second.second << " ";
        }
        detail << "(want L9H8,L10H0); L10H7=" << (neg_a ? fmt(*neg_a, 3) : "n/a")
               << "% L11H10=" << (neg_b ? fmt(*neg_b, 3) : "n/a")
               << "% (want >0); product rank L10H0=" << p_l10h0 << " (<3) L9H8=" << p_l9h8
               << " (>=10)";
        c.detail = detail.str();
        results.push_back(c);
    }

    // 5. mover scores
    {
        CriterionResult c{"5 mover-scores", Status::Fail, ""};
        const MoverScore s98 = mover_score(m, ctx.country0, 9, 8, ctx.threads);
        const MoverScore s100 = mover_score(m, ctx.country0, 10, 0, ctx.threads);
        const bool ok = s98.pearson_r && s100.pearson_r && *s98.pearson_r >= 0.62 &&
                        *s98.pearson_r <= 0.92 && *s100.pearson_r >= 0.80 &&
                        *s100.pearson_r <= 1.00;
        c.status = ok ? Status::Pass : Status::Fail;
        c.detail = "r(L9H8)=" + (s98.pearson_r ? fmt(*s98.pearson_r, 3) : "undef") +
                   " (want [0.62,0.92]); r(L10H0)=" +
                   (s100.pearson_r ? fmt(*s100.pearson_r, 3) : "undef") + " (want [0.80,1.00])";
        results.push_back(c);
    }

    // 6. OV knowledge probe of L9H8
    {
        CriterionResult c{"6 ov-probe", Status::Fail, ""};
        const LayerWeights& lw = m.weights.layers[9];
        std::vector<int> hits(ctx.country.pairs.size(), 0);
        std::vector<int> totals(ctx.country.pairs.size(), 0);
        std::vector<std::pair<int, bool>> per_prompt(ctx.country0.size());
        parallel_for(ctx.country0.size(), ctx.threads, [&](std::size_t i) {
            const PromptInstance& prompt = ctx.country0[i];
            const ActivationCache cache = forward_with_cache(m, prompt.tokens);
            const VectorF resid = cache.resid_pre[9].row(prompt.x_position()).transpose();
            const VectorF normed = layer_norm(resid, lw.ln1_gamma, lw.ln1_beta, m.config.ln_epsilon);
            const auto top = decode_topk(m, ov_apply(m, 9, 8, normed), 5);
            bool hit = false;
            for (const auto& [tok, logit] : top) {
                if (tok == prompt.y_token) hit = true;
            }
            per_prompt[i] = {prompt.pair_index, hit};
        });
        for (const auto& [pair_idx, hit] : per_prompt) {
            totals[static_cast<std::size_t>(pair_idx)] += 1;
            hits[static_cast<std::size_t>(pair_idx)] += hit ? 1 : 0;
        }
        int recalled = 0;
        for (std::size_t p = 0; p < hits.size(); ++p) {
            if (2 * hits[p] > totals[p]) ++recalled;
        }
        c.status = recalled >= 10 ? Status::Pass : Status::Fail;
        c.detail = std::to_string(recalled) + "/15 capitals in L9H8 OV top-5 (want >= 10)";
        results.push_back(c);
    }

    // regression fits feed criteria 7-11
    const std::vector<std::vector<LayerSample>> samples =
        collect_samples_all_layers(m, ctx.country0, ctx.threads);
    std::vector<RegressionSolution> solutions(12);
    {
        FitHyper hyper;
        hyper.seed = options.seed;
        parallel_for(12, ctx.threads, [&](std::size_t l) {
            if (options.solver == "closed-form") {
                solutions[l] = fit_layer_closed_form(samples[l], static_cast<int>(l));
            } else {
                solutions[l] = fit_layer(samples[l], hyper, static_cast<int>(l));
            }
        });
    }

    // 7. coefficient tables
    {
        CriterionResult c{"7 regression-tables", Status::Pass, ""};
        std::vector<std::string> problems;
        const RegressionSolution& s9 = solutions[9];
        const double table1[13] = {-0.05, -0.24, 0.04, -0.01, -0.26, -0.13, -0.17,
                                   -0.04, 0.08,  -0.09, -0.08, -0.64, 0.05};
        int positives = 0;
        int argmax_head = 0, argmin_head = 0;
        double worst_dev = 0.0;
        for (int k = 0; k < 13; ++k) {
            const double v = k < 12 ? s9.w_head[static_cast<std::size_t>(k)] : s9.w_resid;
            if (v > 0.0) ++positives;
            worst_dev = std::max(worst_dev, std::abs(v - table1[k]));
            if (k < 12 && s9.w_head[static_cast<std::size_t>(k)] >
                              s9.w_head[static_cast<std::size_t>(argmax_head)]) {
                argmax_head = k;
            }
            if (k < 12 && s9.w_head[static_cast<std::size_t>(k)] <
                              s9.w_head[static_cast<std::size_t>(argmin_head)]) {
                argmin_head = k;
            }
        }
        if (positives != 3) problems.push_back("layer9 positives=" + std::to_string(positives));
        if (argmax_head != 8) problems.push_back("layer9 argmax=w" + std::to_string(argmax_head));
        if (argmin_head != 11) problems.push_back("layer9 argmin=w" + std::to_string(argmin_head));
        if (worst_dev > 0.15) problems.push_back("layer9 worst dev " + fmt(worst_dev, 3));

        const RegressionSolution& s11 = solutions[11];
        int pos11 = 0;
        int argmax11 = 0;
        for (int h = 0; h < 12; ++h) {
            if (s11.w_head[static_cast<std::size_t>(h)] > 0.0f) ++pos11;
            if (s11.w_head[static_cast<std::size_t>(h)] >
                s11.w_head[static_cast<std::size_t>(argmax11)]) {
                argmax11 = h;
            }
        }
        if (pos11 <= 6) problems.push_back("layer11 positives=" + std::to_string(pos11));
        if (argmax11 != 5) problems.push_back("layer11 argmax=w" + std::to_string(argmax11));
        if (std::abs(s11.w_head[5] - 1.55) > 0.3) {
            problems.push_back("layer11 w5=" + fmt(s11.w_head[5], 3));
        }
        double worst_ape = 0.0;
        for (const RegressionSolution& s : solutions) worst_ape = std::max(worst_ape, s.ape_percent);
        if (worst_ape > 3.0) problems.push_back("worst APE " + fmt(worst_ape, 3) + "%");

        if (!problems.empty()) {
            c.status = Status::Fail;
            for (const std::string& p : problems) c.detail += (c.detail.empty() ? "" : "; ") + p;
        } else {
            c.detail = "layer9: 3 positives, max=w8, min=w11, dev<=" + fmt(worst_dev, 3) +
                       "; layer11: " + std::to_string(pos11) + " positives, max=w5=" +
                       fmt(s11.w_head[5], 3) + "; APE<=" + fmt(worst_ape, 3) + "%";
        }
        results.push_back(c);
    }

    // 8. fidelity of the substituted model
    {
        CriterionResult c{"8 fidelity", Status::Fail, ""};
        const FidelityResult f = fidelity_check(m, ctx.country0, solutions, ctx.threads);
        const double gap = std::abs(f.mean_pi_y_original - f.mean_pi_y_substituted);
        const bool ok = f.kl_divergence <= 0.35 && gap <= 0.5;
        c.status = ok ? Status::Pass : Status::Fail;
        c.detail = "KL=" + fmt(f.kl_divergence, 3) + " (<=0.35); pi(Y)=" +
                   fmt(f.mean_pi_y_original, 4) + " vs " + fmt(f.mean_pi_y_substituted, 4) +
                   " gap=" + fmt(gap, 3) + " (<=0.5)";
        results.push_back(c);
    }

    // dataset-mean layer-10 activations for the geometry criteria
    VectorF mean_m10 = VectorF::Zero(m.config.d_model);
    VectorF mean_rmid10 = VectorF::Zero(m.config.d_model);
    VectorF mean_rpost10 = VectorF::Zero(m.config.d_model);
    for (const LayerSample& s : samples[10]) mean_m10 += s.mlp_out;
    mean_m10 /= static_cast<float>(samples[10].size());
    {
        std::vector<std::pair<VectorF, VectorF>> rows(ctx.country0.size());
        parallel_for(ctx.country0.size(), ctx.threads, [&](std::size_t i) {
            const ActivationCache cache = forward_with_cache(m, ctx.country0[i].tokens);
            const int t = ctx.country0[i].final_position();
            rows[i] = {cache.resid_mid[10].row(t).transpose(),
                       cache.resid_post[10].row(t).transpose()};
        });
        for (const auto& [a, b] : rows) {
            mean_rmid10 += a;
            mean_rpost10 += b;
        }
        mean_rmid10 /= static_cast<float>(rows.size());
        mean_rpost10 /= static_cast<float>(rows.size());
    }

    // 9. unembedding-plane geometry at layer 10
    {
        CriterionResult c{"9 geometry", Status::Pass, ""};
        const double cos_b = mean_pair_alignment(m, solutions[10].intercept, ctx.country, *ctx.vocab);
        const double cos_m = mean_pair_alignment(m, mean_m10, ctx.country, *ctx.vocab);
        std::vector<std::string> problems;
        if (cos_b < 0.85) problems.push_back("cos(b10_proj)=" + fmt(cos_b, 3));
        if (cos_m < 0.25 || cos_m > 0.47) problems.push_back("cos(m10_proj)=" + fmt(cos_m, 3));

        const double fig5b[3][2] = {{0.048, 0.034}, {0.213, 0.197}, {0.160, 0.155}};
        const VectorF* vecs[3] = {&mean_m10, &mean_rmid10, &mean_rpost10};
        const char* names[3] = {"m10", "rmid10", "rpost10"};
        std::string raw;
        for (int k = 0; k < 3; ++k) {
            const double cx = mean_pair_cosine(m, *vecs[k], ctx.country, *ctx.vocab, false);
            const double cy = mean_pair_cosine(m, *vecs[k], ctx.country, *ctx.vocab, true);
            raw += std::string(names[k]) + "=(" + fmt(cx, 3) + "," + fmt(cy, 3) + ") ";
            if (std::abs(cx - fig5b[k][0]) > 0.05 || std::abs(cy - fig5b[k][1]) > 0.05) {
                problems.push_back(std::string(names[k]) + " raw cosine off: (" + fmt(cx, 3) +
                                   "," + fmt(cy, 3) + ")");
            }
        }
        if (!problems.empty()) {
            c.status = Status::Fail;
            for (const std::string& p : problems) c.detail += (c.detail.empty() ? "" : "; ") + p;
        } else {
            c.detail = "cos(b10_proj)=" + fmt(cos_b, 3) + " (>=0.85); cos(m10_proj)=" +
                       fmt(cos_m, 3) + " (in [0.25,0.47]); raw " + raw;
        }
        results.push_back(c);
    }

    // 10. anti-overconfidence suppression
    {
        CriterionResult c{"10 suppression", Status::Fail, ""};
        const SuppressionOutcome out = run_suppression_study(
            m, ctx.country0, {11}, {{11, solutions[11].intercept}}, ctx.threads);
        const bool ok = std::abs(out.prob_mid_after - 0.3168) <= 0.08 &&
                        std::abs(out.prob_post_after - 0.2593) <= 0.06;
        c.status = ok ? Status::Pass : Status::Fail;
        c.detail = "prob(Y) r11_mid " + fmt(out.prob_mid_before, 4) + "->" +
                   fmt(out.prob_mid_after, 4) + " (want ~0.3168+/-0.08); final " +
                   fmt(out.prob_post_before, 4) + "->" + fmt(out.prob_post_after, 4) +
                   " (want ~0.2593+/-0.06; masked-only r11_post " + fmt(out.prob_post_masked, 4) +
                   ")";
        results.push_back(c);
    }

    // 11. conditional: frequency-weighted average unembedding
    {
        CriterionResult c{"11 expected-unembedding", Status::Skip, ""};
        if (file_exists(options.frequency_path)) {
            try {
                const FrequencyTable freq =
                    FrequencyTable::load(options.frequency_path, m.config.d_vocab);
                const VectorF expected = expected_unembedding(freq, m);
                const double cos_b = cosine(solutions[11].intercept, expected);
                c.status = cos_b >= 0.85 ? Status::Pass : Status::Fail;
                c.detail = "cos(b11, E[W_U])=" + fmt(cos_b, 3) + " (want >= 0.85)";
            } catch (const std::exception& e) {
                c.status = Status::Fail;
                c.detail = e.what();
            }
        } else {
            c.detail = "SKIPPED-conditional: no corpus frequency file at '" +
                       options.frequency_path + "'";
        }
        results.push_back(c);
    }

    // A. few-shot qualitative checks
    {
        CriterionResult c{"A few-shot-qualitative", Status::Pass, ""};
        std::vector<std::string> problems;
        const double decline0 = dyn.at(10, LensSite::ResidPost).prob_y_mean -
                                dyn.at(11, LensSite::ResidPost).prob_y_mean;
        std::string detail;
        for (int shots = 1; shots <= 2; ++shots) {
            const std::vector<PromptInstance> ds =
                build_dataset(ctx.country, *ctx.vocab, shots, options.seed);
            const DynamicsReport d = layer_dynamics(m, ds, {LensSite::ResidPost}, ctx.threads);
            int first_x = -1;
            for (int l = 0; l < 12; ++l) {
                if (d.at(l, LensSite::ResidPost).prob_x_mean > 0.05) {
                    first_x = l;
                    break;
                }
            }
            const double decline = d.at(10, LensSite::ResidPost).prob_y_mean -
                                   d.at(11, LensSite::ResidPost).prob_y_mean;
            if (first_x < 0 || first_x > 8) {
                problems.push_back(std::to_string(shots) + "-shot emergence at layer " +
                                   std::to_string(first_x));
            }
            if (!(decline < decline0)) {
                problems.push_back(std::to_string(shots) + "-shot decline " + fmt(decline, 3) +
                                   " not below zero-shot " + fmt(decline0, 3));
            }

            const PatchGrid g = head_patch_grid(m, ds, grid_receiver, ctx.threads);
            std::vector<std::pair<double, std::pair<int, int>>> cells;
            for (int l = 0; l < 12; ++l) {
                for (int h = 0; h < 12; ++h) {
                    const GridCell& cell = g.cells[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
                    if (cell.mean_delta_pi) cells.push_back({*cell.mean_delta_pi, {l, h}});
                }
            }
            std::sort(cells.begin(), cells.end());
            bool has98 = false, has100 = false;
            for (std::size_t i = 0; i < cells.size() && i < 4; ++i) {
                if (cells[i].second == std::make_pair(9, 8)) has98 = true;
                if (cells[i].second == std::make_pair(10, 0)) has100 = true;
            }
            if (!has98 || !has100) {
                problems.push_back(std::to_string(shots) +
                                   "-shot grid top-4 misses L9H8/L10H0");
            }
            detail += std::to_string(shots) + "-shot: emergence L" + std::to_string(first_x) +
                      ", decline " + fmt(decline, 3) + "; ";
        }
        if (!problems.empty()) {
            c.status = Status::Fail;
            for (const std::string& p : problems) c.detail += (c.detail.empty() ? "" : "; ") + p;
        } else {
            c.detail = detail + "zero-shot decline " + fmt(decline0, 3);
        }
        results.push_back(c);
    }

    return results;
}

int report_verification(const std::vector<CriterionResult>& results) {
    int failures = 0;
    for (const CriterionResult& r : results) {
        const char* tag = r.status == Status::Pass ? "PASS"
                          : r.status == Status::Fail ? "FAIL"
                                                     : "SKIP";
        if (r.status == Status::Fail) ++failures;
        std::cout << "[" << tag << "] " << r.id << ": " << r.detail << "\n";
    }
    std::cout << (failures == 0 ? "verification: no failures" : "verification: FAILURES present")
              << "\n";
    return failures == 0 ? 0 : 1;
}

}  // namespace circuitprobe
