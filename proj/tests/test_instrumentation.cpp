#include "circuitprobe/instrumentation.hpp"

#include "circuitprobe/tasks.hpp"
#include "test_support.hpp"

#include <doctest.h>

using namespace circuitprobe;

namespace {

std::vector<PromptInstance> small_dataset(int shots = 0) {
    static const TaskSpec& task = testsupport::country_task();
    return build_dataset(task, testsupport::tiny_vocab(), shots, 3);
}

}  // namespace

TEST_CASE("centered logit: centering removes the mean, matches unembed") {
    const Model& model = testsupport::tiny_model();
    const LogitProbe probe(model);

    const VectorF v = VectorF::Random(model.config.d_model);
    const double pi = probe.centered_logit(v, 3);

    // centering: mean over tokens of pi must vanish
    double mean_pi = 0.0;
    for (int tok = 0; tok < model.config.d_vocab; ++tok) {
        mean_pi += probe.centered_logit(v, tok);
    }
    mean_pi /= model.config.d_vocab;
    CHECK(std::abs(mean_pi) <= 1e-4);

    // agreement with the direct definition via unembed
    const VectorF logits = unembed(model, v);
    const double direct = logits[3] - logits.cast<double>().mean();
    CHECK(pi == doctest::Approx(direct).epsilon(1e-5));

    CHECK_THROWS(probe.centered_logit(v, model.config.d_vocab));
}

TEST_CASE("delta_logit arithmetic and guard") {
    CHECK(*delta_logit(10.0, 10.0) == doctest::Approx(0.0));
    CHECK(*delta_logit(10.0, 9.0) == doctest::Approx(-10.0));
    CHECK(*delta_logit(10.0, 12.5) == doctest::Approx(25.0));
    CHECK_FALSE(delta_logit(5e-4, 1.0).has_value());  // guarded, not zeroed
    CHECK_FALSE(delta_logit(-5e-4, 1.0).has_value());
    CHECK(delta_logit(-2.0, -1.0).has_value());
}

TEST_CASE("mean_node_activation: single prompt is exact, two prompts average") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const NodeId node = NodeId::head_out(1, 0, NodePos::x_span_end());

    const VectorF single = mean_node_activation(model, node, {dataset[0]});
    const ActivationCache cache = forward_with_cache(model, dataset[0].tokens);
    const VectorF direct = cache.node_value(resolve_node(node, dataset[0]));
    CHECK((single - direct).cwiseAbs().maxCoeff() == 0.0f);

    const VectorF pairmean = mean_node_activation(model, node, {dataset[0], dataset[1]});
    const ActivationCache cache1 = forward_with_cache(model, dataset[1].tokens);
    const VectorF direct1 = cache1.node_value(resolve_node(node, dataset[1]));
    CHECK((pairmean - 0.5f * (direct + direct1)).cwiseAbs().maxCoeff() <= 1e-6f);

    CHECK_THROWS(mean_node_activation(model, node, {}));
}

TEST_CASE("activation_patch: empty list equals the clean run") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const ActivationCache clean = forward_with_cache(model, dataset[0].tokens);
    const ActivationCache patched = activation_patch(model, dataset[0], {});
    CHECK((clean.final_logits.array() == patched.final_logits.array()).all());
}

TEST_CASE("activation_patch: final-node replacement defines the final logits") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const VectorF v = VectorF::Random(model.config.d_model);
    const NodeId node = NodeId::resid_post(model.config.n_layers - 1, NodePos::final());
    const ActivationCache patched = activation_patch(model, dataset[0], {{node, v}});
    const VectorF expected = unembed(model, v);
    const VectorF got = patched.final_logits.row(patched.seq_len - 1).transpose();
    CHECK((got - expected).cwiseAbs().maxCoeff() <= 1e-4f);
}

TEST_CASE("self-patch is a bit-exact no-op at every site") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const PromptInstance& prompt = dataset[7];
    const ActivationCache clean = forward_with_cache(model, prompt.tokens);
    const int t = prompt.final_position();
    const int tx = prompt.x_position();

    std::vector<PatchSpec> patches;
    patches.push_back(
        {NodeId::resid_pre(1, NodePos::x_span_end()), clean.resid_pre[1].row(tx).transpose()});
    patches.push_back(
        {NodeId::head_out(0, 1, NodePos::final()), clean.head_out[0][1].row(t).transpose()});
    patches.push_back(
        {NodeId::resid_mid(2, NodePos::final()), clean.resid_mid[2].row(t).transpose()});
    patches.push_back({NodeId::mlp_out(1, NodePos::final()), clean.mlp_out[1].row(t).transpose()});
    patches.push_back(
        {NodeId::resid_post(2, NodePos::final()), clean.resid_post[2].row(t).transpose()});
    const ActivationCache patched = activation_patch(model, prompt, patches);
    CHECK((patched.final_logits.array() == clean.final_logits.array()).all());
}

TEST_CASE("patch errors: out-of-range nodes and wrong dimensions") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const VectorF v = VectorF::Zero(model.config.d_model);
    CHECK_THROWS_WITH_AS(
        activation_patch(model, dataset[0], {{NodeId::resid_post(99, NodePos::final()), v}}),
        doctest::Contains("out of range"), std::runtime_error);
    CHECK_THROWS_WITH_AS(
        activation_patch(model, dataset[0], {{NodeId::head_out(0, 99, NodePos::final()), v}}),
        doctest::Contains("out of range"), std::runtime_error);
    const VectorF bad = VectorF::Zero(3);
    CHECK_THROWS(
        activation_patch(model, dataset[0], {{NodeId::resid_post(0, NodePos::final()), bad}}));
    CHECK_THROWS(
        activation_patch(model, dataset[0], {{NodeId::resid_post(0, NodePos::absolute(10000)), v}}));
}

TEST_CASE("patches apply before downstream consumption") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const PromptInstance& prompt = dataset[3];
    const ActivationCache clean = forward_with_cache(model, prompt.tokens);
    const VectorF v = 2.0f * VectorF::Random(model.config.d_model);

    const ActivationCache patched =
        activation_patch(model, prompt, {{NodeId::resid_mid(0, NodePos::final()), v}});
    // the cache reflects the patched value...
    CHECK((patched.resid_mid[0].row(patched.seq_len - 1).transpose() - v).cwiseAbs().maxCoeff() ==
          0.0f);
    // ...and the MLP consumed it
    CHECK((patched.mlp_out[0].row(patched.seq_len - 1) - clean.mlp_out[0].row(clean.seq_len - 1))
              .cwiseAbs()
              .maxCoeff() > 0.0f);
    // earlier positions are untouched
    CHECK((patched.resid_mid[0].topRows(patched.seq_len - 1).array() ==
           clean.resid_mid[0].topRows(clean.seq_len - 1).array())
              .all());
}

TEST_CASE("strictly_precedes orders the causal graph") {
    CHECK(strictly_precedes(NodeId::head_out(1, 1), NodeId::resid_post(2)));
    CHECK(strictly_precedes(NodeId::resid_pre(1), NodeId::head_out(1, 0)));
    CHECK(strictly_precedes(NodeId::head_out(1, 0), NodeId::resid_mid(1)));
    CHECK(strictly_precedes(NodeId::resid_mid(1), NodeId::mlp_out(1)));
    CHECK(strictly_precedes(NodeId::mlp_out(1), NodeId::resid_post(1)));
    CHECK_FALSE(strictly_precedes(NodeId::resid_post(1), NodeId::resid_post(1)));
    CHECK_FALSE(strictly_precedes(NodeId::resid_post(1), NodeId::mlp_out(1)));
    CHECK_FALSE(strictly_precedes(NodeId::head_out(1, 0), NodeId::head_out(1, 1)));
}

TEST_CASE("path_patch_effect: replacing the sender with its clean value is zero effect") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const PromptInstance& prompt = dataset[0];
    const NodeId sender = NodeId::head_out(1, 1, NodePos::final());
    const NodeId receiver = NodeId::resid_post(2, NodePos::final());
    // intervention set = just the original: the mean equals the clean value
    const auto dp = path_patch_effect(model, sender, receiver, prompt, {prompt}, prompt.y_token);
    REQUIRE(dp.has_value());
    CHECK(std::abs(*dp) <= 1e-4);
}

TEST_CASE("path_patch_effect matches a hand-built direct effect for resid receivers") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const PromptInstance& prompt = dataset[0];
    const std::vector<PromptInstance> interventions(dataset.begin(), dataset.begin() + 8);

    const NodeId sender = NodeId::head_out(0, 0, NodePos::final());
    const NodeId receiver = NodeId::resid_post(2, NodePos::final());

    const ActivationCache clean = forward_with_cache(model, prompt.tokens);
    const VectorF mean = mean_node_activation(model, sender, interventions);
    const VectorF by_hand = clean.node_value(resolve_node(receiver, prompt)) + mean -
                            clean.node_value(resolve_node(sender, prompt));
    const LogitProbe probe(model);
    const double pi_clean =
        probe.centered_logit(clean.node_value(resolve_node(receiver, prompt)), prompt.y_token);
    const double pi_patched = probe.centered_logit(by_hand, prompt.y_token);
    const auto expected = delta_logit(pi_clean, pi_patched);

    const auto got =
        path_patch_effect(model, sender, receiver, prompt, interventions, prompt.y_token);
    REQUIRE(got.has_value() == expected.has_value());
    if (got) CHECK(*got == doctest::Approx(*expected).epsilon(1e-6));
}

TEST_CASE("path patching isolates the direct path into an MLP receiver") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const PromptInstance& prompt = dataset[2];
    const ActivationCache clean = forward_with_cache(model, prompt.tokens);

    const NodeId sender = NodeId::head_out(0, 0, NodePos::final());
    const NodeId receiver = NodeId::mlp_out(1, NodePos::final());
    const VectorF replacement = VectorF::Random(model.config.d_model);

    const VectorF hybrid = direct_effect_value(model, clean, resolve_node(sender, prompt),
                                               resolve_node(receiver, prompt), replacement);
    // the receiver input seen through the frozen cache: resid_mid[1] + delta
    VectorF mid = clean.resid_mid[1].row(prompt.final_position()).transpose();
    mid += replacement - clean.head_out[0][0].row(prompt.final_position()).transpose();

    // recomputing MLP1 on that input reproduces the hybrid value
    std::vector<PatchSpec> patches{{NodeId::resid_mid(1, NodePos::final()), mid}};
    RunHooks hooks;
    hooks.patches = patches;
    const ActivationCache rerun = forward_with_cache(model, prompt.tokens, hooks);
    CHECK((rerun.mlp_out[1].row(prompt.final_position()).transpose() - hybrid)
              .cwiseAbs()
              .maxCoeff() <= 1e-5f);

    // sender not upstream of receiver is rejected
    CHECK_THROWS_WITH_AS(direct_effect_value(model, clean, resolve_node(receiver, prompt),
                                             resolve_node(sender, prompt), replacement),
                         doctest::Contains("upstream"), std::runtime_error);
}

TEST_CASE("swapping original and intervention roles negates the dominant effect") {
    // two-prompt toy pair: patching a from {a,b} and b from {a,b} shift the
    // receiver by exactly opposite deltas, so the dominant head's effect on
    // the probe token flips sign
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const PromptInstance& a = dataset[0];
    const PromptInstance& b = dataset[1];
    const NodeId receiver = NodeId::resid_post(2, NodePos::final());
    const LogitProbe probe(model);

    const ActivationCache ca = forward_with_cache(model, a.tokens);
    const ActivationCache cb = forward_with_cache(model, b.tokens);
    const int probe_token = a.y_token;
    const VectorF ra = ca.node_value(resolve_node(receiver, a));
    const VectorF rb = cb.node_value(resolve_node(receiver, b));

    double best = 0.0;
    double best_partner = 0.0;
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < model.config.n_heads; ++h) {
            const NodeId sender = NodeId::head_out(l, h, NodePos::final());
            const VectorF va = ca.node_value(resolve_node(sender, a));
            const VectorF vb = cb.node_value(resolve_node(sender, b));
            const VectorF delta = 0.5f * (vb - va);  // mean of {a,b} minus own value
            const double shift_a = probe.centered_logit(ra + delta, probe_token) -
                                   probe.centered_logit(ra, probe_token);
            const double shift_b = probe.centered_logit(rb - delta, probe_token) -
                                   probe.centered_logit(rb, probe_token);
            if (std::abs(shift_a) > std::abs(best)) {
                best = shift_a;
                best_partner = shift_b;
            }
        }
    }
    REQUIRE(std::abs(best) > 0.0);
    CHECK(best * best_partner < 0.0);
}

TEST_CASE("run_suppressed: empty spec is the clean run") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const ActivationCache clean = forward_with_cache(model, dataset[0].tokens);
    const ActivationCache same = run_suppressed(model, dataset[0].tokens, SuppressionSpec{});
    CHECK((clean.final_logits.array() == same.final_logits.array()).all());
}

TEST_CASE("run_suppressed: masked heads get exact one-hot diagonal rows") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    SuppressionSpec spec;
    spec.masked_heads = {{2, 0}, {2, 1}};
    const ActivationCache cache = run_suppressed(model, dataset[0].tokens, spec);
    for (int h = 0; h < 2; ++h) {
        const MatrixF& p = cache.attn_pattern[2][static_cast<std::size_t>(h)];
        for (int t = 0; t < cache.seq_len; ++t) {
            for (int s = 0; s < cache.seq_len; ++s) {
                CHECK(p(t, s) == (s == t ? 1.0f : 0.0f));
            }
        }
    }
    // unmasked layers keep their patterns
    const ActivationCache clean = forward_with_cache(model, dataset[0].tokens);
    CHECK((cache.attn_pattern[0][0].array() == clean.attn_pattern[0][0].array()).all());
}

TEST_CASE("run_suppressed: subtraction removes the vector at the final position") {
    const Model& model = testsupport::tiny_model();
    const auto dataset = small_dataset();
    const VectorF v = VectorF::Random(model.config.d_model);
    SuppressionSpec spec;
    spec.subtract_vectors = {{1, v}};
    const ActivationCache clean = forward_with_cache(model, dataset[0].tokens);
    const ActivationCache sub = run_suppressed(model, dataset[0].tokens, spec);
    const int t = static_cast<int>(dataset[0].tokens.size()) - 1;
    const VectorF want = clean.resid_post[1].row(t).transpose() - v;
    CHECK((sub.resid_post[1].row(t).transpose() - want).cwiseAbs().maxCoeff() == 0.0f);
    // earlier positions untouched
    CHECK((sub.resid_post[1].topRows(t).array() == clean.resid_post[1].topRows(t).array()).all());
    // the next layer consumed the modified residual
    CHECK((sub.resid_post[2].row(t) - clean.resid_post[2].row(t)).cwiseAbs().maxCoeff() > 0.0f);

    CHECK_THROWS(run_suppressed(model, dataset[0].tokens, SuppressionSpec{{{99, 0}}, {}}));
}
