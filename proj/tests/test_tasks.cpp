#include "circuitprobe/tasks.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace circuitprobe;

TEST_CASE("country-capital task file reproduces the documented set") {
    const TaskSpec& task = testsupport::country_task();
    CHECK(task.templates.size() == 15);
    CHECK(task.pairs.size() == 15);
    CHECK(task.pairs[4].first == "France");
    CHECK(task.pairs[4].second == "Paris");
    CHECK(task.templates[9] == "As we all know, the capital of {X} is");
}

TEST_CASE("zero-shot dataset has |templates| x |pairs| instances") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const auto country = build_dataset(testsupport::country_task(), vocab, 0, 1);
    CHECK(country.size() == 225);

    const TaskSpec product = TaskSpec::load(testsupport::tasks_dir() + "/product_developer.json");
    const auto product0 = build_dataset(product, vocab, 0, 1);
    CHECK(product0.size() == 15 * 14);
}

TEST_CASE("instances round-trip and locate X in the query clause") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    for (int shots : {0, 1, 2}) {
        const auto dataset = build_dataset(testsupport::country_task(), vocab, shots, 9);
        for (const PromptInstance& p : dataset) {
            REQUIRE(vocab.decode(p.tokens) == p.text);
            REQUIRE(p.shots == shots);
            const auto& [x, y] = testsupport::country_task().pairs[static_cast<std::size_t>(p.pair_index)];
            REQUIRE(p.x_span.surface.find(x) != std::string::npos);
            // the span's surface is the decode of its token range
            std::vector<int> covered(p.tokens.begin() + p.x_span.start,
                                     p.tokens.begin() + p.x_span.end);
            REQUIRE(vocab.decode(covered) == p.x_span.surface);
            // y_token is the first subword of the leading-space answer
            REQUIRE(p.y_token == vocab.encode(" " + y).front());
            REQUIRE(p.x_token == vocab.encode(" " + x).front());
            REQUIRE(p.x_position() < p.final_position());
        }
    }
}

TEST_CASE("demonstrations are distinct from the query pair and each other") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const auto dataset = build_dataset(testsupport::country_task(), vocab, 2, 123);
    for (const PromptInstance& p : dataset) {
        CHECK(p.demonstration_pairs.size() == 2);
        std::set<int> seen(p.demonstration_pairs.begin(), p.demonstration_pairs.end());
        CHECK(seen.size() == 2);
        CHECK_FALSE(seen.count(p.pair_index));
        // the demonstration text precedes the query clause
        const auto& [dx, dy] =
            testsupport::country_task().pairs[static_cast<std::size_t>(p.demonstration_pairs[0])];
        CHECK(p.text.find(dx) != std::string::npos);
        CHECK(p.text.find(dy) != std::string::npos);
    }
}

TEST_CASE("dataset construction is deterministic per seed") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const auto a = build_dataset(testsupport::country_task(), vocab, 1, 777);
    const auto b = build_dataset(testsupport::country_task(), vocab, 1, 777);
    const auto c = build_dataset(testsupport::country_task(), vocab, 1, 778);
    REQUIRE(a.size() == b.size());
    bool any_difference = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].text == b[i].text);
        CHECK(a[i].demonstration_pairs == b[i].demonstration_pairs);
        if (a[i].text != c[i].text) any_difference = true;
    }
    CHECK(any_difference);  // a different seed draws different demonstrations
}

TEST_CASE("few-shot prompts follow the demonstration-prefix form") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const auto dataset = build_dataset(testsupport::country_task(), vocab, 1, 5);
    const PromptInstance& p = dataset[0];
    const auto& [dx, dy] =
        testsupport::country_task().pairs[static_cast<std::size_t>(p.demonstration_pairs[0])];
    const std::string expected_prefix = "The capital of " + dx + " is " + dy + ", ";
    CHECK(p.text.rfind(expected_prefix, 0) == 0);
}

TEST_CASE("invalid task specs are rejected") {
    TaskSpec bad;
    bad.name = "broken";
    bad.templates = {"no slot here"};
    bad.pairs = {{"A", "B"}};
    bad.shot_prefix_template = "{X} {Y}";
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("{X}"), std::runtime_error);

    TaskSpec dup;
    dup.name = "dup";
    dup.templates = {"the {X} is"};
    dup.pairs = {{"A", "B"}, {"A", "C"}};
    dup.shot_prefix_template = "{X} {Y}";
    CHECK_THROWS_WITH_AS(dup.validate(), doctest::Contains("collision"), std::runtime_error);

    TaskSpec two_slots;
    two_slots.name = "two";
    two_slots.templates = {"{X} and {X}"};
    two_slots.pairs = {{"A", "B"}};
    two_slots.shot_prefix_template = "{X} {Y}";
    CHECK_THROWS(two_slots.validate());
}

TEST_CASE("shots beyond the pair budget are rejected") {
    TaskSpec tiny;
    tiny.name = "tiny";
    tiny.templates = {"the {X} is"};
    tiny.pairs = {{"A", "B"}, {"C", "D"}};
    tiny.shot_prefix_template = "the {X} is {Y}, ";
    CHECK_THROWS(build_dataset(tiny, testsupport::tiny_vocab(), 2, 0));
    CHECK_NOTHROW(build_dataset(tiny, testsupport::tiny_vocab(), 1, 0));
}

TEST_CASE("intervention set is the whole dataset, original included") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const auto dataset = build_dataset(testsupport::country_task(), vocab, 0, 0);
    const auto set = intervention_set(dataset, dataset[17]);
    CHECK(set.size() == dataset.size());
    CHECK(set[17].text == dataset[17].text);
    CHECK_THROWS(intervention_set({}, dataset[0]));
}

TEST_CASE("reverse-template task flows through the same pipeline") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const TaskSpec reverse =
        TaskSpec::load(testsupport::tasks_dir() + "/country_capital_reverse.json");
    CHECK(reverse.templates.size() == 15);
    const auto dataset = build_dataset(reverse, vocab, 0, 2);
    CHECK(dataset.size() == 225);
    // X precedes the task word in these templates
    const PromptInstance& p = dataset[0];
    CHECK(p.text.find("'s capital is") != std::string::npos);
    CHECK(vocab.decode(p.tokens) == p.text);
}
