#include "circuitprobe/tokenizer.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <fstream>
#include <random>

using circuitprobe::BpeVocab;
using circuitprobe::TokenSpan;

TEST_CASE("golden tokenization matches the reference byte-for-byte") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    std::ifstream in(testsupport::tiny_bpe_dir() + "/golden_tokenization.json");
    REQUIRE(in.good());
    nlohmann::json golden;
    in >> golden;
    REQUIRE(golden.at("cases").size() > 10);
    for (const auto& c : golden.at("cases")) {
        const std::string text = c.at("text").get<std::string>();
        const std::vector<int> want = c.at("ids").get<std::vector<int>>();
        CAPTURE(text);
        CHECK(vocab.encode(text) == want);
        CHECK(vocab.decode(want) == text);
    }
}

TEST_CASE("empty string encodes to nothing") {
    CHECK(testsupport::tiny_vocab().encode("").empty());
    CHECK(testsupport::tiny_vocab().decode(std::vector<int>{}) == "");
}

TEST_CASE("round-trip on random strings") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    std::mt19937_64 rng(42);
    for (int rep = 0; rep < 1000; ++rep) {
        std::string s;
        const int len = static_cast<int>(rng() % 40);
        for (int i = 0; i < len; ++i) {
            s.push_back(static_cast<char>(32 + rng() % 95));  // printable ascii
        }
        CAPTURE(s);
        REQUIRE(vocab.decode(vocab.encode(s)) == s);
    }
    // multi-byte codepoints round-trip too
    const std::string unicode = "καφές — 北京 déjà";
    CHECK(vocab.decode(vocab.encode(unicode)) == unicode);
}

TEST_CASE("byte fallback vocabulary covers arbitrary bytes") {
    const BpeVocab fallback = BpeVocab::byte_fallback();
    CHECK(fallback.size() == 256);
    std::string s;
    for (int b = 0; b < 256; ++b) s.push_back(static_cast<char>(b));
    CHECK(fallback.decode(fallback.encode(s)) == s);
}

TEST_CASE("decode rejects out-of-range ids") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    CHECK_THROWS(vocab.decode(std::vector<int>{vocab.size()}));
    CHECK_THROWS(vocab.decode(std::vector<int>{-1}));
}

TEST_CASE("find_span locates the needle's minimal token cover") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const std::string prompt = "The capital of France is";
    const std::vector<int> ids = vocab.encode(prompt);
    const TokenSpan span = vocab.find_span(ids, "France");
    CHECK(span.start < span.end);
    CHECK(span.surface.find("France") != std::string::npos);
    // decoding the span tokens reproduces the surface
    std::vector<int> covered(ids.begin() + span.start, ids.begin() + span.end);
    CHECK(vocab.decode(covered) == span.surface);
}

TEST_CASE("find_span errors: absent and ambiguous needles") {
    const BpeVocab& vocab = testsupport::tiny_vocab();
    const std::vector<int> ids = vocab.encode("The capital of France is");
    CHECK_THROWS_WITH_AS(vocab.find_span(ids, "Atlantis"), doctest::Contains("does not occur"),
                         std::runtime_error);

    const std::string one_shot = "The capital of France is Paris, the capital of France is";
    const std::vector<int> ids2 = vocab.encode(one_shot);
    CHECK_THROWS_WITH_AS(vocab.find_span(ids2, "France"), doctest::Contains("ambiguous"),
                         std::runtime_error);
    // a caller-provided window resolves the ambiguity
    const std::size_t mid = one_shot.find(',');
    const TokenSpan span = vocab.find_span(ids2, "France", mid, std::string::npos);
    CHECK(span.surface.find("France") != std::string::npos);
    CHECK(span.start > 0);
}

TEST_CASE("vocab files with non-dense ids are rejected") {
    const std::string bad_vocab = testsupport::fixtures_dir() + "/bad_vocab.json";
    {
        std::ofstream out(bad_vocab);
        out << "{\"a\": 0, \"b\": 7}";
    }
    CHECK_THROWS_WITH_AS(BpeVocab::load(bad_vocab, testsupport::tiny_bpe_dir() + "/merges.txt"),
                         doctest::Contains("dense"), std::runtime_error);
    std::remove(bad_vocab.c_str());
}
