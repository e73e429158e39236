#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace circuitprobe {

// Contiguous token range [start, end) with its decoded surface text.
struct TokenSpan {
    int start = 0;
    int end = 0;
    std::string surface;
};

// Byte-level BPE matching the public GPT-2 tokenizer: the 256-entry byte-to-
// unicode table, the split pattern over contractions/letters/numbers/other/
// whitespace, and rank-ordered merges.
class BpeVocab {
public:
    // vocab: JSON token -> id; merges: one merge per line, rank = line order
    // (an optional leading "#version" line is skipped).
    static BpeVocab load(const std::string& vocab_path, const std::string& merges_path);

    // 256 byte tokens and no merges; enough for self-contained property tests.
    static BpeVocab byte_fallback();

    int size() const { return static_cast<int>(id_to_token_.size()); }

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    // Minimal contiguous token span whose decoded text contains `needle`.
    // The needle must occur exactly once in the decoded prompt; when it does
    // not, callers restrict the search to a byte window of the decoded text.
    TokenSpan find_span(std::span<const int> ids, std::string_view needle) const;
    TokenSpan find_span(std::span<const int> ids, std::string_view needle,
                        std::size_t window_begin, std::size_t window_end) const;

    std::string token_text(int id) const;

private:
    BpeVocab() = default;
    void build_byte_tables();
    std::vector<std::string> bpe_word(const std::string& chunk) const;

    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> merge_rank_;  // "left right" -> rank
    std::array<std::string, 256> byte_encoder_;
    std::unordered_map<int, unsigned char> byte_decoder_;  // codepoint -> byte
};

}  // namespace circuitprobe
