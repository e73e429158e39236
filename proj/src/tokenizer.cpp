#include "circuitprobe/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace circuitprobe {

namespace {

struct CodepointRange {
    std::uint32_t first;
    std::uint32_t last;
};

#include "unicode_ranges.inc"

template <std::size_t N>
bool in_ranges(const CodepointRange (&ranges)[N], std::uint32_t cp) {
    auto it = std::upper_bound(std::begin(ranges), std::end(ranges), cp,
                               [](std::uint32_t v, const CodepointRange& r) { return v < r.first; });
    if (it == std::begin(ranges)) return false;
    --it;
    return cp <= it->last;
}

bool is_letter(std::uint32_t cp) { return in_ranges(kLetterRanges, cp); }
bool is_number(std::uint32_t cp) { return in_ranges(kNumberRanges, cp); }
bool is_space(std::uint32_t cp) { return in_ranges(kWhitespaceRanges, cp); }

std::string cp_to_utf8(std::uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

// Decodes UTF-8 into codepoints with their byte extents. Bytes that do not
// form valid UTF-8 become private sentinel codepoints (classified as "other"),
// keeping encode total on arbitrary byte strings.
struct Utf8Char {
    std::uint32_t cp;
    std::size_t offset;
    std::size_t length;
};

std::vector<Utf8Char> decode_utf8(std::string_view text) {
    std::vector<Utf8Char> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char b0 = static_cast<unsigned char>(text[i]);
        std::size_t len = 0;
        std::uint32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            cp = b0 & 0x07;
        }
        bool ok = len > 0 && i + len <= text.size();
        if (ok) {
            for (std::size_t k = 1; k < len; ++k) {
                const unsigned char bk = static_cast<unsigned char>(text[i + k]);
                if ((bk & 0xC0) != 0x80) {
                    ok = false;
                    break;
                }
                cp = (cp << 6) | (bk & 0x3F);
            }
        }
        if (!ok) {
            out.push_back({0x110000u + b0, i, 1});
            ++i;
            continue;
        }
        out.push_back({cp, i, len});
        i += len;
    }
    return out;
}

bool classify_letter(std::uint32_t cp) { return cp < 0x110000 && is_letter(cp); }
bool classify_number(std::uint32_t cp) { return cp < 0x110000 && is_number(cp); }
bool classify_space(std::uint32_t cp) { return cp < 0x110000 && is_space(cp); }

// The split pattern of the reference tokenizer:
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// Returns chunk boundaries as byte ranges of the input.
std::vector<std::pair<std::size_t, std::size_t>> split_pattern(std::string_view text) {
    const std::vector<Utf8Char> cps = decode_utf8(text);
    const std::size_t n = cps.size();
    std::vector<std::pair<std::size_t, std::size_t>> chunks;
    auto byte_end = [&](std::size_t idx) { return cps[idx].offset + cps[idx].length; };

    std::size_t i = 0;
    while (i < n) {
        // contractions, case-sensitive
        if (cps[i].cp == '\'' && i + 1 < n) {
            const std::uint32_t c1 = cps[i + 1].cp;
            std::size_t take = 0;
            if (c1 == 's' || c1 == 't' || c1 == 'm' || c1 == 'd') {
                take = 2;
            } else if (i + 2 < n) {
                const std::uint32_t c2 = cps[i + 2].cp;
                if ((c1 == 'r' && c2 == 'e') || (c1 == 'v' && c2 == 'e') ||
                    (c1 == 'l' && c2 == 'l')) {
                    take = 3;
                }
            }
            if (take > 0) {
                chunks.emplace_back(cps[i].offset, byte_end(i + take - 1));
                i += take;
                continue;
            }
        }

        const bool leading_space = cps[i].cp == ' ';
        const std::size_t k = i + (leading_space ? 1 : 0);
        if (k < n && classify_letter(cps[k].cp)) {
            std::size_t j = k;
            while (j < n && classify_letter(cps[j].cp)) ++j;
            chunks.emplace_back(cps[i].offset, byte_end(j - 1));
            i = j;
            continue;
        }
        if (k < n && classify_number(cps[k].cp)) {
            std::size_t j = k;
            while (j < n && classify_number(cps[j].cp)) ++j;
            chunks.emplace_back(cps[i].offset, byte_end(j - 1));
            i = j;
            continue;
        }
        if (k < n && !classify_space(cps[k].cp)) {
            std::size_t j = k;
            while (j < n && !classify_space(cps[j].cp) && !classify_letter(cps[j].cp) &&
                   !classify_number(cps[j].cp)) {
                ++j;
            }
            chunks.emplace_back(cps[i].offset, byte_end(j - 1));
            i = j;
            continue;
        }

        // whitespace: \s+(?!\S) leaves the last space to prefix the next word
        std::size_t j = i;
        while (j < n && classify_space(cps[j].cp)) ++j;
        std::size_t take = j - i;
        if (j < n && take > 1) take -= 1;
        chunks.emplace_back(cps[i].offset, byte_end(i + take - 1));
        i += take;
    }
    return chunks;
}

}  // namespace

void BpeVocab::build_byte_tables() {
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<int> cs = bs;
    int n = 0;
    for (int b = 0; b < 256; ++b) {
        if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
            bs.push_back(b);
            cs.push_back(256 + n);
            ++n;
        }
    }
    for (std::size_t idx = 0; idx < bs.size(); ++idx) {
        byte_encoder_[static_cast<std::size_t>(bs[idx])] = cp_to_utf8(static_cast<std::uint32_t>(cs[idx]));
        byte_decoder_[cs[idx]] = static_cast<unsigned char>(bs[idx]);
    }
}

BpeVocab BpeVocab::load(const std::string& vocab_path, const std::string& merges_path) {
    BpeVocab v;
    v.build_byte_tables();

    std::ifstream vin(vocab_path);
    if (!vin) throw std::runtime_error("cannot open vocab file: " + vocab_path);
    nlohmann::json j;
    try {
        vin >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed vocab file " + vocab_path + ": " + e.what());
    }
    const std::size_t vocab_size = j.size();
    v.id_to_token_.assign(vocab_size, std::string());
    std::vector<bool> seen(vocab_size, false);
    for (const auto& [token, id_json] : j.items()) {
        const std::int64_t id = id_json.get<std::int64_t>();
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size || seen[static_cast<std::size_t>(id)]) {
            throw std::runtime_error("vocab ids are not dense in [0, V): offending id " +
                                     std::to_string(id));
        }
        seen[static_cast<std::size_t>(id)] = true;
        v.id_to_token_[static_cast<std::size_t>(id)] = token;
        v.token_to_id_[token] = static_cast<int>(id);
    }

    std::ifstream min(merges_path);
    if (!min) throw std::runtime_error("cannot open merges file: " + merges_path);
    std::string line;
    int rank = 0;
    bool first = true;
    while (std::getline(min, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first && line.rfind("#version", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        if (line.empty()) continue;
        if (line.find(' ') == std::string::npos) {
            throw std::runtime_error("malformed merges line: '" + line + "'");
        }
        v.merge_rank_.emplace(line, rank++);
    }
    return v;
}

BpeVocab BpeVocab::byte_fallback() {
    BpeVocab v;
    v.build_byte_tables();
    v.id_to_token_.resize(256);
    std::vector<std::pair<std::string, int>> entries;
    for (int cp_byte = 0; cp_byte < 256; ++cp_byte) {
        v.id_to_token_[static_cast<std::size_t>(cp_byte)] =
            v.byte_encoder_[static_cast<std::size_t>(cp_byte)];
    }
    std::sort(v.id_to_token_.begin(), v.id_to_token_.end());
    for (std::size_t i = 0; i < v.id_to_token_.size(); ++i) {
        v.token_to_id_[v.id_to_token_[i]] = static_cast<int>(i);
    }
    return v;
}

std::vector<std::string> BpeVocab::bpe_word(const std::string& chunk) const {
    std::vector<std::string> word;
    for (char c : chunk) {
        word.push_back(byte_encoder_[static_cast<unsigned char>(c)]);
    }
    if (word.size() < 2 || merge_rank_.empty()) return word;

    while (word.size() >= 2) {
        int best_rank = std::numeric_limits<int>::max();
        std::size_t best = 0;
        for (std::size_t i = 0; i + 1 < word.size(); ++i) {
            auto it = merge_rank_.find(word[i] + " " + word[i + 1]);
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = i;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        const std::string first = word[best];
        const std::string second = word[best + 1];
        // merge every occurrence of the chosen pair, left to right
        std::vector<std::string> merged;
        std::size_t i = 0;
        while (i < word.size()) {
            if (i + 1 < word.size() && word[i] == first && word[i + 1] == second) {
                merged.push_back(first + second);
                i += 2;
            } else {
                merged.push_back(word[i]);
                ++i;
            }
        }
        word = std::move(merged);
    }
    return word;
}

std::vector<int> BpeVocab::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& [begin, end] : split_pattern(text)) {
        const std::string chunk(text.substr(begin, end - begin));
        for (const std::string& symbol : bpe_word(chunk)) {
            auto it = token_to_id_.find(symbol);
            if (it == token_to_id_.end()) {
                throw std::runtime_error("vocabulary has no entry for merged symbol '" + symbol +
                                         "'");
            }
            ids.push_back(it->second);
        }
    }
    return ids;
}

std::string BpeVocab::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        out += token_text(id);
    }
    return out;
}

std::string BpeVocab::token_text(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw std::runtime_error("token id out of range: " + std::to_string(id));
    }
    std::string out;
    const std::string& sym = id_to_token_[static_cast<std::size_t>(id)];
    for (const Utf8Char& c : decode_utf8(sym)) {
        auto it = byte_decoder_.find(static_cast<int>(c.cp));
        if (it == byte_decoder_.end()) {
            throw std::runtime_error("token " + std::to_string(id) +
                                     " contains a non-byte-table codepoint");
        }
        out.push_back(static_cast<char>(it->second));
    }
    return out;
}

TokenSpan BpeVocab::find_span(std::span<const int> ids, std::string_view needle) const {
    return find_span(ids, needle, 0, std::string::npos);
}

TokenSpan BpeVocab::find_span(std::span<const int> ids, std::string_view needle,
                              std::size_t window_begin, std::size_t window_end) const {
    if (needle.empty()) {
        throw std::runtime_error("find_span requires a nonempty needle");
    }
    std::vector<std::size_t> offsets;  // byte offset where each token starts
    offsets.reserve(ids.size() + 1);
    std::string full;
    for (int id : ids) {
        offsets.push_back(full.size());
        full += token_text(id);
    }
    offsets.push_back(full.size());

    const std::size_t hi = std::min(window_end, full.size());
    const std::size_t lo = std::min(window_begin, hi);
    const std::string_view view = std::string_view(full).substr(lo, hi - lo);

    const std::size_t rel = view.find(needle);
    if (rel == std::string_view::npos) {
        throw std::runtime_error("needle '" + std::string(needle) +
                                 "' does not occur in the decoded prompt window");
    }
    if (view.find(needle, rel + 1) != std::string_view::npos) {
        throw std::runtime_error("needle '" + std::string(needle) +
                                 "' is ambiguous (occurs more than once); pass a search window");
    }
    const std::size_t begin = lo + rel;
    const std::size_t last = begin + needle.size() - 1;

    TokenSpan span;
    // token containing byte `begin`
    auto it = std::upper_bound(offsets.begin(), offsets.end(), begin);
    span.start = static_cast<int>(std::distance(offsets.begin(), it)) - 1;
    auto it2 = std::upper_bound(offsets.begin(), offsets.end(), last);
    span.end = static_cast<int>(std::distance(offsets.begin(), it2));
    span.surface = full.substr(offsets[static_cast<std::size_t>(span.start)],
                               offsets[static_cast<std::size_t>(span.end)] -
                                   offsets[static_cast<std::size_t>(span.start)]);
    return span;
}

}  // namespace circuitprobe
