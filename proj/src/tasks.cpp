#include "circuitprobe/tasks.hpp"

#include <json.hpp>

#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

namespace circuitprobe {

namespace {

constexpr const char* kSlotX = "{X}";
constexpr const char* kSlotY = "{Y}";

std::string fill_slot(const std::string& tmpl, const std::string& slot,
                      const std::string& value) {
    const std::size_t pos = tmpl.find(slot);
    if (pos == std::string::npos) {
        throw std::runtime_error("template '" + tmpl + "' has no " + slot + " slot");
    }
    if (tmpl.find(slot, pos + 1) != std::string::npos) {
        throw std::runtime_error("template '" + tmpl + "' has more than one " + slot + " slot");
    }
    std::string out = tmpl;
    out.replace(pos, std::string(slot).size(), value);
    return out;
}

// Unbiased pick in [0, n); avoids std::uniform_int_distribution, whose output
// sequence is implementation-defined.
std::uint64_t pick_below(std::mt19937_64& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                (std::numeric_limits<std::uint64_t>::max() % n);
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % n;
}

int first_subword(const BpeVocab& vocab, const std::string& surface) {
    const std::vector<int> ids = vocab.encode(" " + surface);
    if (ids.empty()) {
        throw std::runtime_error("surface form '" + surface + "' tokenizes to nothing");
    }
    return ids.front();
}

}  // namespace

TaskSpec TaskSpec::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open task file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed task file " + path + ": " + e.what());
    }
    TaskSpec spec;
    try {
        spec.name = j.at("name").get<std::string>();
        spec.templates = j.at("templates").get<std::vector<std::string>>();
        for (const auto& pair : j.at("pairs")) {
            spec.pairs.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
        }
        spec.shot_prefix_template = j.at("shot_prefix_template").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed task file " + path + ": " + e.what());
    }
    spec.validate();
    return spec;
}

void TaskSpec::validate() const {
    if (templates.empty() || pairs.empty()) {
        throw std::runtime_error("task '" + name + "' needs templates and pairs");
    }
    for (const std::string& t : templates) {
        const std::size_t pos = t.find(kSlotX);
        if (pos == std::string::npos) {
            throw std::runtime_error("task '" + name + "': template '" + t + "' has no {X} slot");
        }
        if (t.find(kSlotX, pos + 1) != std::string::npos) {
            throw std::runtime_error("task '" + name + "': template '" + t +
                                     "' has more than one {X} slot");
        }
    }
    std::set<std::string> xs;
    for (const auto& [x, y] : pairs) {
        if (!xs.insert(x).second) {
            throw std::runtime_error("task '" + name + "': pair collision on X='" + x + "'");
        }
    }
    if (shot_prefix_template.find(kSlotX) == std::string::npos ||
        shot_prefix_template.find(kSlotY) == std::string::npos) {
        throw std::runtime_error("task '" + name + "': shot prefix template needs {X} and {Y}");
    }
}

std::vector<PromptInstance> build_dataset(const TaskSpec& spec, const BpeVocab& vocab, int shots,
                                          std::uint64_t seed) {
    spec.validate();
    if (shots < 0 || static_cast<std::size_t>(shots) > spec.pairs.size() - 1) {
        throw std::runtime_error("cannot draw " + std::to_string(shots) +
                                 " distinct demonstrations from " +
                                 std::to_string(spec.pairs.size()) + " pairs");
    }

    std::mt19937_64 rng(seed);
    std::vector<PromptInstance> out;
    out.reserve(spec.templates.size() * spec.pairs.size());

    for (std::size_t ti = 0; ti < spec.templates.size(); ++ti) {
        for (std::size_t pi = 0; pi < spec.pairs.size(); ++pi) {
            const auto& [x, y] = spec.pairs[pi];

            PromptInstance inst;
            inst.template_index = static_cast<int>(ti);
            inst.pair_index = static_cast<int>(pi);
            inst.shots = shots;

            // demonstrations: sampled without replacement, never the query pair
            std::vector<int> candidates;
            for (std::size_t c = 0; c < spec.pairs.size(); ++c) {
                if (c != pi) candidates.push_back(static_cast<int>(c));
            }
            std::string prefix;
            for (int s = 0; s < shots; ++s) {
                const std::size_t k = pick_below(rng, candidates.size());
                const int demo = candidates[k];
                candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(k));
                inst.demonstration_pairs.push_back(demo);
                const auto& [dx, dy] = spec.pairs[static_cast<std::size_t>(demo)];
                prefix += fill_slot(fill_slot(spec.shot_prefix_template, kSlotX, dx), kSlotY, dy);
            }

            inst.text = prefix + fill_slot(spec.templates[ti], kSlotX, x);
            inst.tokens = vocab.encode(inst.text);
            // X is located inside the query clause only; demonstrations may
            // mention other pairs but never this X (unique-X invariant).
            inst.x_span = vocab.find_span(inst.tokens, x, prefix.size(), std::string::npos);
            inst.x_token = first_subword(vocab, x);
            inst.y_token = first_subword(vocab, y);
            out.push_back(std::move(inst));
        }
    }
    return out;
}

std::vector<PromptInstance> intervention_set(const std::vector<PromptInstance>& dataset,
                                             const PromptInstance& for_prompt) {
    if (dataset.empty()) {
        throw std::runtime_error("intervention set requested from an empty dataset");
    }
    (void)for_prompt;  // the original stays in the set, per protocol
    return dataset;
}

}  // namespace circuitprobe
