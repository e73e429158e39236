#include "circuitprobe/safetensors.hpp"

#include "circuitprobe/tensor.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace circuitprobe {

namespace {

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            int e = -1;
            std::uint32_t m = mant;
            do {
                ++e;
                m <<= 1;
            } while ((m & 0x400u) == 0);
            bits = sign | ((127 - 15 - e) << 23) | ((m & 0x3FFu) << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

}  // namespace

std::int64_t TensorEntry::numel() const {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

SafetensorsFile SafetensorsFile::open(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open tensor archive: " + path);
    }

    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in || header_len == 0 || header_len > (1ULL << 31)) {
        throw std::runtime_error("malformed tensor archive (bad header length): " + path);
    }

    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw std::runtime_error("malformed tensor archive (truncated header): " + path);
    }

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed tensor archive (header is not JSON): " + path +
                                 ": " + e.what());
    }

    SafetensorsFile f;
    f.path_ = path;
    std::uint64_t data_end = 0;
    for (const auto& [name, info] : j.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : info.items()) {
                f.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
            }
            continue;
        }
        TensorEntry e;
        try {
            e.dtype = info.at("dtype").get<std::string>();
            e.shape = info.at("shape").get<std::vector<std::int64_t>>();
            const auto offs = info.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offs.size() != 2 || offs[1] < offs[0]) {
                throw std::runtime_error("bad data_offsets");
            }
            e.begin = offs[0];
            e.end = offs[1];
        } catch (const std::exception& ex) {
            throw std::runtime_error("malformed tensor archive entry '" + name + "' in " + path +
                                     ": " + ex.what());
        }
        data_end = std::max(data_end, e.end);
        f.entries_.emplace(name, std::move(e));
    }

    f.data_.resize(data_end);
    in.read(reinterpret_cast<char*>(f.data_.data()), static_cast<std::streamsize>(data_end));
    if (!in) {
        throw std::runtime_error("malformed tensor archive (truncated data section): " + path);
    }
    f.hash_ = fnv1a64(f.data_);
    return f;
}

const TensorEntry& SafetensorsFile::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw std::runtime_error("tensor archive " + path_ + " has no tensor '" + name + "'");
    }
    return it->second;
}

std::vector<std::string> SafetensorsFile::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

std::vector<float> SafetensorsFile::floats(const std::string& name) const {
    const TensorEntry& e = entry(name);
    const std::uint8_t* p = data_.data() + e.begin;
    const std::uint64_t nbytes = e.end - e.begin;
    const std::int64_t n = e.numel();
    std::vector<float> out(static_cast<std::size_t>(n));
    if (e.dtype == "F32") {
        if (nbytes != static_cast<std::uint64_t>(n) * 4) {
            throw std::runtime_error("tensor '" + name + "' has inconsistent byte size");
        }
        std::memcpy(out.data(), p, nbytes);
    } else if (e.dtype == "F16") {
        if (nbytes != static_cast<std::uint64_t>(n) * 2) {
            throw std::runtime_error("tensor '" + name + "' has inconsistent byte size");
        }
        for (std::int64_t i = 0; i < n; ++i) {
            std::uint16_t h;
            std::memcpy(&h, p + 2 * i, 2);
            out[static_cast<std::size_t>(i)] = half_to_float(h);
        }
    } else if (e.dtype == "BF16") {
        if (nbytes != static_cast<std::uint64_t>(n) * 2) {
            throw std::runtime_error("tensor '" + name + "' has inconsistent byte size");
        }
        for (std::int64_t i = 0; i < n; ++i) {
            std::uint16_t h;
            std::memcpy(&h, p + 2 * i, 2);
            const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
            out[static_cast<std::size_t>(i)] = std::bit_cast<float>(bits);
        }
    } else {
        throw std::runtime_error("tensor '" + name + "' has unsupported dtype " + e.dtype);
    }
    return out;
}

}  // namespace circuitprobe
