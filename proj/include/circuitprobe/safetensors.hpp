#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace circuitprobe {

// Single-file tensor archive: 8-byte little-endian header length, JSON header
// mapping tensor name -> {dtype, shape, data_offsets}, then raw row-major data.
struct TensorEntry {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0;  // offsets into the data section
    std::uint64_t end = 0;

    std::int64_t numel() const;
};

class SafetensorsFile {
public:
    static SafetensorsFile open(const std::string& path);

    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    const TensorEntry& entry(const std::string& name) const;
    std::vector<std::string> names() const;
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    // Decodes an entry to f32 (accepts F32/F16/BF16 payloads).
    std::vector<float> floats(const std::string& name) const;

    std::uint64_t content_hash() const { return hash_; }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::vector<std::uint8_t> data_;  // data section only
    std::map<std::string, TensorEntry> entries_;
    std::map<std::string, std::string> metadata_;
    std::uint64_t hash_ = 0;
};

}  // namespace circuitprobe
