#pragma once

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace circuitprobe {

inline constexpr const char* kCodeVersion = "0.1.0";

// Embedded in every report so runs are attributable and reproducible.
// Timestamps are deliberately absent: identical config + seed must give
// byte-identical output.
struct ReportMeta {
    std::string experiment;
    std::string model_path;
    std::uint64_t model_hash = 0;
    std::string task;
    int shots = 0;
    std::uint64_t seed = 0;
    int threads = 1;
};

nlohmann::json meta_json(const ReportMeta& meta);
std::string meta_csv_comment(const ReportMeta& meta);

// Serializes with invalid UTF-8 replaced: decoded byte-level tokens are
// arbitrary byte strings and may split multi-byte characters.
std::string dump_json(const nlohmann::json& j);

void write_file(const std::string& path, const std::string& content);
void ensure_directory(const std::string& path);

std::string format_double(double v, int precision = 6);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// ---- static SVG charts -----------------------------------------------------

struct SvgSeries {
    std::string label;
    std::string color;
    std::vector<double> values;
    std::vector<double> band;  // optional +/- band per point (e.g. stddev)
};

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<SvgSeries>& series);

// Missing cells (guarded values) render hatched gray, not zero.
std::string svg_heatmap(const std::string& title,
                        const std::vector<std::vector<std::optional<double>>>& cells,
                        const std::string& row_prefix, const std::string& col_prefix);

struct SvgScatterSeries {
    std::string label;
    std::string color;
    std::vector<std::pair<double, double>> points;
};

std::string svg_scatter(const std::string& title, const std::string& x_label,
                        const std::string& y_label, const std::vector<SvgScatterSeries>& series);

}  // namespace circuitprobe
