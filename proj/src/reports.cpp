#include "circuitprobe/reports.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace circuitprobe {

namespace {

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

constexpr double kChartW = 640.0;
constexpr double kChartH = 400.0;
constexpr double kMarginL = 64.0;
constexpr double kMarginR = 24.0;
constexpr double kMarginT = 40.0;
constexpr double kMarginB = 48.0;

struct Scale {
    double lo, hi, plot_lo, plot_hi;
    double operator()(double v) const {
        if (hi == lo) return (plot_lo + plot_hi) / 2.0;
        return plot_lo + (v - lo) / (hi - lo) * (plot_hi - plot_lo);
    }
};

// blue (negative) -> white (zero) -> red (positive)
std::string diverging_color(double v, double max_abs) {
    if (max_abs <= 0.0) max_abs = 1.0;
    double x = std::clamp(v / max_abs, -1.0, 1.0);
    int r, g, b;
    if (x >= 0) {
        r = 255;
        g = static_cast<int>(255 * (1.0 - x));
        b = static_cast<int>(255 * (1.0 - x));
    } else {
        r = static_cast<int>(255 * (1.0 + x));
        g = static_cast<int>(255 * (1.0 + x));
        b = 255;
    }
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

}  // namespace

nlohmann::json meta_json(const ReportMeta& meta) {
    return nlohmann::json{
        {"experiment", meta.experiment}, {"model", meta.model_path},
        {"model_hash", hash_hex(meta.model_hash)}, {"task", meta.task},
        {"shots", meta.shots}, {"seed", meta.seed},
        {"threads", meta.threads}, {"version", kCodeVersion},
    };
}

std::string dump_json(const nlohmann::json& j) {
    return j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

std::string meta_csv_comment(const ReportMeta& meta) {
    std::ostringstream os;
    os << "# experiment=" << meta.experiment << " version=" << kCodeVersion
       << " model=" << meta.model_path << " model_hash=" << hash_hex(meta.model_hash)
       << " task=" << meta.task << " shots=" << meta.shots << " seed=" << meta.seed << "\n";
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << content;
    if (!out) {
        throw std::runtime_error("failed while writing " + path);
    }
}

void ensure_directory(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) {
        throw std::runtime_error("cannot create directory " + path + ": " + ec.message());
    }
}

std::string format_double(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    return buf;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 3 <= bytes.size()) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out.push_back(table[(v >> 6) & 63]);
        out.push_back(table[v & 63]);
        i += 3;
    }
    const std::size_t rem = bytes.size() - i;
    if (rem == 1) {
        const std::uint32_t v = bytes[i] << 16;
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out += "==";
    } else if (rem == 2) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out.push_back(table[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<std::uint8_t> out;
    int buffer = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        const int v = value_of(c);
        if (v < 0) throw std::runtime_error("invalid base64 input");
        buffer = (buffer << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((buffer >> bits) & 0xFF));
        }
    }
    return out;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<SvgSeries>& series) {
    std::size_t n = 0;
    double lo = 0.0, hi = 0.0;
    bool any = false;
    for (const SvgSeries& s : series) {
        n = std::max(n, s.values.size());
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            const double band = i < s.band.size() ? s.band[i] : 0.0;
            const double a = s.values[i] - band;
            const double b = s.values[i] + band;
            if (!any) {
                lo = a;
                hi = b;
                any = true;
            } else {
                lo = std::min(lo, a);
                hi = std::max(hi, b);
            }
        }
    }
    if (!any || n == 0) {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\"/>\n";
    }
    if (hi == lo) hi = lo + 1.0;

    const Scale sx{0.0, static_cast<double>(n - 1), kMarginL, kChartW - kMarginR};
    const Scale sy{lo, hi, kChartH - kMarginB, kMarginT};

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kChartW << "\" height=\""
        << kChartH << "\" font-family=\"sans-serif\">\n";
    svg << "<text x=\"" << kChartW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << xml_escape(title) << "</text>\n";

    // axes + ticks
    svg << "<line x1=\"" << kMarginL << "\" y1=\"" << kMarginT << "\" x2=\"" << kMarginL
        << "\" y2=\"" << kChartH - kMarginB << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << kMarginL << "\" y1=\"" << kChartH - kMarginB << "\" x2=\""
        << kChartW - kMarginR << "\" y2=\"" << kChartH - kMarginB << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        const double y = sy(v);
        svg << "<line x1=\"" << kMarginL - 4 << "\" y1=\"" << y << "\" x2=\"" << kMarginL
            << "\" y2=\"" << y << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << kMarginL - 8 << "\" y=\"" << y + 4
            << "\" text-anchor=\"end\" font-size=\"10\">" << format_double(v, 3) << "</text>\n";
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double x = sx(static_cast<double>(i));
        svg << "<text x=\"" << x << "\" y=\"" << kChartH - kMarginB + 16
            << "\" text-anchor=\"middle\" font-size=\"10\">" << i << "</text>\n";
    }
    svg << "<text x=\"" << (kMarginL + kChartW - kMarginR) / 2 << "\" y=\"" << kChartH - 12
        << "\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(x_label) << "</text>\n";
    svg << "<text x=\"16\" y=\"" << (kMarginT + kChartH - kMarginB) / 2
        << "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 16 "
        << (kMarginT + kChartH - kMarginB) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";

    double legend_y = kMarginT + 6;
    for (const SvgSeries& s : series) {
        if (!s.band.empty()) {
            std::ostringstream area;
            for (std::size_t i = 0; i < s.values.size(); ++i) {
                area << (i == 0 ? "M" : "L") << sx(static_cast<double>(i)) << ","
                     << sy(s.values[i] + (i < s.band.size() ? s.band[i] : 0.0)) << " ";
            }
            for (std::size_t i = s.values.size(); i-- > 0;) {
                area << "L" << sx(static_cast<double>(i)) << ","
                     << sy(s.values[i] - (i < s.band.size() ? s.band[i] : 0.0)) << " ";
            }
            svg << "<path d=\"" << area.str() << "Z\" fill=\"" << s.color
                << "\" opacity=\"0.15\" stroke=\"none\"/>\n";
        }
        svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            svg << sx(static_cast<double>(i)) << "," << sy(s.values[i]) << " ";
        }
        svg << "\"/>\n";
        svg << "<rect x=\"" << kChartW - kMarginR - 120 << "\" y=\"" << legend_y - 8
            << "\" width=\"10\" height=\"10\" fill=\"" << s.color << "\"/>\n";
        svg << "<text x=\"" << kChartW - kMarginR - 106 << "\" y=\"" << legend_y + 1
            << "\" font-size=\"10\">" << xml_escape(s.label) << "</text>\n";
        legend_y += 14;
    }
    svg << "</svg>\n";
    return svg.str();
}

std::string svg_heatmap(const std::string& title,
                        const std::vector<std::vector<std::optional<double>>>& cells,
                        const std::string& row_prefix, const std::string& col_prefix) {
    const std::size_t rows = cells.size();
    const std::size_t cols = rows ? cells[0].size() : 0;
    if (rows == 0 || cols == 0) {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\"/>\n";
    }
    double max_abs = 0.0;
    for (const auto& row : cells) {
        for (const auto& c : row) {
            if (c) max_abs = std::max(max_abs, std::abs(*c));
        }
    }

    const double cell = 34.0;
    const double w = kMarginL + cols * cell + kMarginR;
    const double h = kMarginT + rows * cell + kMarginB;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" font-family=\"sans-serif\">\n";
    svg << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << xml_escape(title) << "</text>\n";
    for (std::size_t r = 0; r < rows; ++r) {
        svg << "<text x=\"" << kMarginL - 6 << "\" y=\"" << kMarginT + r * cell + cell / 2 + 4
            << "\" text-anchor=\"end\" font-size=\"10\">" << row_prefix << r << "</text>\n";
        for (std::size_t c = 0; c < cols; ++c) {
            const double x = kMarginL + c * cell;
            const double y = kMarginT + r * cell;
            if (cells[r][c]) {
                svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell
                    << "\" height=\"" << cell << "\" fill=\""
                    << diverging_color(*cells[r][c], max_abs) << "\" stroke=\"#ccc\"/>\n";
                svg << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 3
                    << "\" text-anchor=\"middle\" font-size=\"8\">"
                    << format_double(*cells[r][c], 3) << "</text>\n";
            } else {
                svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell
                    << "\" height=\"" << cell
                    << "\" fill=\"#dddddd\" stroke=\"#ccc\"/>\n";
                svg << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 3
                    << "\" text-anchor=\"middle\" font-size=\"8\">n/a</text>\n";
            }
        }
    }
    for (std::size_t c = 0; c < cols; ++c) {
        svg << "<text x=\"" << kMarginL + c * cell + cell / 2 << "\" y=\""
            << kMarginT + rows * cell + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
            << col_prefix << c << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

std::string svg_scatter(const std::string& title, const std::string& x_label,
                        const std::string& y_label, const std::vector<SvgScatterSeries>& series) {
    bool any = false;
    double xlo = 0, xhi = 0, ylo = 0, yhi = 0;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            if (!any) {
                xlo = xhi = x;
                ylo = yhi = y;
                any = true;
            }
            xlo = std::min(xlo, x);
            xhi = std::max(xhi, x);
            ylo = std::min(ylo, y);
            yhi = std::max(yhi, y);
        }
    }
    if (!any) {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\"/>\n";
    }
    if (xhi == xlo) xhi = xlo + 1.0;
    if (yhi == ylo) yhi = ylo + 1.0;
    const Scale sx{xlo, xhi, kMarginL, kChartW - kMarginR};
    const Scale sy{ylo, yhi, kChartH - kMarginB, kMarginT};

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kChartW << "\" height=\""
        << kChartH << "\" font-family=\"sans-serif\">\n";
    svg << "<text x=\"" << kChartW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << xml_escape(title) << "</text>\n";
    svg << "<line x1=\"" << kMarginL << "\" y1=\"" << kMarginT << "\" x2=\"" << kMarginL
        << "\" y2=\"" << kChartH - kMarginB << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << kMarginL << "\" y1=\"" << kChartH - kMarginB << "\" x2=\""
        << kChartW - kMarginR << "\" y2=\"" << kChartH - kMarginB << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double vx = xlo + (xhi - xlo) * k / 4.0;
        const double vy = ylo + (yhi - ylo) * k / 4.0;
        svg << "<text x=\"" << sx(vx) << "\" y=\"" << kChartH - kMarginB + 16
            << "\" text-anchor=\"middle\" font-size=\"10\">" << format_double(vx, 3)
            << "</text>\n";
        svg << "<text x=\"" << kMarginL - 8 << "\" y=\"" << sy(vy) + 4
            << "\" text-anchor=\"end\" font-size=\"10\">" << format_double(vy, 3) << "</text>\n";
    }
    svg << "<text x=\"" << (kMarginL + kChartW - kMarginR) / 2 << "\" y=\"" << kChartH - 12
        << "\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(x_label) << "</text>\n";
    svg << "<text x=\"16\" y=\"" << (kMarginT + kChartH - kMarginB) / 2
        << "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 16 "
        << (kMarginT + kChartH - kMarginB) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";

    double legend_y = kMarginT + 6;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            svg << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"2.5\" fill=\""
                << s.color << "\" opacity=\"0.7\"/>\n";
        }
        svg << "<rect x=\"" << kChartW - kMarginR - 120 << "\" y=\"" << legend_y - 8
            << "\" width=\"10\" height=\"10\" fill=\"" << s.color << "\"/>\n";
        svg << "<text x=\"" << kChartW - kMarginR - 106 << "\" y=\"" << legend_y + 1
            << "\" font-size=\"10\">" << xml_escape(s.label) << "</text>\n";
        legend_y += 14;
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace circuitprobe
