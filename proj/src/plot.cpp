#include "boxmask/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace boxmask {
namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kLeft = 60;
constexpr int kRight = 150;
constexpr int kTop = 40;
constexpr int kBottom = 50;
constexpr const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

struct Frame {
    double lo = 0.0;
    double hi = 1.0;

    double y(double v) const {
        const double plot_h = kHeight - kTop - kBottom;
        return kTop + plot_h * (1.0 - (v - lo) / (hi - lo));
    }
};

void header(std::ostringstream& os, const std::string& title, const Frame& f, const std::string& y_label) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
       << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = f.lo + (f.hi - f.lo) * i / 4.0;
        const double y = f.y(v);
        os << "<line x1=\"" << kLeft << "\" x2=\"" << kWidth - kRight << "\" y1=\"" << y << "\" y2=\"" << y
           << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
    }
    os << "<text transform=\"translate(16," << kHeight / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << escape(y_label) << "</text>\n";
}

void legend(std::ostringstream& os, const std::vector<Series>& series) {
    for (std::size_t s = 0; s < series.size(); ++s) {
        const int y = kTop + 10 + static_cast<int>(s) * 18;
        os << "<rect x=\"" << kWidth - kRight + 12 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
           << kColors[s % 6] << "\"/>\n";
        os << "<text x=\"" << kWidth - kRight + 28 << "\" y=\"" << y << "\">" << escape(series[s].name)
           << "</text>\n";
    }
}

Frame value_range(const std::vector<Series>& series) {
    Frame f{0.0, 0.0};
    for (const Series& s : series) {
        for (double v : s.values) {
            if (std::isfinite(v)) {
                f.lo = std::min(f.lo, v);
                f.hi = std::max(f.hi, v);
            }
        }
    }
    if (f.hi <= f.lo) {
        f.hi = f.lo + 1.0;
    }
    return f;
}

} // namespace

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series, const std::string& y_label) {
    Frame f = value_range(series);
    f.hi = std::max(f.hi, 1.0);
    std::ostringstream os;
    header(os, title, f, y_label);
    const double plot_w = kWidth - kLeft - kRight;
    const double group_w = plot_w / std::max<std::size_t>(1, categories.size());
    const double bar_w = 0.8 * group_w / std::max<std::size_t>(1, series.size());
    for (std::size_t c = 0; c < categories.size(); ++c) {
        const double gx = kLeft + c * group_w + 0.1 * group_w;
        for (std::size_t s = 0; s < series.size(); ++s) {
            const double v = c < series[s].values.size() ? series[s].values[c] : 0.0;
            const double y0 = f.y(0.0);
            const double y1 = f.y(std::isfinite(v) ? v : 0.0);
            os << "<rect x=\"" << gx + s * bar_w << "\" y=\"" << std::min(y0, y1) << "\" width=\"" << bar_w
               << "\" height=\"" << std::abs(y0 - y1) << "\" fill=\"" << kColors[s % 6] << "\"><title>"
               << escape(series[s].name) << " " << escape(categories[c]) << ": " << num(v) << "</title></rect>\n";
        }
        os << "<text x=\"" << kLeft + (c + 0.5) * group_w << "\" y=\"" << kHeight - kBottom + 18
           << "\" text-anchor=\"middle\">" << escape(categories[c]) << "</text>\n";
    }
    legend(os, series);
    os << "</svg>\n";
    return os.str();
}

std::string svg_line_chart(const std::string& title, const std::vector<double>& x, const std::vector<Series>& series,
                           const std::string& x_label, const std::string& y_label) {
    const Frame f = value_range(series);
    std::ostringstream os;
    header(os, title, f, y_label);
    double x_lo = x.empty() ? 0.0 : *std::min_element(x.begin(), x.end());
    double x_hi = x.empty() ? 1.0 : *std::max_element(x.begin(), x.end());
    if (x_hi <= x_lo) {
        x_hi = x_lo + 1.0;
    }
    const double plot_w = kWidth - kLeft - kRight;
    auto px = [&](double v) { return kLeft + plot_w * (v - x_lo) / (x_hi - x_lo); };
    for (int i = 0; i <= 4; ++i) {
        const double v = x_lo + (x_hi - x_lo) * i / 4.0;
        os << "<text x=\"" << px(v) << "\" y=\"" << kHeight - kBottom + 18 << "\" text-anchor=\"middle\">" << num(v)
           << "</text>\n";
    }
    os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
       << escape(x_label) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        os << "<polyline fill=\"none\" stroke=\"" << kColors[s % 6] << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < x.size() && i < series[s].values.size(); ++i) {
            if (std::isfinite(series[s].values[i])) {
                os << px(x[i]) << "," << f.y(series[s].values[i]) << " ";
            }
        }
        os << "\"/>\n";
    }
    legend(os, series);
    os << "</svg>\n";
    return os.str();
}

} // namespace boxmask
