#pragma once

// Self-contained SVG line charts for training reports, plus the per-method
// comparison table.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "regda/train.hpp"

namespace regda {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
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

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    return colors[i % 8];
}

}  // namespace detail

inline std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                                  const std::vector<Series>& series) {
    const double W = 640, H = 420, left = 70, right = 160, top = 40, bottom = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    const double pw = W - left - right, ph = H - top - bottom;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << detail::xml_escape(title)
       << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
        os << "<line x1=\"" << px(xv) << "\" y1=\"" << top << "\" x2=\"" << px(xv) << "\" y2=\"" << top + ph
           << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
           << detail::fmt(xv) << "</text>\n";
        os << "<line x1=\"" << left << "\" y1=\"" << py(yv) << "\" x2=\"" << left + pw << "\" y2=\"" << py(yv)
           << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
           << detail::fmt(yv) << "</text>\n";
    }
    os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << detail::xml_escape(x_label) << "</text>\n";
    os << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
       << top + ph / 2 << ")\">" << detail::xml_escape(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        os << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << detail::palette(k) << "\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
        os << "\"/>\n";
        const double ly = top + 14 + 18.0 * static_cast<double>(k);
        os << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly
           << "\" stroke-width=\"2\" stroke=\"" << detail::palette(k) << "\"/>\n";
        os << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">" << detail::xml_escape(s.name)
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

struct LabeledReport {
    std::string label;
    TrainReport report;
};

struct Panel {
    std::string file, title, y_label;
    std::function<double(const TrainRecord&)> value;
};

// The four training-dynamics panels.
inline std::vector<Panel> dynamics_panels() {
    return {{"accuracy_f.svg", "Accuracy of f (target PCK)", "PCK", [](const TrainRecord& r) { return r.pck_f; }},
            {"accuracy_f_adv.svg", "Accuracy of f' (target PCK)", "PCK", [](const TrainRecord& r) { return r.pck_f_adv; }},
            {"accuracy_difference.svg", "Accuracy difference", "PCK(f) - PCK(f')",
             [](const TrainRecord& r) { return r.accuracy_difference; }},
            {"prediction_difference.svg", "Prediction difference", "mean |y' - y| (grid cells)",
             [](const TrainRecord& r) { return r.prediction_difference; }}};
}

// Adaptation-phase series of one panel; steps are counted from the start of adaptation.
inline Series panel_series(const LabeledReport& lr, const Panel& panel) {
    Series s{lr.label, {}, {}};
    for (const auto& r : lr.report.records) {
        if (r.phase != "adapt" && r.phase != "final") continue;
        s.x.push_back(static_cast<double>(r.step - std::min(r.step, lr.report.adaptation_start)));
        s.y.push_back(panel.value(r));
    }
    return s;
}

// Writes the four SVG panels, the raw series CSV and the comparison table
// (CSV and text). Returns the written paths.
inline std::vector<std::filesystem::path> write_plots(const std::vector<LabeledReport>& reports,
                                                      const std::filesystem::path& out) {
    if (reports.empty()) throw std::invalid_argument("plot: no reports given");
    for (const auto& r : reports)
        if (r.report.records.empty()) throw std::invalid_argument("plot: report '" + r.label + "' is empty");
    std::filesystem::create_directories(out);
    std::vector<std::filesystem::path> written;
    auto write = [&](const std::string& name, const std::string& text) {
        const auto path = out / name;
        std::ofstream os(path);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << text;
        written.push_back(path);
    };
    for (const auto& panel : dynamics_panels()) {
        std::vector<Series> series;
        for (const auto& r : reports) series.push_back(panel_series(r, panel));
        write(panel.file, svg_line_chart(panel.title, "adaptation step", panel.y_label, series));
    }
    std::ostringstream raw;
    raw << "label,step,target_pck_f,target_pck_f_adv,accuracy_difference,prediction_difference,target_mae_f\n";
    for (const auto& r : reports)
        for (const auto& rec : r.report.records) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.label.c_str(), rec.step, rec.pck_f,
                          rec.pck_f_adv, rec.accuracy_difference, rec.prediction_difference, rec.mae_f);
            raw << buf;
        }
    write("series.csv", raw.str());

    std::ostringstream csv, txt;
    csv << "label,method,final_step,target_mae_f,target_pck_f\n";
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-24s %-16s %10s %10s\n", "label", "method", "MAE", "PCK");
    txt << buf;
    for (const auto& r : reports) {
        const auto& f = r.report.final_record();
        std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.17g,%.17g\n", r.label.c_str(), r.report.method.c_str(), f.step, f.mae_f,
                      f.pck_f);
        csv << buf;
        std::snprintf(buf, sizeof buf, "%-24s %-16s %10.4f %10.4f\n", r.label.c_str(), r.report.method.c_str(), f.mae_f,
                      f.pck_f);
        txt << buf;
    }
    txt << "MAE unit: " << kMaeUnit << "; PCK at alpha = " << kDefaultPckAlpha << "\n";
    write("comparison.csv", csv.str());
    write("comparison.txt", txt.str());
    return written;
}

}  // namespace regda
