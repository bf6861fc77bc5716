#include "cmc/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace cmc {

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ReportError("report: cannot open " + path + " for write");
    f << text;
    if (!f) throw ReportError("report: write failed for " + path);
}

} // namespace

ResultRow to_row(const std::string& series, const EvalResult& r) {
    ResultRow row;
    row.series = series;
    row.lambda = r.lambda;
    row.rate_bpe = r.rate_bpe;
    row.entropy_bpe = r.entropy_bpe;
    row.nmse_linear = r.nmse.linear;
    row.nmse_db = r.nmse.db;
    row.rho = r.rho;
    return row;
}

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
    if (rows.empty()) throw ReportError("report: no result rows");
    std::ostringstream os;
    os << "series,lambda,rate_bpe,entropy_bpe,nmse_linear,nmse_db,rho\n";
    for (const auto& r : rows)
        os << r.series << ',' << fmt6(r.lambda) << ',' << fmt6(r.rate_bpe) << ','
           << fmt6(r.entropy_bpe) << ',' << fmt6(r.nmse_linear) << ',' << fmt6(r.nmse_db) << ','
           << fmt6(r.rho) << '\n';
    write_text(path, os.str());
}

std::vector<ResultRow> read_results_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ReportError("report: cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw ReportError("report: empty csv " + path);
    std::vector<ResultRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ResultRow r;
        std::string field;
        std::getline(ls, r.series, ',');
        std::getline(ls, field, ',');
        r.lambda = std::stod(field);
        std::getline(ls, field, ',');
        r.rate_bpe = std::stod(field);
        std::getline(ls, field, ',');
        r.entropy_bpe = std::stod(field);
        std::getline(ls, field, ',');
        r.nmse_linear = std::stod(field);
        std::getline(ls, field, ',');
        r.nmse_db = std::stod(field);
        std::getline(ls, field, ',');
        r.rho = std::stod(field);
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_rd_svg(const std::string& path, const std::vector<ResultRow>& rows) {
    if (rows.empty()) throw ReportError("report: no points to plot");

    // axis ranges with margin
    double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
    for (const auto& r : rows) {
        x_min = std::min(x_min, r.rate_bpe);
        x_max = std::max(x_max, r.rate_bpe);
        y_min = std::min(y_min, r.nmse_db);
        y_max = std::max(y_max, r.nmse_db);
    }
    if (x_max - x_min < 1e-9) {
        x_min -= 0.01;
        x_max += 0.01;
    }
    if (y_max - y_min < 1e-9) {
        y_min -= 1.0;
        y_max += 1.0;
    }
    const double pad_x = 0.06 * (x_max - x_min), pad_y = 0.08 * (y_max - y_min);
    x_min -= pad_x;
    x_max += pad_x;
    y_min -= pad_y;
    y_max += pad_y;

    const double W = 640, H = 480, ml = 70, mr = 20, mt = 20, mb = 50;
    auto px = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - y_min) / (y_max - y_min) * (H - mt - mb); };

    // stable series order: first appearance
    std::vector<std::string> series;
    for (const auto& r : rows)
        if (std::find(series.begin(), series.end(), r.series) == series.end())
            series.push_back(r.series);
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    // axes
    os << "<line x1=\"" << ml << "\" y1=\"" << (H - mb) << "\" x2=\"" << (W - mr) << "\" y2=\""
       << (H - mb) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << (H - mb)
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double xv = x_min + (x_max - x_min) * i / 5.0;
        const double yv = y_min + (y_max - y_min) * i / 5.0;
        os << "<line x1=\"" << fmt6(px(xv)) << "\" y1=\"" << (H - mb) << "\" x2=\"" << fmt6(px(xv))
           << "\" y2=\"" << (H - mb + 5) << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << fmt6(px(xv)) << "\" y=\"" << (H - mb + 20)
           << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt6(xv) << "</text>\n";
        os << "<line x1=\"" << (ml - 5) << "\" y1=\"" << fmt6(py(yv)) << "\" x2=\"" << ml
           << "\" y2=\"" << fmt6(py(yv)) << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << (ml - 8) << "\" y=\"" << fmt6(py(yv) + 4)
           << "\" font-size=\"11\" text-anchor=\"end\">" << fmt6(yv) << "</text>\n";
    }
    os << "<text x=\"" << (ml + (W - ml - mr) / 2) << "\" y=\"" << (H - 12)
       << "\" font-size=\"13\" text-anchor=\"middle\">bits per entry</text>\n";
    os << "<text x=\"16\" y=\"" << (mt + (H - mt - mb) / 2)
       << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << (mt + (H - mt - mb) / 2) << ")\">NMSE (dB)</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        std::vector<const ResultRow*> pts;
        for (const auto& r : rows)
            if (r.series == series[si]) pts.push_back(&r);
        std::sort(pts.begin(), pts.end(), [](const ResultRow* a, const ResultRow* b) {
            return a->rate_bpe < b->rate_bpe;
        });
        const char* color = colors[si % 6];
        if (pts.size() > 1) {
            os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto* p : pts) os << fmt6(px(p->rate_bpe)) << ',' << fmt6(py(p->nmse_db)) << ' ';
            os << "\"/>\n";
        }
        for (const auto* p : pts)
            os << "<circle cx=\"" << fmt6(px(p->rate_bpe)) << "\" cy=\"" << fmt6(py(p->nmse_db))
               << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        // legend
        const double ly = mt + 16 + 18 * double(si);
        os << "<line x1=\"" << (W - mr - 150) << "\" y1=\"" << ly << "\" x2=\"" << (W - mr - 120)
           << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
        os << "<text x=\"" << (W - mr - 112) << "\" y=\"" << (ly + 4) << "\" font-size=\"12\">"
           << series[si] << "</text>\n";
    }
    os << "</svg>\n";
    write_text(path, os.str());
}

uint64_t fnv1a64(const std::string& text) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void write_manifest(const std::string& output_path, const std::string& command,
                    const std::string& config_text, uint64_t seed) {
    nlohmann::json j;
    j["command"] = command;
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(config_text)));
    j["config_hash"] = hash;
    j["seed"] = seed;
    j["version"] = kToolVersion;
    write_text(output_path + ".manifest.json", j.dump(2) + "\n");
}

} // namespace cmc
