#pragma once

#include <string>
#include <vector>

#include "cmc/metrics.hpp"

namespace cmc {

struct ReportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr const char* kToolVersion = "0.1.0";

struct ResultRow {
    std::string series;
    double lambda = 0.0;
    double rate_bpe = 0.0;
    double entropy_bpe = 0.0;
    double nmse_linear = 0.0;
    double nmse_db = 0.0;
    double rho = 0.0;
};

ResultRow to_row(const std::string& series, const EvalResult& r);

// Deterministic CSV: fixed column order, 6 significant digits.
void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results_csv(const std::string& path);

// Rate-distortion plot: one polyline per series, NMSE(dB) against bits/entry.
void write_rd_svg(const std::string& path, const std::vector<ResultRow>& rows);

// Every CLI run drops a manifest next to its outputs: a hash of the effective
// configuration, the seed, and the tool version.
void write_manifest(const std::string& output_path, const std::string& command,
                    const std::string& config_text, uint64_t seed);

uint64_t fnv1a64(const std::string& text);

// Published full-scale operating points (indoor, N_c=256, N_t=32, random user
// placement). Not reproducible at desk scale; kept as reference metadata for
// plots and sanity bounds.
struct ReferencePoint {
    double lambda;
    double rate_bpe;
    double entropy_bpe;
    double nmse_db;
    double rho;
};

inline constexpr ReferencePoint kPublishedIndoorReference[] = {
    {1e4, 0.006068, 0.003853, -4.12, 0.8401},
    {5e4, 0.01353, 0.01152, -7.31, 0.9337},
    {1e5, 0.02232, 0.02094, -8.60, 0.9482},
    {5e5, 0.05353, 0.05478, -11.83, 0.9732},
    {1e6, 0.07658, 0.07488, -12.45, 0.9770},
    {5e6, 0.1526, 0.1509, -13.57, 0.9808},
};

} // namespace cmc
