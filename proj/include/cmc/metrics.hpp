#pragma once

#include <vector>

#include "cmc/codec.hpp"

namespace cmc {

struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Nmse {
    double linear = 0.0;
    double db = 0.0;
};

// Mean over samples of per-sample ||H - Hhat||^2 / ||H||^2; dB value clamped
// at -100 for exact reconstructions.
Nmse nmse(const std::vector<ChannelMatrix>& ref, const std::vector<ChannelMatrix>& rec);
Nmse nmse_single(const ChannelMatrix& ref, const ChannelMatrix& rec);

// Mean over samples of the per-subcarrier normalized inner-product magnitude
// between reconstructed and true channel vectors.
double rho(const std::vector<ChannelMatrix>& ref, const std::vector<ChannelMatrix>& rec);
double rho_single(const ChannelMatrix& ref, const ChannelMatrix& rec);

struct Cluster {
    std::vector<int> members;
    double centroid_x = 0.0, centroid_y = 0.0;
};

// Greedy agglomeration into groups of at most 3 whose members are pairwise
// within `threshold_m`; users that cannot join any group stay singletons.
std::vector<Cluster> cluster_users(const std::vector<std::pair<double, double>>& positions,
                                   double threshold_m = 1.0);

struct EvalResult {
    double rate_bpe = 0.0;           // measured bits per CSI entry, incl. the 16 lambda bits
    double payload_bpe = 0.0;        // measured payload bits per entry
    double entropy_bpe = 0.0;        // model estimate under the frozen prior
    Nmse nmse;
    double rho = 0.0;
    double lambda = 0.0;
    std::vector<EvalResult> per_user; // filled for multi-user evaluation
};

// Runs the full compress/decompress path (real quantizer and coder) over a
// dataset and aggregates metrics.
EvalResult evaluate(const SingleUserModel& model, const std::vector<ChannelMatrix>& data);

// Multi-user: per_user[k] holds user k's dataset, aligned by scene index.
EvalResult evaluate_joint(const MultiUserModel& model,
                          const std::vector<std::vector<ChannelMatrix>>& per_user);

constexpr double kLambdaHeaderBits = 16.0;

} // namespace cmc
