#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "cmc/rng.hpp"

namespace cmc {

using cplx = std::complex<double>;

struct ArrayConfig {
    int n_antennas = 16;
    double spacing_over_wavelength = 0.5; // dipole array at half-wavelength spacing

    void validate() const;
};

struct MultipathComponent {
    cplx gain;        // dimensionless
    double delay_s;   // seconds
    double aod_rad;   // angle of departure, |aod| <= pi/2
};

struct SceneConfig {
    int n_subcarriers = 32;
    double sampling_rate_hz = 20e6;
    int n_shared_paths = 0;
    int n_local_paths_per_user = 8;
    int n_users = 1;
    double area_side_m = 20.0;
    double delay_spread_s = 4e-7;
    uint64_t rng_seed = 1;
    // literal reading of the channel formula: one AoD per user applied to
    // every path, instead of per-path AoDs
    bool single_aod_per_user = false;

    void validate() const;
};

struct ChannelMatrix {
    int n_c = 0;
    int n_t = 0;
    std::vector<cplx> data; // row-major, row = subcarrier, col = antenna
    double pos_x = 0.0, pos_y = 0.0;
    bool has_position = false;

    cplx& at(int n, int t) { return data[static_cast<size_t>(n) * n_t + t]; }
    cplx at(int n, int t) const { return data[static_cast<size_t>(n) * n_t + t]; }
};

struct MultiUserScene {
    std::vector<MultipathComponent> shared_paths;
    std::vector<std::vector<MultipathComponent>> per_user_paths;
    std::vector<std::pair<double, double>> positions;
    std::vector<double> user_aods; // set only in single-AoD mode

    int n_users() const { return static_cast<int>(per_user_paths.size()); }
};

// ULA response: element t is exp(-j*2*pi*(d/lambda)*t*sin(aod)), element 0 is 1.
std::vector<cplx> steering_vector(double aod_rad, const ArrayConfig& array);

// Sum-of-multipath channel over the union of shared and user-local paths.
ChannelMatrix generate_channel(const MultiUserScene& scene, int user_index,
                               const SceneConfig& config, const ArrayConfig& array);

MultiUserScene sample_scene(const SceneConfig& config, Rng& rng);

// Scales all matrices in place by one constant so that the mean per-entry
// power is 1; returns the scale applied.
double normalize_dataset(std::vector<ChannelMatrix>& matrices);

} // namespace cmc
