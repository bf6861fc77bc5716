#include "cmc/channel.hpp"

#include <cmath>
#include <stdexcept>

namespace cmc {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

void ArrayConfig::validate() const {
    if (n_antennas < 1) throw std::invalid_argument("array: n_antennas must be >= 1");
    if (!(spacing_over_wavelength > 0.0))
        throw std::invalid_argument("array: spacing_over_wavelength must be > 0");
}

void SceneConfig::validate() const {
    if (n_subcarriers < 1) throw std::invalid_argument("scene: n_subcarriers must be >= 1");
    if (!(sampling_rate_hz > 0.0)) throw std::invalid_argument("scene: sampling_rate must be > 0");
    if (n_shared_paths < 0) throw std::invalid_argument("scene: n_shared_paths must be >= 0");
    if (n_local_paths_per_user < 1)
        throw std::invalid_argument("scene: n_local_paths_per_user must be >= 1");
    if (n_users < 1) throw std::invalid_argument("scene: n_users must be >= 1");
    if (n_shared_paths + n_local_paths_per_user < 1)
        throw std::invalid_argument("scene: total paths per user must be >= 1");
    if (!(delay_spread_s >= 0.0)) throw std::invalid_argument("scene: delay_spread must be >= 0");
}

std::vector<cplx> steering_vector(double aod_rad, const ArrayConfig& array) {
    array.validate();
    std::vector<cplx> a(static_cast<size_t>(array.n_antennas));
    const double phase_step = -kTwoPi * array.spacing_over_wavelength * std::sin(aod_rad);
    for (int t = 0; t < array.n_antennas; ++t)
        a[static_cast<size_t>(t)] = std::polar(1.0, phase_step * double(t));
    a[0] = cplx(1.0, 0.0);
    return a;
}

ChannelMatrix generate_channel(const MultiUserScene& scene, int user_index,
                               const SceneConfig& config, const ArrayConfig& array) {
    config.validate();
    array.validate();
    if (user_index < 0 || user_index >= scene.n_users())
        throw std::out_of_range("generate_channel: user_index out of range");

    std::vector<MultipathComponent> paths = scene.shared_paths;
    const auto& local = scene.per_user_paths[static_cast<size_t>(user_index)];
    paths.insert(paths.end(), local.begin(), local.end());
    const size_t L = paths.size();
    if (L == 0) throw std::invalid_argument("generate_channel: user has zero paths");

    const bool single_aod = !scene.user_aods.empty();
    const double user_aod = single_aod ? scene.user_aods[static_cast<size_t>(user_index)] : 0.0;

    const int n_c = config.n_subcarriers;
    const int n_t = array.n_antennas;
    ChannelMatrix h;
    h.n_c = n_c;
    h.n_t = n_t;
    h.data.assign(static_cast<size_t>(n_c) * n_t, cplx(0.0, 0.0));
    if (!scene.positions.empty()) {
        h.pos_x = scene.positions[static_cast<size_t>(user_index)].first;
        h.pos_y = scene.positions[static_cast<size_t>(user_index)].second;
        h.has_position = true;
    }

    const double amp = std::sqrt(double(n_t) / double(L));
    std::vector<std::vector<cplx>> steer(L);
    for (size_t l = 0; l < L; ++l)
        steer[l] = steering_vector(single_aod ? user_aod : paths[l].aod_rad, array);

    for (int n = 0; n < n_c; ++n) {
        cplx* row = &h.data[static_cast<size_t>(n) * n_t];
        for (size_t l = 0; l < L; ++l) {
            const double phase =
                -kTwoPi * paths[l].delay_s * config.sampling_rate_hz * double(n) / double(n_c);
            const cplx coef = amp * paths[l].gain * std::polar(1.0, phase);
            const cplx* a = steer[l].data();
            for (int t = 0; t < n_t; ++t) row[t] += coef * a[t];
        }
    }
    return h;
}

namespace {

MultipathComponent draw_path(const SceneConfig& cfg, Rng& rng) {
    MultipathComponent p;
    p.delay_s = rng.uniform(0.0, cfg.delay_spread_s);
    p.aod_rad = rng.uniform(-1.0, 1.0) * 1.5707963267948966;
    // complex Gaussian gain whose power decays exponentially in delay
    const double decay = cfg.delay_spread_s > 0.0 ? 3.0 * p.delay_s / cfg.delay_spread_s : 0.0;
    const double sigma = std::sqrt(std::exp(-decay) / 2.0);
    p.gain = cplx(sigma * rng.normal(), sigma * rng.normal());
    return p;
}

} // namespace

MultiUserScene sample_scene(const SceneConfig& config, Rng& rng) {
    config.validate();
    MultiUserScene scene;
    scene.shared_paths.reserve(static_cast<size_t>(config.n_shared_paths));
    for (int i = 0; i < config.n_shared_paths; ++i)
        scene.shared_paths.push_back(draw_path(config, rng));
    scene.per_user_paths.resize(static_cast<size_t>(config.n_users));
    scene.positions.resize(static_cast<size_t>(config.n_users));
    for (int k = 0; k < config.n_users; ++k) {
        auto& local = scene.per_user_paths[static_cast<size_t>(k)];
        local.reserve(static_cast<size_t>(config.n_local_paths_per_user));
        for (int i = 0; i < config.n_local_paths_per_user; ++i)
            local.push_back(draw_path(config, rng));
        scene.positions[static_cast<size_t>(k)] = {rng.uniform(0.0, config.area_side_m),
                                                   rng.uniform(0.0, config.area_side_m)};
    }
    if (config.single_aod_per_user) {
        scene.user_aods.resize(static_cast<size_t>(config.n_users));
        for (int k = 0; k < config.n_users; ++k)
            scene.user_aods[static_cast<size_t>(k)] = rng.uniform(-1.0, 1.0) * 1.5707963267948966;
    }
    return scene;
}

double normalize_dataset(std::vector<ChannelMatrix>& matrices) {
    double power = 0.0;
    int64_t count = 0;
    for (const auto& m : matrices) {
        for (const cplx& v : m.data) power += std::norm(v);
        count += static_cast<int64_t>(m.data.size());
    }
    if (count == 0 || power <= 0.0) return 1.0;
    const double scale = std::sqrt(double(count) / power);
    for (auto& m : matrices)
        for (cplx& v : m.data) v *= scale;
    return scale;
}

} // namespace cmc
