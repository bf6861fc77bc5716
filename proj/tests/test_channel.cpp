#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <cstring>
#include <unistd.h>

#include "cmc/channel.hpp"
#include "cmc/dataset.hpp"

using namespace cmc;

namespace {

constexpr double kPi = 3.14159265358979323846;

// literal per-entry evaluation of the multipath sum, independent of the
// production accumulation order
cplx oracle_entry(const std::vector<MultipathComponent>& paths, int n, int t,
                  const SceneConfig& cfg, const ArrayConfig& arr) {
    cplx acc(0.0, 0.0);
    const double amp = std::sqrt(double(arr.n_antennas) / double(paths.size()));
    for (const auto& p : paths) {
        const double delay_phase =
            -2.0 * kPi * p.delay_s * cfg.sampling_rate_hz * double(n) / double(cfg.n_subcarriers);
        const double steer_phase =
            -2.0 * kPi * arr.spacing_over_wavelength * double(t) * std::sin(p.aod_rad);
        acc += amp * p.gain * std::exp(cplx(0.0, delay_phase)) * std::exp(cplx(0.0, steer_phase));
    }
    return acc;
}

double rel_frob_err(const ChannelMatrix& a, const ChannelMatrix& b) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        num += std::norm(a.data[i] - b.data[i]);
        den += std::norm(b.data[i]);
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

MultiUserScene single_user_scene(std::vector<MultipathComponent> paths) {
    MultiUserScene s;
    s.per_user_paths.push_back(std::move(paths));
    s.positions.push_back({0.0, 0.0});
    return s;
}

} // namespace

TEST_CASE("steering vector examples") {
    ArrayConfig arr;
    arr.n_antennas = 4;
    auto a = steering_vector(0.0, arr);
    for (const cplx& v : a) CHECK(std::abs(v - cplx(1.0, 0.0)) < 1e-15);

    arr.n_antennas = 2;
    a = steering_vector(kPi / 2.0, arr);
    CHECK(std::abs(a[0] - cplx(1.0, 0.0)) < 1e-15);
    CHECK(std::abs(a[1] - cplx(-1.0, 0.0)) < 1e-12);

    // element t computed by direct formula evaluation
    arr.n_antennas = 3;
    a = steering_vector(kPi / 6.0, arr);
    for (int t = 0; t < 3; ++t) {
        const cplx want = std::exp(cplx(0.0, -2.0 * kPi * 0.5 * double(t) * std::sin(kPi / 6.0)));
        CHECK(std::abs(a[size_t(t)] - want) < 1e-14);
    }
}

TEST_CASE("steering vector entries have unit modulus") {
    Rng rng(3);
    ArrayConfig arr;
    arr.n_antennas = 16;
    for (int i = 0; i < 50; ++i) {
        const double aod = rng.uniform(-1.0, 1.0) * kPi / 2.0;
        for (const cplx& v : steering_vector(aod, arr))
            CHECK(std::abs(std::abs(v) - 1.0) < 1e-14);
    }
}

TEST_CASE("single path with zero delay and zero angle") {
    SceneConfig cfg;
    cfg.n_subcarriers = 8;
    ArrayConfig arr;
    arr.n_antennas = 4;
    auto scene = single_user_scene({{cplx(1.0, 0.0), 0.0, 0.0}});
    const ChannelMatrix h = generate_channel(scene, 0, cfg, arr);
    const double want = std::sqrt(4.0);
    for (const cplx& v : h.data) CHECK(std::abs(v - cplx(want, 0.0)) < 1e-13);
}

TEST_CASE("generate_channel matches the brute-force oracle") {
    for (int trial = 0; trial < 20; ++trial) {
        SceneConfig cfg;
        cfg.n_subcarriers = 16;
        cfg.n_shared_paths = 3;
        cfg.n_local_paths_per_user = 5;
        cfg.rng_seed = 1000 + uint64_t(trial);
        ArrayConfig arr;
        arr.n_antennas = 4;
        Rng scene_rng(cfg.rng_seed);
        const MultiUserScene scene = sample_scene(cfg, scene_rng);
        const ChannelMatrix h = generate_channel(scene, 0, cfg, arr);

        std::vector<MultipathComponent> paths = scene.shared_paths;
        paths.insert(paths.end(), scene.per_user_paths[0].begin(), scene.per_user_paths[0].end());
        ChannelMatrix want = h;
        for (int n = 0; n < cfg.n_subcarriers; ++n)
            for (int t = 0; t < arr.n_antennas; ++t)
                want.at(n, t) = oracle_entry(paths, n, t, cfg, arr);
        CHECK(rel_frob_err(h, want) < 1e-12);
    }
}

TEST_CASE("users sharing all paths get identical channels") {
    SceneConfig cfg;
    cfg.n_subcarriers = 8;
    ArrayConfig arr;
    arr.n_antennas = 4;
    Rng rng(5);
    MultiUserScene scene;
    for (int i = 0; i < 6; ++i)
        scene.shared_paths.push_back(
            {cplx(rng.normal(), rng.normal()), rng.uniform(0.0, 1e-7), rng.uniform(-1.0, 1.0)});
    scene.per_user_paths = {{}, {}};
    scene.positions = {{1.0, 2.0}, {3.0, 4.0}};
    const ChannelMatrix h0 = generate_channel(scene, 0, cfg, arr);
    const ChannelMatrix h1 = generate_channel(scene, 1, cfg, arr);
    for (size_t i = 0; i < h0.data.size(); ++i) CHECK(h0.data[i] == h1.data[i]);
}

TEST_CASE("rejects a user with zero paths") {
    SceneConfig cfg;
    ArrayConfig arr;
    MultiUserScene scene;
    scene.per_user_paths = {{}};
    scene.positions = {{0.0, 0.0}};
    CHECK_THROWS(generate_channel(scene, 0, cfg, arr));
}

TEST_CASE("scaling all gains scales the channel linearly") {
    SceneConfig cfg;
    cfg.n_subcarriers = 12;
    cfg.n_local_paths_per_user = 6;
    ArrayConfig arr;
    arr.n_antennas = 8;
    Rng rng(6);
    MultiUserScene scene = sample_scene(cfg, rng);
    const cplx c(0.7, -1.3);
    MultiUserScene scaled = scene;
    for (auto& p : scaled.per_user_paths[0]) p.gain *= c;
    const ChannelMatrix h = generate_channel(scene, 0, cfg, arr);
    const ChannelMatrix hc = generate_channel(scaled, 0, cfg, arr);
    for (size_t i = 0; i < h.data.size(); ++i)
        CHECK(std::abs(hc.data[i] - c * h.data[i]) <= 1e-12 * std::abs(c * h.data[i]) + 1e-15);
}

TEST_CASE("scene sampling is deterministic given the seed") {
    SceneConfig cfg;
    cfg.n_shared_paths = 4;
    cfg.n_users = 3;
    Rng a(99), b(99);
    const MultiUserScene s1 = sample_scene(cfg, a);
    const MultiUserScene s2 = sample_scene(cfg, b);
    REQUIRE(s1.shared_paths.size() == s2.shared_paths.size());
    for (size_t i = 0; i < s1.shared_paths.size(); ++i)
        CHECK(std::memcmp(&s1.shared_paths[i], &s2.shared_paths[i],
                          sizeof(MultipathComponent)) == 0);
    for (int k = 0; k < 3; ++k)
        for (size_t i = 0; i < s1.per_user_paths[size_t(k)].size(); ++i)
            CHECK(std::memcmp(&s1.per_user_paths[size_t(k)][i], &s2.per_user_paths[size_t(k)][i],
                              sizeof(MultipathComponent)) == 0);
}

TEST_CASE("scene with no shared paths has only local ones") {
    SceneConfig cfg;
    cfg.n_shared_paths = 0;
    cfg.n_local_paths_per_user = 4;
    Rng rng(1);
    const MultiUserScene s = sample_scene(cfg, rng);
    CHECK(s.shared_paths.empty());
    CHECK(s.per_user_paths[0].size() == 4);
}

TEST_CASE("shared paths raise inter-user channel correlation") {
    // sample Pearson correlation of vectorized |H| across two users
    auto mean_corr = [](int n_shared, int n_local, uint64_t seed) {
        SceneConfig cfg;
        cfg.n_subcarriers = 16;
        cfg.n_shared_paths = n_shared;
        cfg.n_local_paths_per_user = n_local;
        cfg.n_users = 2;
        ArrayConfig arr;
        arr.n_antennas = 8;
        Rng rng(seed);
        double acc = 0.0;
        const int n_scenes = 500;
        for (int s = 0; s < n_scenes; ++s) {
            const MultiUserScene scene = sample_scene(cfg, rng);
            const ChannelMatrix h0 = generate_channel(scene, 0, cfg, arr);
            const ChannelMatrix h1 = generate_channel(scene, 1, cfg, arr);
            const size_t n = h0.data.size();
            double m0 = 0, m1 = 0;
            for (size_t i = 0; i < n; ++i) {
                m0 += std::abs(h0.data[i]);
                m1 += std::abs(h1.data[i]);
            }
            m0 /= double(n);
            m1 /= double(n);
            double num = 0, d0 = 0, d1 = 0;
            for (size_t i = 0; i < n; ++i) {
                const double a = std::abs(h0.data[i]) - m0;
                const double b = std::abs(h1.data[i]) - m1;
                num += a * b;
                d0 += a * a;
                d1 += b * b;
            }
            acc += num / std::sqrt(d0 * d1);
        }
        return acc / double(n_scenes);
    };
    const double corr_shared = mean_corr(8, 2, 42);
    const double corr_indep = mean_corr(0, 10, 43);
    CHECK(corr_shared > corr_indep);
    CHECK(corr_shared > 0.5); // mostly-shared scenes are strongly correlated
}

TEST_CASE("dataset round trip is exact") {
    Rng rng(77);
    SceneConfig cfg;
    cfg.n_subcarriers = 8;
    ArrayConfig arr;
    arr.n_antennas = 4;
    std::vector<ChannelMatrix> ms;
    for (int i = 0; i < 10; ++i) {
        MultiUserScene scene = sample_scene(cfg, rng);
        ms.push_back(to_storage_precision(generate_channel(scene, 0, cfg, arr)));
    }
    const std::string path = "/tmp/cmc_test_roundtrip.csid";
    write_dataset(path, ms);
    const auto back = read_dataset(path);
    REQUIRE(back.size() == ms.size());
    for (size_t i = 0; i < ms.size(); ++i) {
        CHECK(back[i].n_c == ms[i].n_c);
        CHECK(back[i].n_t == ms[i].n_t);
        for (size_t j = 0; j < ms[i].data.size(); ++j) CHECK(back[i].data[j] == ms[i].data[j]);
        CHECK(back[i].pos_x == ms[i].pos_x);
        CHECK(back[i].pos_y == ms[i].pos_y);
    }
    std::remove(path.c_str());
}

TEST_CASE("empty dataset writes a valid count-zero file") {
    const std::string path = "/tmp/cmc_test_empty.csid";
    write_dataset(path, {});
    CHECK(read_dataset(path).empty());
    std::remove(path.c_str());
}

TEST_CASE("dataset io errors are reported distinctly") {
    const std::string path = "/tmp/cmc_test_err.csid";
    ChannelMatrix m;
    m.n_c = 2;
    m.n_t = 2;
    m.data.assign(4, cplx(1.0, -1.0));
    write_dataset(path, {m, m});

    // corrupt magic
    {
        FILE* f = std::fopen(path.c_str(), "r+b");
        std::fputc('X', f);
        std::fclose(f);
        try {
            read_dataset(path);
            FAIL("expected header error");
        } catch (const DatasetError& e) {
            CHECK(e.kind == DatasetError::Kind::MalformedHeader);
        }
    }
    // truncate payload
    {
        write_dataset(path, {m, m});
        FILE* f = std::fopen(path.c_str(), "rb");
        std::fseek(f, 0, SEEK_END);
        const long size = std::ftell(f);
        std::fclose(f);
        REQUIRE(truncate(path.c_str(), size - 5) == 0);
        try {
            read_dataset(path);
            FAIL("expected truncation error");
        } catch (const DatasetError& e) {
            CHECK(e.kind == DatasetError::Kind::Truncated);
        }
    }
    // mixed shapes rejected on write
    {
        ChannelMatrix other;
        other.n_c = 4;
        other.n_t = 2;
        other.data.assign(8, cplx(0.0, 0.0));
        try {
            write_dataset(path, {m, other});
            FAIL("expected shape error");
        } catch (const DatasetError& e) {
            CHECK(e.kind == DatasetError::Kind::ShapeMismatch);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("normalize_dataset brings mean entry power to one") {
    Rng rng(123);
    SceneConfig cfg;
    cfg.n_subcarriers = 16;
    ArrayConfig arr;
    arr.n_antennas = 8;
    std::vector<ChannelMatrix> ms;
    for (int i = 0; i < 20; ++i) {
        MultiUserScene scene = sample_scene(cfg, rng);
        ms.push_back(generate_channel(scene, 0, cfg, arr));
    }
    normalize_dataset(ms);
    double p = 0.0;
    int64_t n = 0;
    for (const auto& m : ms) {
        for (const cplx& v : m.data) p += std::norm(v);
        n += int64_t(m.data.size());
    }
    CHECK(std::abs(p / double(n) - 1.0) < 1e-12);
}
