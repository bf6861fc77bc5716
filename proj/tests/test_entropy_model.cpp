#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "cmc/entropy_model.hpp"
#include "test_util.hpp"

using namespace cmc;
using cmc::testutil::fd_max_rel_error;

namespace {

struct DensityFixture {
    ParamStore store;
    FactorizedEntropyModel model;

    explicit DensityFixture(int channels = 1, uint64_t seed = 5, bool per_channel = true,
                            double init_scale = 10.0) {
        Rng rng(seed);
        model = FactorizedEntropyModel::create(store, "prior", channels, per_channel, rng,
                                               init_scale);
    }
};

// one Adam pass of the density alone on a fixed sample set
void fit_density(DensityFixture& f, const std::vector<double>& samples, int steps, double lr) {
    Adam opt({lr});
    const int64_t n = static_cast<int64_t>(samples.size());
    Tensor latent({1, 1, 1, n});
    for (int64_t i = 0; i < n; ++i) latent[i] = samples[size_t(i)];
    for (int step = 0; step < steps; ++step) {
        Graph g;
        Leafs l = register_params(g, f.store, true);
        NodeId bits = f.model.nll_bits_node(g, l, g.constant(latent));
        NodeId loss = op_scale(g, bits, 1.0 / double(n));
        g.backward(loss);
        opt.step(f.store, g, l);
    }
}

double mean_bits(const DensityFixture& f, const std::vector<double>& symbols) {
    double acc = 0.0;
    for (double s : symbols) acc += f.model.bin_bits(f.store, 0, s);
    return acc / double(symbols.size());
}

} // namespace

TEST_CASE("cdf vanishes in the deep left tail") {
    DensityFixture f;
    CHECK(f.model.cdf(f.store, 0, -1e6) <= 1e-9);
    CHECK(f.model.cdf(f.store, 0, 1e6) >= 1.0 - 1e-9);
}

TEST_CASE("cdf is monotone over random pairs") {
    DensityFixture f(4);
    Rng rng(11);
    for (int i = 0; i < 10000; ++i) {
        const int ch = static_cast<int>(rng.below(4));
        double x1 = rng.uniform(-30.0, 30.0);
        double x2 = rng.uniform(-30.0, 30.0);
        if (x1 > x2) std::swap(x1, x2);
        CHECK(f.model.cdf(f.store, ch, x1) <= f.model.cdf(f.store, ch, x2));
    }
}

TEST_CASE("pdf matches finite differences of the cdf and is nonnegative") {
    DensityFixture f(2);
    Rng rng(12);
    const double h = 1e-6;
    for (int i = 0; i < 500; ++i) {
        const int ch = static_cast<int>(rng.below(2));
        const double x = rng.uniform(-8.0, 8.0);
        const double fd =
            (f.model.cdf(f.store, ch, x + h) - f.model.cdf(f.store, ch, x - h)) / (2.0 * h);
        const double an = f.model.pdf(f.store, ch, x);
        CHECK(an >= 0.0);
        CHECK(cmc::testutil::rel_err(an, fd) < 1e-6);
    }
}

TEST_CASE("nll stays finite far in the tail (clamped)") {
    DensityFixture f;
    Tensor latent({1, 1, 1, 2});
    latent[0] = 4000.0;
    latent[1] = -4000.0;
    Graph g;
    Leafs l = register_params(g, f.store, true);
    NodeId bits = f.model.nll_bits_node(g, l, g.constant(latent));
    CHECK(std::isfinite(g.value(bits)[0]));
    CHECK(g.value(bits)[0] == doctest::Approx(2 * 64.0)); // both clamped at 2^-64
    CHECK(f.model.underflow_count() >= 2);
}

TEST_CASE("nll gradient passes finite differences (latent and parameters)") {
    DensityFixture f(3);
    Rng rng(13);
    f.store.add("latent", Tensor::randn({2, 3, 2, 2}, rng, 2.0));
    const int latent_idx = f.store.find("latent");
    auto build = [&](Graph& g, const Leafs& l) {
        return f.model.nll_bits_node(g, l, l[latent_idx]);
    };
    Rng pick(14);
    CHECK(fd_max_rel_error(f.store, build, 6, 1e-5, pick) < 1e-4);
}

TEST_CASE("fit to a single-bin uniform drives the cost toward zero") {
    DensityFixture f;
    Rng rng(15);
    std::vector<double> samples;
    for (int i = 0; i < 4096; ++i) samples.push_back(rng.uniform() - 0.5);
    const double before = mean_bits(f, std::vector<double>(256, 0.0));
    fit_density(f, samples, 600, 1e-2);
    const double after = mean_bits(f, std::vector<double>(256, 0.0));
    CHECK(after < before);
    CHECK(after < 0.2); // per-symbol cost approaches 0 as the fit improves
}

TEST_CASE("trained on noisy Gaussian latents, nll matches the binned entropy") {
    // latents m ~ N(0, sigma^2) with unit-bin noise; the discretized model
    // cost on the quantized symbols must approach the analytic entropy
    const double sigma = 2.0;
    DensityFixture f;
    Rng rng(16);
    std::vector<double> noisy;
    std::vector<double> quantized;
    for (int i = 0; i < 8192; ++i) {
        const double m = sigma * rng.normal();
        noisy.push_back(m + rng.uniform() - 0.5);
        quantized.push_back(std::round(m));
    }
    fit_density(f, noisy, 1500, 1e-2);
    const double model_bits = mean_bits(f, quantized);
    const double analytic = binned_gaussian_entropy_bits(sigma);
    CHECK(std::abs(model_bits - analytic) < 0.1);
}

TEST_CASE("discretize: zero biases give a symmetric table") {
    DensityFixture f;
    for (int k = 0; k < FactorizedEntropyModel::kStages; ++k) {
        const int idx = f.store.find("prior/b" + std::to_string(k));
        f.store[idx].value.fill(0.0);
    }
    const auto tables = f.model.discretize(f.store);
    const PmfTable& t = tables[0];
    CHECK(t.n_min == -t.n_max);
    for (int32_t n = 0; n <= t.n_max; ++n) {
        const uint32_t p_pos = t.freq[size_t(n - t.n_min)];
        const uint32_t p_neg = t.freq[size_t(-n - t.n_min)];
        CHECK(std::abs(int64_t(p_pos) - int64_t(p_neg)) <= 1);
    }
}

TEST_CASE("discretize: fixed-point total is exact and entries track the cdf") {
    // a density of typical trained sharpness; very flat densities spend their
    // entire tail budget on the >=1-count clamps and cannot track to 1 ulp
    DensityFixture f(4, 21, true, 1.0);
    const auto tables = f.model.discretize(f.store);
    REQUIRE(tables.size() == 4);
    for (int ch = 0; ch < 4; ++ch) {
        const PmfTable& t = tables[size_t(ch)];
        uint64_t total = t.escape_freq;
        for (uint32_t v : t.freq) total += v;
        CHECK(total == kPmfTotal);
        for (int32_t n = t.n_min; n <= t.n_max; ++n) {
            const double mass = f.model.cdf(f.store, ch, double(n) + 0.5) -
                                f.model.cdf(f.store, ch, double(n) - 0.5);
            const double ulp_err =
                std::abs(double(t.freq[size_t(n - t.n_min)]) - mass * double(kPmfTotal));
            CHECK(ulp_err <= 1.0 + 1e-6);
        }
    }
}

TEST_CASE("discretize: support overflow is refused") {
    DensityFixture f;
    // brutally widen the density by scaling down the first-stage weight
    const int idx = f.store.find("prior/w0");
    f.store[idx].value.fill(-13.0); // softplus -> ~2e-6, density spread over ~1e6 bins
    CHECK_THROWS_AS((void)f.model.discretize(f.store, 4096), CoderError);
}

TEST_CASE("shared density mode uses one table set for all channels") {
    DensityFixture f(8, 22, /*per_channel=*/false);
    CHECK(f.model.n_densities() == 1);
    CHECK(f.model.density_index(5) == 0);
    const auto tables = f.model.discretize(f.store);
    REQUIRE(tables.size() == 8);
    CHECK(tables[0].freq == tables[7].freq);
}
