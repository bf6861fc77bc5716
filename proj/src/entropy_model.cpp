#include "cmc/entropy_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cmc {

struct FactorizedEntropyModel::Dense {
    // transformed (positive) weights, biases, gating factors
    double w[kStages][kHidden][kHidden];
    double b[kStages][kHidden];
    double a[kStages - 1][kHidden];
};

namespace {

constexpr int kH = FactorizedEntropyModel::kHidden;

// stage output/input widths for the (1,3,3,3,1)-shaped composition
constexpr int kOut[4] = {kH, kH, kH, 1};
constexpr int kIn[4] = {1, kH, kH, kH};

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// forward chain; z[k][*] receive the pre-activation values per stage
double chain_logit(const FactorizedEntropyModel::Dense& dense, double x, double z[4][kH]) {
    double u[kH] = {x, 0.0, 0.0};
    int u_len = 1;
    for (int k = 0; k < 4; ++k) {
        double znew[kH];
        for (int o = 0; o < kOut[k]; ++o) {
            double acc = dense.b[k][o];
            for (int i = 0; i < u_len; ++i) acc += dense.w[k][o][i] * u[i];
            znew[o] = acc;
        }
        for (int o = 0; o < kOut[k]; ++o) z[k][o] = znew[o];
        if (k < 3) {
            for (int o = 0; o < kOut[k]; ++o) {
                const double t = std::tanh(znew[o]);
                u[o] = znew[o] + dense.a[k][o] * t;
            }
            u_len = kOut[k];
        }
    }
    return z[3][0];
}

struct ChainGrads {
    // gradients w.r.t. transformed parameters, accumulated per density
    double gw[4][kH][kH];
    double gb[4][kH];
    double ga[3][kH];
    double gx;
};

// reverse pass through one chain evaluation; g_logit is d(out)/d(z3)
void chain_backward(const FactorizedEntropyModel::Dense& dense, double x, const double z[4][kH],
                    double g_logit, ChainGrads& g) {
    // recompute stage inputs u_k
    double u[4][kH];
    u[0][0] = x;
    for (int k = 0; k < 3; ++k)
        for (int o = 0; o < kOut[k]; ++o) {
            const double t = std::tanh(z[k][o]);
            u[k + 1][o] = z[k][o] + dense.a[k][o] * t;
        }
    double gz[kH] = {g_logit, 0.0, 0.0};
    for (int k = 3; k >= 0; --k) {
        double gu[kH] = {0.0, 0.0, 0.0};
        for (int o = 0; o < kOut[k]; ++o) {
            g.gb[k][o] += gz[o];
            for (int i = 0; i < kIn[k]; ++i) {
                g.gw[k][o][i] += gz[o] * u[k][i];
                gu[i] += dense.w[k][o][i] * gz[o];
            }
        }
        if (k == 0) {
            g.gx += gu[0];
            break;
        }
        for (int o = 0; o < kOut[k - 1]; ++o) {
            const double t = std::tanh(z[k - 1][o]);
            g.ga[k - 1][o] += gu[o] * t;
            gz[o] = gu[o] * (1.0 + dense.a[k - 1][o] * (1.0 - t * t));
        }
    }
}

// bin mass evaluated on the non-saturating side of the sigmoid
double bin_mass(double logit_lo, double logit_hi) {
    if (logit_lo + logit_hi <= 0.0) return sigmoid(logit_hi) - sigmoid(logit_lo);
    return sigmoid(-logit_lo) - sigmoid(-logit_hi);
}

} // namespace

FactorizedEntropyModel FactorizedEntropyModel::create(ParamStore& store,
                                                      const std::string& prefix,
                                                      int latent_channels, bool per_channel,
                                                      Rng& rng, double init_scale) {
    FactorizedEntropyModel m;
    m.latent_channels_ = latent_channels;
    m.per_channel_ = per_channel;
    m.n_dens_ = per_channel ? latent_channels : 1;
    const double scale = std::pow(init_scale, 1.0 / double(kStages));
    for (int k = 0; k < kStages; ++k) {
        const double w_init = std::log(std::expm1(1.0 / (scale * double(kOut[k]))));
        Tensor w = Tensor::full({m.n_dens_, kOut[k], kIn[k]}, w_init);
        Tensor b({m.n_dens_, kOut[k]});
        for (double& v : b.data) v = rng.uniform(-0.5, 0.5);
        m.w_[k] = store.add(prefix + "/w" + std::to_string(k), std::move(w));
        m.b_[k] = store.add(prefix + "/b" + std::to_string(k), std::move(b));
        if (k < kStages - 1)
            m.a_[k] =
                store.add(prefix + "/a" + std::to_string(k), Tensor::zeros({m.n_dens_, kOut[k]}));
    }
    return m;
}

std::vector<int> FactorizedEntropyModel::param_handles() const {
    std::vector<int> h;
    for (int k = 0; k < kStages; ++k) {
        h.push_back(w_[k]);
        h.push_back(b_[k]);
        if (k < kStages - 1) h.push_back(a_[k]);
    }
    return h;
}

std::vector<FactorizedEntropyModel::Dense>
FactorizedEntropyModel::transformed(const ParamStore& s) const {
    std::vector<Dense> out(static_cast<size_t>(n_dens_));
    for (int d = 0; d < n_dens_; ++d) {
        Dense& t = out[static_cast<size_t>(d)];
        for (int k = 0; k < kStages; ++k) {
            const Tensor& w = s[w_[k]].value;
            const Tensor& b = s[b_[k]].value;
            for (int o = 0; o < kOut[k]; ++o) {
                for (int i = 0; i < kIn[k]; ++i)
                    t.w[k][o][i] = softplus(w[(int64_t(d) * kOut[k] + o) * kIn[k] + i]);
                t.b[k][o] = b[int64_t(d) * kOut[k] + o];
            }
            if (k < kStages - 1) {
                const Tensor& a = s[a_[k]].value;
                for (int o = 0; o < kOut[k]; ++o) t.a[k][o] = std::tanh(a[int64_t(d) * kOut[k] + o]);
            }
        }
    }
    return out;
}

double FactorizedEntropyModel::logit(const ParamStore& s, int channel, double x) const {
    const auto dense = transformed(s);
    double z[4][kHidden];
    return chain_logit(dense[static_cast<size_t>(density_index(channel))], x, z);
}

double FactorizedEntropyModel::cdf(const ParamStore& s, int channel, double x) const {
    return sigmoid(logit(s, channel, x));
}

double FactorizedEntropyModel::pdf(const ParamStore& s, int channel, double x) const {
    const auto dense = transformed(s);
    const Dense& t = dense[static_cast<size_t>(density_index(channel))];
    double z[4][kHidden];
    const double lg = chain_logit(t, x, z);
    // product of stage Jacobians, starting from du0/dx = 1
    double j[kHidden] = {1.0, 0.0, 0.0};
    int len = 1;
    for (int k = 0; k < kStages; ++k) {
        double jn[kHidden] = {0.0, 0.0, 0.0};
        for (int o = 0; o < kOut[k]; ++o)
            for (int i = 0; i < len; ++i) jn[o] += t.w[k][o][i] * j[i];
        if (k < kStages - 1) {
            for (int o = 0; o < kOut[k]; ++o) {
                const double th = std::tanh(z[k][o]);
                jn[o] *= 1.0 + t.a[k][o] * (1.0 - th * th);
            }
        }
        for (int o = 0; o < kOut[k]; ++o) j[o] = jn[o];
        len = kOut[k];
    }
    const double sg = sigmoid(lg);
    return sg * (1.0 - sg) * j[0];
}

double FactorizedEntropyModel::bin_bits(const ParamStore& s, int channel, double center) const {
    const auto dense = transformed(s);
    const Dense& t = dense[static_cast<size_t>(density_index(channel))];
    double z[4][kHidden];
    const double lo = chain_logit(t, center - 0.5, z);
    const double hi = chain_logit(t, center + 0.5, z);
    const double p = std::max(bin_mass(lo, hi), kMinProb);
    return -std::log2(p);
}

NodeId FactorizedEntropyModel::nll_bits_node(Graph& g, const Leafs& leafs, NodeId latent) const {
    const Tensor& lat = g.value(latent);
    if (lat.ndim() != 4 || lat.dim(1) != latent_channels_)
        throw std::invalid_argument("nll_bits: latent shape does not match model channels");

    // Build the transformed parameter set from the graph leaves so gradients
    // match the exact values used forward.
    std::vector<Dense> dense(static_cast<size_t>(n_dens_));
    auto leaf_tensor = [&](int handle) -> const Tensor& { return g.value(leafs[handle]); };
    for (int d = 0; d < n_dens_; ++d) {
        Dense& t = dense[static_cast<size_t>(d)];
        for (int k = 0; k < kStages; ++k) {
            const Tensor& w = leaf_tensor(w_[k]);
            const Tensor& b = leaf_tensor(b_[k]);
            for (int o = 0; o < kOut[k]; ++o) {
                for (int i = 0; i < kIn[k]; ++i)
                    t.w[k][o][i] = softplus(w[(int64_t(d) * kOut[k] + o) * kIn[k] + i]);
                t.b[k][o] = b[int64_t(d) * kOut[k] + o];
            }
            if (k < kStages - 1) {
                const Tensor& a = leaf_tensor(a_[k]);
                for (int o = 0; o < kOut[k]; ++o) t.a[k][o] = std::tanh(a[int64_t(d) * kOut[k] + o]);
            }
        }
    }

    const int64_t N = lat.dim(0), C = lat.dim(1), HW = lat.dim(2) * lat.dim(3);
    double total_bits = 0.0;
    int64_t clamped = 0;
    {
        double z[4][kHidden];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const Dense& t = dense[static_cast<size_t>(density_index(static_cast<int>(c)))];
                const double* row = &lat.data[(n * C + c) * HW];
                for (int64_t i = 0; i < HW; ++i) {
                    const double lo = chain_logit(t, row[i] - 0.5, z);
                    const double hi = chain_logit(t, row[i] + 0.5, z);
                    double p = bin_mass(lo, hi);
                    if (p < kMinProb) {
                        p = kMinProb;
                        ++clamped;
                    }
                    total_bits += -std::log2(p);
                }
            }
    }
    *underflows_ += clamped;

    std::vector<NodeId> parents = {latent};
    for (int h : param_handles()) parents.push_back(leafs[h]);
    bool ng = g.needs_grad(latent);
    for (int h : param_handles()) ng = ng || g.needs_grad(leafs[h]);

    auto model = *this;
    return g.push(Tensor::scalar(total_bits), ng, std::move(parents),
                  [latent, model, dense = std::move(dense), leafs](Graph& gg, NodeId self) {
                      model.nll_backward(gg, self, latent, leafs, dense);
                  });
}

void FactorizedEntropyModel::nll_backward(Graph& g, NodeId self, NodeId latent,
                                          const Leafs& leafs,
                                          const std::vector<Dense>& dense) const {
    const double g_self = g.grad(self)[0];
    if (g_self == 0.0) return;
    const Tensor& lat = g.value(latent);
    const int64_t N = lat.dim(0), C = lat.dim(1), HW = lat.dim(2) * lat.dim(3);
    const bool want_latent = g.needs_grad(latent);
    bool want_params = false;
    for (int h : param_handles()) want_params = want_params || g.needs_grad(leafs[h]);
    if (!want_latent && !want_params) return;

    constexpr double kInvLn2 = 1.4426950408889634;
    std::vector<ChainGrads> acc(static_cast<size_t>(n_dens_));
    std::memset(acc.data(), 0, acc.size() * sizeof(ChainGrads));

    Tensor* glat = want_latent ? &g.grad(latent) : nullptr;
    double z_lo[4][kHidden], z_hi[4][kHidden];
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const int d = density_index(static_cast<int>(c));
            const Dense& t = dense[static_cast<size_t>(d)];
            const double* row = &lat.data[(n * C + c) * HW];
            for (int64_t i = 0; i < HW; ++i) {
                const double lo = chain_logit(t, row[i] - 0.5, z_lo);
                const double hi = chain_logit(t, row[i] + 0.5, z_hi);
                const double p = bin_mass(lo, hi);
                if (p < kMinProb) continue; // clamped region carries no gradient
                const double dbits_dp = -g_self * kInvLn2 / p;
                const double s_hi = sigmoid(hi), s_lo = sigmoid(lo);
                ChainGrads& a = acc[static_cast<size_t>(d)];
                const double gx_before = a.gx;
                chain_backward(t, row[i] + 0.5, z_hi, dbits_dp * s_hi * (1.0 - s_hi), a);
                chain_backward(t, row[i] - 0.5, z_lo, -dbits_dp * s_lo * (1.0 - s_lo), a);
                if (want_latent)
                    glat->data[static_cast<size_t>((n * C + c) * HW + i)] += a.gx - gx_before;
            }
        }

    if (!want_params) return;
    // push transformed-parameter gradients back through the constraints
    for (int k = 0; k < kStages; ++k) {
        const bool gw_needed = g.needs_grad(leafs[w_[k]]);
        const bool gb_needed = g.needs_grad(leafs[b_[k]]);
        const bool ga_needed = k < kStages - 1 && g.needs_grad(leafs[a_[k]]);
        for (int d = 0; d < n_dens_; ++d) {
            const Dense& t = dense[static_cast<size_t>(d)];
            const ChainGrads& a = acc[static_cast<size_t>(d)];
            if (gw_needed) {
                Tensor& gw = g.grad(leafs[w_[k]]);
                for (int o = 0; o < kOut[k]; ++o)
                    for (int i = 0; i < kIn[k]; ++i) {
                        // d softplus(raw)/d raw = sigmoid(raw) = 1 - exp(-softplus(raw))
                        const double dsoft = 1.0 - std::exp(-t.w[k][o][i]);
                        gw[(int64_t(d) * kOut[k] + o) * kIn[k] + i] += a.gw[k][o][i] * dsoft;
                    }
            }
            if (gb_needed) {
                Tensor& gb = g.grad(leafs[b_[k]]);
                for (int o = 0; o < kOut[k]; ++o) gb[int64_t(d) * kOut[k] + o] += a.gb[k][o];
            }
            if (ga_needed) {
                Tensor& ga = g.grad(leafs[a_[k]]);
                for (int o = 0; o < kOut[k]; ++o) {
                    const double dtanh = 1.0 - t.a[k][o] * t.a[k][o];
                    ga[int64_t(d) * kOut[k] + o] += a.ga[k][o] * dtanh;
                }
            }
        }
    }
}

std::vector<PmfTable> FactorizedEntropyModel::discretize(const ParamStore& s,
                                                         int max_support_width) const {
    const auto dense = transformed(s);
    std::vector<PmfTable> tables(static_cast<size_t>(latent_channels_));
    constexpr double kTailEachSide = 5e-7; // keeps >= 1 - 1e-6 of mass in support

    for (int c = 0; c < latent_channels_; ++c) {
        const Dense& t = dense[static_cast<size_t>(density_index(c))];
        double z[4][kHidden];
        auto cdf_at = [&](double x) { return sigmoid(chain_logit(t, x, z)); };

        // locate the median by bisection, then grow the integer support
        double lo = -1e7, hi = 1e7;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            (cdf_at(mid) < 0.5 ? lo : hi) = mid;
        }
        int32_t n_min = static_cast<int32_t>(std::floor(0.5 * (lo + hi)));
        int32_t n_max = n_min;
        while (cdf_at(double(n_min) - 0.5) > kTailEachSide) {
            --n_min;
            if (n_max - n_min >= max_support_width)
                throw CoderError("pmf: support overflow beyond configured max width");
        }
        while (1.0 - cdf_at(double(n_max) + 0.5) > kTailEachSide) {
            ++n_max;
            if (n_max - n_min >= max_support_width)
                throw CoderError("pmf: support overflow beyond configured max width");
        }

        const int32_t width = n_max - n_min + 1;
        std::vector<double> mass(static_cast<size_t>(width) + 1, 0.0);
        for (int32_t n = n_min; n <= n_max; ++n) {
            const double l0 = chain_logit(t, double(n) - 0.5, z);
            const double l1 = chain_logit(t, double(n) + 0.5, z);
            mass[static_cast<size_t>(n - n_min)] = std::max(bin_mass(l0, l1), 0.0);
        }
        double in_support = 0.0;
        for (int32_t i = 0; i < width; ++i) in_support += mass[static_cast<size_t>(i)];
        mass[static_cast<size_t>(width)] = std::max(1.0 - in_support, 0.0); // escape

        // Fixed-point support counts are the rounded shares clamped to >= 1,
        // which keeps each one within one ulp of the cdf difference. The
        // escape symbol absorbs the residual so the total is exactly 2^16; if
        // the clamps over-subscribe it, counts are taken back from the most
        // over-allocated entries.
        const size_t n_support = static_cast<size_t>(width);
        std::vector<uint32_t> freq(n_support, 0);
        std::vector<double> share(n_support, 0.0);
        int64_t assigned = 0;
        for (size_t i = 0; i < n_support; ++i) {
            share[i] = mass[i] * double(kPmfTotal);
            uint32_t f = static_cast<uint32_t>(std::llround(share[i]));
            if (f < 1) f = 1;
            freq[i] = f;
            assigned += f;
        }
        while (assigned > int64_t(kPmfTotal) - 1) {
            size_t arg = n_support;
            double best = -1e300;
            for (size_t i = 0; i < n_support; ++i) {
                if (freq[i] <= 1) continue;
                const double over = double(freq[i]) - share[i];
                if (over > best) {
                    best = over;
                    arg = i;
                }
            }
            if (arg == n_support) throw CoderError("pmf: cannot satisfy fixed-point total");
            freq[arg] -= 1;
            --assigned;
        }

        PmfTable& table = tables[static_cast<size_t>(c)];
        table.n_min = n_min;
        table.n_max = n_max;
        table.escape_freq = static_cast<uint32_t>(int64_t(kPmfTotal) - assigned);
        table.freq = std::move(freq);
        table.finalize();
    }
    return tables;
}

double binned_gaussian_entropy_bits(double sigma) {
    auto phi = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
    double h = 0.0;
    const int span = static_cast<int>(std::ceil(20.0 * sigma)) + 2;
    for (int n = -span; n <= span; ++n) {
        const double p = phi((double(n) + 0.5) / sigma) - phi((double(n) - 0.5) / sigma);
        if (p > 0.0) h -= p * std::log2(p);
    }
    return h;
}

} // namespace cmc
