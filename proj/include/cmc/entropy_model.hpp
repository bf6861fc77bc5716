#pragma once

#include <memory>
#include <vector>

#include "cmc/nn.hpp"
#include "cmc/range_coder.hpp"

namespace cmc {

// Learned factorized prior over latent values. Each density is a univariate
// CDF built from a 4-stage composition of constrained affine maps: weights go
// through softplus and gating factors through tanh, which keeps the composite
// monotone with limits 0 and 1. During training it scores noise-relaxed
// latents; at test time it is discretized into fixed-point coding tables.
class FactorizedEntropyModel {
public:
    static constexpr int kStages = 4;
    static constexpr int kHidden = 3;
    static constexpr double kMinProb = 5.421010862427522e-20; // 2^-64

    FactorizedEntropyModel() = default;

    static FactorizedEntropyModel create(ParamStore& store, const std::string& prefix,
                                         int latent_channels, bool per_channel, Rng& rng,
                                         double init_scale = 10.0);

    int latent_channels() const { return latent_channels_; }
    int n_densities() const { return n_dens_; }
    int density_index(int channel) const { return per_channel_ ? channel : 0; }

    // pre-sigmoid logit of the CDF; cdf(x) = sigmoid(logit(x))
    double logit(const ParamStore& s, int channel, double x) const;
    double cdf(const ParamStore& s, int channel, double x) const;
    double pdf(const ParamStore& s, int channel, double x) const;

    // -log2 of the integer-bin mass around `center`, clamped at 2^-64
    double bin_bits(const ParamStore& s, int channel, double center) const;

    // Total code length estimate in bits of a (noisy or quantized) latent
    // tensor [N,C,H,W], as a graph node differentiable in both the latent and
    // the density parameters.
    NodeId nll_bits_node(Graph& g, const Leafs& leafs, NodeId latent) const;

    // Number of probability clamps hit by nll_bits_node since construction.
    int64_t underflow_count() const { return *underflows_; }

    // Freeze into per-channel fixed-point tables for the range coder. Support
    // is grown until at most 1e-6 of mass is left outside; wider supports than
    // max_support_width are refused.
    std::vector<PmfTable> discretize(const ParamStore& s, int max_support_width = 4096) const;

    std::vector<int> param_handles() const;

public:
    struct Dense; // transformed per-density parameters

private:
    std::vector<Dense> transformed(const ParamStore& s) const;

    void nll_backward(Graph& g, NodeId self, NodeId latent, const Leafs& leafs,
                      const std::vector<Dense>& dense) const;

    int latent_channels_ = 0;
    int n_dens_ = 0;
    bool per_channel_ = true;
    int w_[kStages] = {-1, -1, -1, -1};
    int b_[kStages] = {-1, -1, -1, -1};
    int a_[kStages - 1] = {-1, -1, -1};
    std::shared_ptr<int64_t> underflows_ = std::make_shared<int64_t>(0);
};

// Entropy in bits/symbol of an integer-binned zero-mean Gaussian, used as a
// reference value in tests.
double binned_gaussian_entropy_bits(double sigma);

} // namespace cmc
