#include "cmc/nn.hpp"

#include <cmath>

namespace cmc {

Leafs register_params(Graph& g, const ParamStore& store, bool train) {
    Leafs l;
    l.ids.reserve(store.size());
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& e = store[static_cast<int>(i)];
        l.ids.push_back(g.leaf(e.value, train && e.trainable));
    }
    return l;
}

ParamStore rounded_to_f32(const ParamStore& store) {
    ParamStore out = store;
    for (size_t i = 0; i < out.size(); ++i)
        for (double& v : out[static_cast<int>(i)].value.data) v = round_f32(v);
    return out;
}

void Adam::step(ParamStore& store, Graph& g, const Leafs& leafs) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t i = 0; i < store.size(); ++i) {
        auto& e = store[static_cast<int>(i)];
        if (!e.trainable) continue;
        const NodeId id = leafs.ids[i];
        if (!g.has_grad(id)) continue; // parameter unused by this loss
        const Tensor& grad = g.grad(id);
        if (e.m.data.empty()) {
            e.m = Tensor::zeros(e.value.shape);
            e.v = Tensor::zeros(e.value.shape);
        }
        for (int64_t k = 0; k < e.value.numel(); ++k) {
            const double gk = grad[k];
            e.m[k] = cfg_.beta1 * e.m[k] + (1.0 - cfg_.beta1) * gk;
            e.v[k] = cfg_.beta2 * e.v[k] + (1.0 - cfg_.beta2) * gk * gk;
            const double mhat = e.m[k] / bc1;
            const double vhat = e.v[k] / bc2;
            e.value[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

Conv2d Conv2d::create(ParamStore& s, const std::string& name, int in_ch, int out_ch, int k,
                      int stride, Rng& rng, bool transposed, bool zero_init) {
    Conv2d c;
    c.stride = stride;
    c.transposed = transposed;
    // weight layout: forward conv [out,in,k,k]; transposed (adjoint) [in,out,k,k]
    std::vector<int64_t> wshape = transposed
        ? std::vector<int64_t>{in_ch, out_ch, k, k}
        : std::vector<int64_t>{out_ch, in_ch, k, k};
    const double stddev = std::sqrt(2.0 / (double(in_ch) * k * k));
    Tensor w = zero_init ? Tensor::zeros(wshape) : Tensor::randn(wshape, rng, stddev);
    c.w = s.add(name + "/w", std::move(w));
    c.b = s.add(name + "/b", Tensor::zeros({out_ch}));
    return c;
}

BatchNorm BatchNorm::create(ParamStore& s, const std::string& name, int channels) {
    BatchNorm bn;
    bn.gamma = s.add(name + "/gamma", Tensor::full({channels}, 1.0));
    bn.beta = s.add(name + "/beta", Tensor::zeros({channels}));
    bn.run_mean = s.add(name + "/running_mean", Tensor::zeros({channels}), /*trainable=*/false);
    bn.run_var = s.add(name + "/running_var", Tensor::full({channels}, 1.0), /*trainable=*/false);
    return bn;
}

PRelu PRelu::create(ParamStore& s, const std::string& name, int channels, double init_slope) {
    PRelu p;
    p.slope = s.add(name + "/slope", Tensor::full({channels}, init_slope));
    return p;
}

} // namespace cmc
