#pragma once

#include <functional>

#include "cmc/nn.hpp"

namespace cmc::testutil {

inline double rel_err(double a, double b) {
    const double diff = std::abs(a - b);
    if (diff < 1e-10) return 0.0;
    return diff / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central finite-difference check of every trainable parameter in the store
// against the tape gradients. `build` must construct the scalar loss from
// scratch (fresh leaves each call). Returns the worst relative error over the
// sampled coordinates, ignoring differences below the cancellation noise of
// the difference quotient itself (~eps * |f| / h).
inline double fd_max_rel_error(ParamStore& store,
                               const std::function<NodeId(Graph&, const Leafs&)>& build,
                               int samples_per_param, double h, Rng& rng) {
    // analytic gradients
    Graph g;
    Leafs l = register_params(g, store, true);
    NodeId loss = build(g, l);
    g.backward(loss);
    std::vector<Tensor> grads(store.size());
    for (size_t i = 0; i < store.size(); ++i) {
        const NodeId id = l.ids[i];
        grads[i] = g.has_grad(id) ? g.grad(id) : Tensor::zeros(store[int(i)].value.shape);
    }
    const double f0 = g.value(loss)[0];
    const double noise_floor = 50.0 * 2.3e-16 * std::max(1.0, std::abs(f0)) / h;

    auto eval = [&]() {
        Graph gg;
        Leafs ll = register_params(gg, store, true);
        return gg.value(build(gg, ll))[0];
    };

    double worst = 0.0;
    for (size_t i = 0; i < store.size(); ++i) {
        auto& e = store[int(i)];
        if (!e.trainable) continue;
        const int64_t n = e.value.numel();
        for (int s = 0; s < samples_per_param && s < n; ++s) {
            const int64_t k = n <= samples_per_param ? s : int64_t(rng.below(uint64_t(n)));
            const double saved = e.value[k];
            e.value[k] = saved + h;
            const double up = eval();
            e.value[k] = saved - h;
            const double dn = eval();
            e.value[k] = saved;
            const double fd = (up - dn) / (2.0 * h);
            if (std::abs(grads[i][k] - fd) < noise_floor) continue;
            worst = std::max(worst, rel_err(grads[i][k], fd));
        }
    }
    return worst;
}

} // namespace cmc::testutil
