#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cmc/graph.hpp"

namespace cmc {

// Named parameter table. Models hold indices into a store; each training step
// registers every entry as a graph leaf, and the optimizer reads gradients
// back from the tape.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        bool trainable = true;
        // Adam state, lazily sized
        Tensor m, v;
    };

    int add(std::string name, Tensor value, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        index_[name] = static_cast<int>(entries_.size());
        entries_.push_back({std::move(name), std::move(value), trainable, {}, {}});
        return static_cast<int>(entries_.size()) - 1;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    Entry& operator[](int i) { return entries_[static_cast<size_t>(i)]; }
    const Entry& operator[](int i) const { return entries_[static_cast<size_t>(i)]; }

    size_t size() const { return entries_.size(); }

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Leaf ids for one graph instantiation of a store. Trainable entries become
// grad-requiring leaves; others are constants.
struct Leafs {
    std::vector<NodeId> ids;
    NodeId operator[](int param) const { return ids[static_cast<size_t>(param)]; }
};

Leafs register_params(Graph& g, const ParamStore& store, bool train);

// Copy of the store with every value passed through float32, the checkpoint
// storage precision. Coding tables are always derived from this image so that
// encoders and decoders agree across save/load.
ParamStore rounded_to_f32(const ParamStore& store);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // applies one update from the gradients left on the tape
    void step(ParamStore& store, Graph& g, const Leafs& leafs);

    int64_t t() const { return t_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

// ---- layers ----

struct Conv2d {
    int w = -1, b = -1;
    int stride = 1;
    bool transposed = false;

    static Conv2d create(ParamStore& s, const std::string& name, int in_ch, int out_ch, int k,
                         int stride, Rng& rng, bool transposed = false, bool zero_init = false);

    NodeId apply(Graph& g, const Leafs& l, NodeId x) const {
        return transposed ? op_conv2d_transposed(g, x, l[w], l[b], stride)
                          : op_conv2d(g, x, l[w], l[b], stride);
    }
};

struct BatchNorm {
    int gamma = -1, beta = -1, run_mean = -1, run_var = -1;
    double eps = 1e-5;
    double momentum = 0.1;

    static BatchNorm create(ParamStore& s, const std::string& name, int channels);

    NodeId apply(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const {
        return op_batch_norm(g, x, l[gamma], l[beta], s[run_mean].value, s[run_var].value, train,
                             eps, momentum);
    }
};

struct PRelu {
    int slope = -1;

    static PRelu create(ParamStore& s, const std::string& name, int channels,
                        double init_slope = 0.25);

    NodeId apply(Graph& g, const Leafs& l, NodeId x) const { return op_prelu(g, x, l[slope]); }
};

} // namespace cmc
