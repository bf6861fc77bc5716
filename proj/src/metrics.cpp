#include "cmc/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace cmc {

namespace {

double sq_norm(const ChannelMatrix& m) {
    double s = 0.0;
    for (const cplx& v : m.data) s += std::norm(v);
    return s;
}

void check_pair(const ChannelMatrix& a, const ChannelMatrix& b) {
    if (a.n_c != b.n_c || a.n_t != b.n_t || a.data.size() != b.data.size())
        throw MetricError("metrics: shape mismatch between reference and reconstruction");
}

} // namespace

Nmse nmse_single(const ChannelMatrix& ref, const ChannelMatrix& rec) {
    check_pair(ref, rec);
    const double denom = sq_norm(ref);
    if (denom <= 0.0) throw MetricError("nmse: reference has zero norm");
    double err = 0.0;
    for (size_t i = 0; i < ref.data.size(); ++i) err += std::norm(ref.data[i] - rec.data[i]);
    Nmse out;
    out.linear = err / denom;
    out.db = out.linear > 0.0 ? 10.0 * std::log10(out.linear) : -100.0;
    if (out.db < -100.0) out.db = -100.0;
    return out;
}

Nmse nmse(const std::vector<ChannelMatrix>& ref, const std::vector<ChannelMatrix>& rec) {
    if (ref.size() != rec.size() || ref.empty())
        throw MetricError("nmse: need equally sized, non-empty datasets");
    double acc = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) acc += nmse_single(ref[i], rec[i]).linear;
    Nmse out;
    out.linear = acc / double(ref.size());
    out.db = out.linear > 0.0 ? 10.0 * std::log10(out.linear) : -100.0;
    if (out.db < -100.0) out.db = -100.0;
    return out;
}

double rho_single(const ChannelMatrix& ref, const ChannelMatrix& rec) {
    check_pair(ref, rec);
    double acc = 0.0;
    for (int n = 0; n < ref.n_c; ++n) {
        cplx dot(0.0, 0.0);
        double nr = 0.0, nc = 0.0;
        for (int t = 0; t < ref.n_t; ++t) {
            // conj(rec) * ref, per subcarrier row
            dot += std::conj(rec.at(n, t)) * ref.at(n, t);
            nr += std::norm(ref.at(n, t));
            nc += std::norm(rec.at(n, t));
        }
        if (nr <= 0.0 || nc <= 0.0)
            throw MetricError("rho: zero-norm subcarrier row at index " + std::to_string(n));
        acc += std::abs(dot) / std::sqrt(nr * nc);
    }
    return acc / double(ref.n_c);
}

double rho(const std::vector<ChannelMatrix>& ref, const std::vector<ChannelMatrix>& rec) {
    if (ref.size() != rec.size() || ref.empty())
        throw MetricError("rho: need equally sized, non-empty datasets");
    double acc = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) acc += rho_single(ref[i], rec[i]);
    return acc / double(ref.size());
}

std::vector<Cluster> cluster_users(const std::vector<std::pair<double, double>>& positions,
                                   double threshold_m) {
    const int n = static_cast<int>(positions.size());
    std::vector<std::vector<int>> groups;
    for (int i = 0; i < n; ++i) groups.push_back({i});

    auto dist = [&](int a, int b) {
        const double dx = positions[size_t(a)].first - positions[size_t(b)].first;
        const double dy = positions[size_t(a)].second - positions[size_t(b)].second;
        return std::sqrt(dx * dx + dy * dy);
    };
    // complete-linkage distance so the pairwise bound holds by construction
    auto group_dist = [&](const std::vector<int>& a, const std::vector<int>& b) {
        double d = 0.0;
        for (int i : a)
            for (int j : b) d = std::max(d, dist(i, j));
        return d;
    };

    for (;;) {
        double best = threshold_m;
        int bi = -1, bj = -1;
        for (size_t i = 0; i < groups.size(); ++i)
            for (size_t j = i + 1; j < groups.size(); ++j) {
                if (groups[i].size() + groups[j].size() > 3) continue;
                const double d = group_dist(groups[i], groups[j]);
                if (d <= best) {
                    best = d;
                    bi = static_cast<int>(i);
                    bj = static_cast<int>(j);
                }
            }
        if (bi < 0) break;
        groups[size_t(bi)].insert(groups[size_t(bi)].end(), groups[size_t(bj)].begin(),
                                  groups[size_t(bj)].end());
        groups.erase(groups.begin() + bj);
    }

    std::vector<Cluster> out;
    for (auto& g : groups) {
        std::sort(g.begin(), g.end());
        Cluster c;
        c.members = g;
        for (int i : g) {
            c.centroid_x += positions[size_t(i)].first;
            c.centroid_y += positions[size_t(i)].second;
        }
        c.centroid_x /= double(g.size());
        c.centroid_y /= double(g.size());
        out.push_back(std::move(c));
    }
    std::sort(out.begin(), out.end(),
              [](const Cluster& a, const Cluster& b) { return a.members[0] < b.members[0]; });
    return out;
}

EvalResult evaluate(const SingleUserModel& model, const std::vector<ChannelMatrix>& data) {
    if (data.empty()) throw MetricError("evaluate: empty dataset");
    const ParamStore frozen = rounded_to_f32(model.store);
    std::vector<ChannelMatrix> recon;
    recon.reserve(data.size());
    double payload_bits = 0.0, entropy_bits = 0.0;
    int64_t entries = 0;
    for (const ChannelMatrix& h : data) {
        const Bitstream bs = compress(model, h);
        recon.push_back(decompress(model, bs));
        payload_bits += double(bs.payload_bit_len);
        entries += int64_t(h.n_c) * h.n_t;
        if (model.cfg.entropy_coding) {
            const Tensor q = quantize(encode_features(model, h));
            const int64_t hw = q.dim(2) * q.dim(3);
            for (int64_t c = 0; c < q.dim(1); ++c)
                for (int64_t i = 0; i < hw; ++i)
                    entropy_bits += model.prior.bin_bits(frozen, static_cast<int>(c),
                                                         q.data[size_t(c * hw + i)]);
        } else {
            entropy_bits += double(bs.payload_bit_len);
        }
    }
    EvalResult r;
    r.lambda = model.lambda;
    r.payload_bpe = payload_bits / double(entries);
    r.rate_bpe = (payload_bits + kLambdaHeaderBits * double(data.size())) / double(entries);
    r.entropy_bpe = entropy_bits / double(entries);
    r.nmse = nmse(data, recon);
    r.rho = rho(data, recon);
    return r;
}

EvalResult evaluate_joint(const MultiUserModel& model,
                          const std::vector<std::vector<ChannelMatrix>>& per_user) {
    if (static_cast<int>(per_user.size()) != model.n_users)
        throw MetricError("evaluate: dataset count does not match user count");
    const size_t count = per_user[0].size();
    if (count == 0) throw MetricError("evaluate: empty dataset");
    for (const auto& d : per_user)
        if (d.size() != count) throw MetricError("evaluate: user datasets must be aligned");

    const ParamStore frozen = rounded_to_f32(model.store);
    const int K = model.n_users;
    std::vector<std::vector<ChannelMatrix>> recon(static_cast<size_t>(K));
    std::vector<double> payload_bits(static_cast<size_t>(K), 0.0);
    std::vector<double> entropy_bits(static_cast<size_t>(K), 0.0);
    int64_t entries_per_user = 0;

    for (size_t i = 0; i < count; ++i) {
        std::vector<Bitstream> streams;
        for (int k = 0; k < K; ++k) {
            const ChannelMatrix& h = per_user[size_t(k)][i];
            Bitstream bs = compress_user(model, k, h);
            payload_bits[size_t(k)] += double(bs.payload_bit_len);
            if (model.cfg.entropy_coding) {
                Graph g;
                auto& store = const_cast<ParamStore&>(model.store);
                Leafs l = register_params(g, store, false);
                NodeId x = g.constant(split_complex(h));
                const Tensor q =
                    quantize(g.value(model.enc[size_t(k)].apply(g, l, store, x, false)));
                const int64_t hw = q.dim(2) * q.dim(3);
                for (int64_t c = 0; c < q.dim(1); ++c)
                    for (int64_t j = 0; j < hw; ++j)
                        entropy_bits[size_t(k)] += model.priors[size_t(k)].bin_bits(
                            frozen, static_cast<int>(c), q.data[size_t(c * hw + j)]);
            } else {
                entropy_bits[size_t(k)] += double(bs.payload_bit_len);
            }
            streams.push_back(std::move(bs));
        }
        std::vector<ChannelMatrix> outs = decompress_joint(model, streams);
        for (int k = 0; k < K; ++k) recon[size_t(k)].push_back(std::move(outs[size_t(k)]));
        if (i == 0)
            entries_per_user = int64_t(per_user[0][0].n_c) * per_user[0][0].n_t *
                               static_cast<int64_t>(count);
    }

    EvalResult total;
    double lin = 0.0, rh = 0.0;
    for (int k = 0; k < K; ++k) {
        EvalResult r;
        r.lambda = model.lambdas[size_t(k)];
        r.payload_bpe = payload_bits[size_t(k)] / double(entries_per_user);
        r.rate_bpe = (payload_bits[size_t(k)] + kLambdaHeaderBits * double(count)) /
                     double(entries_per_user);
        r.entropy_bpe = entropy_bits[size_t(k)] / double(entries_per_user);
        r.nmse = nmse(per_user[size_t(k)], recon[size_t(k)]);
        r.rho = rho(per_user[size_t(k)], recon[size_t(k)]);
        total.per_user.push_back(r);
        total.payload_bpe += r.payload_bpe / double(K);
        total.rate_bpe += r.rate_bpe / double(K);
        total.entropy_bpe += r.entropy_bpe / double(K);
        lin += r.nmse.linear / double(K);
        rh += r.rho / double(K);
    }
    total.nmse.linear = lin;
    total.nmse.db = lin > 0.0 ? std::max(10.0 * std::log10(lin), -100.0) : -100.0;
    total.rho = rh;
    total.lambda = model.lambdas[0];
    return total;
}

} // namespace cmc
