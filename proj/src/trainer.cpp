#include "cmc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace cmc {

std::vector<int64_t> latent_shape(const CodecConfig& cfg, const Tensor& batch) {
    const int d = cfg.total_downsample();
    if (batch.dim(2) % d != 0 || batch.dim(3) % d != 0)
        throw TrainError("train: input extents must be divisible by " + std::to_string(d));
    return {batch.dim(0), cfg.latent_channels, batch.dim(2) / d, batch.dim(3) / d};
}

LossParts build_single_loss(Graph& g, const Leafs& l, SingleUserModel& m, const Tensor& batch,
                            const Tensor& noise, double lambda, bool train_mode) {
    const int64_t n = batch.dim(0);
    const double entries = double(n) * double(batch.dim(2)) * double(batch.dim(3));

    NodeId x = g.constant(batch);
    NodeId lat = m.enc.apply(g, l, m.store, x, train_mode);
    NodeId noisy = lat;
    NodeId rate = -1;
    if (m.cfg.entropy_coding) {
        if (!g.value(lat).same_shape(noise))
            throw TrainError("train: noise tensor shape does not match the latent");
        noisy = op_add(g, lat, g.constant(noise));
        NodeId bits = m.prior.nll_bits_node(g, l, noisy);
        rate = op_scale(g, bits, 1.0 / entries);
    }
    NodeId recon = m.dec.apply(g, l, m.store, noisy, train_mode);
    NodeId sq = op_sum_squared_diff(g, recon, batch);
    NodeId mse = op_scale(g, sq, 1.0 / entries);
    NodeId weighted = op_scale(g, mse, lambda);
    NodeId loss = rate >= 0 ? op_add_scalar_nodes(g, rate, weighted) : weighted;

    LossParts parts;
    parts.loss = loss;
    parts.rate_bpe = rate >= 0 ? g.value(rate)[0] : 0.0;
    parts.mse = g.value(mse)[0];
    parts.value = g.value(loss)[0];
    return parts;
}

LossParts build_joint_loss(Graph& g, const Leafs& l, MultiUserModel& m,
                           const std::vector<Tensor>& batches, const std::vector<Tensor>& noises,
                           const std::vector<double>& lambdas, bool train_mode) {
    const int K = m.n_users;
    if (static_cast<int>(batches.size()) != K || static_cast<int>(lambdas.size()) != K)
        throw TrainError("train: batch/lambda count does not match user count");
    const int64_t n = batches[0].dim(0);
    const double entries = double(n) * double(batches[0].dim(2)) * double(batches[0].dim(3));

    std::vector<NodeId> noisy(static_cast<size_t>(K));
    NodeId rate_total = -1;
    for (int k = 0; k < K; ++k) {
        NodeId x = g.constant(batches[static_cast<size_t>(k)]);
        NodeId lat = m.enc[static_cast<size_t>(k)].apply(g, l, m.store, x, train_mode);
        if (m.cfg.entropy_coding) {
            noisy[static_cast<size_t>(k)] =
                op_add(g, lat, g.constant(noises[static_cast<size_t>(k)]));
            NodeId bits = m.priors[static_cast<size_t>(k)].nll_bits_node(
                g, l, noisy[static_cast<size_t>(k)]);
            NodeId rate = op_scale(g, bits, 1.0 / entries);
            rate_total = rate_total < 0 ? rate : op_add_scalar_nodes(g, rate_total, rate);
        } else {
            noisy[static_cast<size_t>(k)] = lat;
        }
    }
    std::vector<NodeId> recons = m.dec.apply(g, l, m.store, noisy, train_mode);
    NodeId dist_total = -1;
    double mse_mean = 0.0;
    for (int k = 0; k < K; ++k) {
        NodeId sq = op_sum_squared_diff(g, recons[static_cast<size_t>(k)],
                                        batches[static_cast<size_t>(k)]);
        NodeId mse = op_scale(g, sq, 1.0 / entries);
        mse_mean += g.value(mse)[0] / double(K);
        NodeId weighted = op_scale(g, mse, lambdas[static_cast<size_t>(k)]);
        dist_total = dist_total < 0 ? weighted : op_add_scalar_nodes(g, dist_total, weighted);
    }
    NodeId loss = rate_total >= 0 ? op_add_scalar_nodes(g, rate_total, dist_total) : dist_total;

    LossParts parts;
    parts.loss = loss;
    parts.rate_bpe = rate_total >= 0 ? g.value(rate_total)[0] : 0.0;
    parts.mse = mse_mean;
    parts.value = g.value(loss)[0];
    return parts;
}

void split_dataset(const std::vector<ChannelMatrix>& data, double holdout_fraction, uint64_t seed,
                   std::vector<ChannelMatrix>& train_part, std::vector<ChannelMatrix>& holdout) {
    std::vector<size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed ^ 0x5b17ce55u);
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const size_t n_hold = static_cast<size_t>(std::llround(holdout_fraction * double(data.size())));
    train_part.clear();
    holdout.clear();
    for (size_t i = 0; i < idx.size(); ++i)
        (i + n_hold < idx.size() ? train_part : holdout).push_back(data[idx[i]]);
}

namespace {

struct Divergence {
    double initial = -1.0;
    int streak = 0;

    // true when the loss has stayed 1000x above its initial value for 100 steps
    bool update(double loss) {
        if (initial < 0.0) initial = std::abs(loss) + 1e-12;
        if (std::abs(loss) > 1e3 * initial) {
            if (++streak >= 100) return true;
        } else {
            streak = 0;
        }
        return false;
    }
};

Tensor draw_noise(const std::vector<int64_t>& shape, Rng& rng, bool centered) {
    Tensor t(shape);
    const double offset = centered ? 0.5 : 0.0;
    for (double& v : t.data) v = rng.uniform() - offset;
    return t;
}

void check_finite_or_throw(const LossParts& parts, int step) {
    if (std::isfinite(parts.value)) return;
    const char* term = !std::isfinite(parts.rate_bpe) ? "rate" : "distortion";
    throw TrainError("train: non-finite " + std::string(term) + " term at step " +
                     std::to_string(step));
}

} // namespace

TrainReport train(SingleUserModel& model, const std::vector<ChannelMatrix>& data,
                  const TrainConfig& cfg) {
    if (data.empty()) throw TrainError("train: empty dataset");
    if (cfg.batch_size < 2) throw TrainError("train: batch size must be >= 2 for batch norm");
    std::vector<ChannelMatrix> train_part, holdout;
    split_dataset(data, cfg.holdout_fraction, cfg.seed, train_part, holdout);
    if (train_part.empty()) throw TrainError("train: empty training split");

    model.lambda = cfg.lambda;
    model.lambda_code = cfg.lambda_code;

    Rng rng(cfg.seed);
    Adam opt({cfg.learning_rate});
    TrainReport report;
    Divergence div;
    const int64_t underflow_before = model.prior.underflow_count();

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<const ChannelMatrix*> items;
        for (int b = 0; b < cfg.batch_size; ++b)
            items.push_back(&train_part[rng.below(train_part.size())]);
        const Tensor batch = stack_batch(items);
        const Tensor noise = model.cfg.entropy_coding
                                 ? draw_noise(latent_shape(model.cfg, batch), rng,
                                              cfg.centered_noise)
                                 : Tensor();

        Graph g;
        Leafs l = register_params(g, model.store, true);
        LossParts parts = build_single_loss(g, l, model, batch, noise, cfg.lambda, true);
        check_finite_or_throw(parts, step);
        report.step_log.push_back({parts.rate_bpe, parts.mse, parts.value});
        if (div.update(parts.value)) {
            report.diverged = true;
            return report;
        }
        g.backward(parts.loss);
        opt.step(model.store, g, l);
    }

    report.underflow_warnings = model.prior.underflow_count() - underflow_before;
    model.refresh_tables();
    if (!holdout.empty()) {
        report.heldout = evaluate(model, holdout);
        report.heldout_valid = true;
    }
    return report;
}

TrainReport train_joint(MultiUserModel& model,
                        const std::vector<std::vector<ChannelMatrix>>& per_user,
                        const TrainConfig& cfg) {
    const int K = model.n_users;
    if (static_cast<int>(per_user.size()) != K)
        throw TrainError("train: dataset count does not match user count");
    const size_t count = per_user[0].size();
    for (const auto& d : per_user)
        if (d.size() != count || count == 0)
            throw TrainError("train: user datasets must be non-empty and aligned");
    if (cfg.batch_size < 2) throw TrainError("train: batch size must be >= 2 for batch norm");

    const std::vector<double> lambdas = cfg.user_lambdas(K);
    model.lambdas = lambdas;
    for (int k = 0; k < K; ++k)
        model.lambda_codes[static_cast<size_t>(k)] = cfg.lambda_code;

    // aligned scene-index split shared by all users
    std::vector<size_t> idx(count);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng split_rng(cfg.seed ^ 0x5b17ce55u);
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[split_rng.below(i)]);
    const size_t n_hold = static_cast<size_t>(std::llround(cfg.holdout_fraction * double(count)));
    std::vector<size_t> train_idx(idx.begin(), idx.end() - long(n_hold));
    std::vector<size_t> hold_idx(idx.end() - long(n_hold), idx.end());
    if (train_idx.empty()) throw TrainError("train: empty training split");

    Rng rng(cfg.seed);
    Adam opt({cfg.learning_rate});
    TrainReport report;
    Divergence div;

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<size_t> scene(static_cast<size_t>(cfg.batch_size));
        for (auto& s : scene) s = train_idx[rng.below(train_idx.size())];
        std::vector<Tensor> batches, noises;
        for (int k = 0; k < K; ++k) {
            std::vector<const ChannelMatrix*> items;
            for (size_t s : scene) items.push_back(&per_user[static_cast<size_t>(k)][s]);
            batches.push_back(stack_batch(items));
            if (model.cfg.entropy_coding)
                noises.push_back(
                    draw_noise(latent_shape(model.cfg, batches.back()), rng, cfg.centered_noise));
        }
        Graph g;
        Leafs l = register_params(g, model.store, true);
        LossParts parts = build_joint_loss(g, l, model, batches, noises, lambdas, true);
        check_finite_or_throw(parts, step);
        report.step_log.push_back({parts.rate_bpe, parts.mse, parts.value});
        if (div.update(parts.value)) {
            report.diverged = true;
            return report;
        }
        g.backward(parts.loss);
        opt.step(model.store, g, l);
    }

    model.refresh_tables();
    if (!hold_idx.empty()) {
        std::vector<std::vector<ChannelMatrix>> hold(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k)
            for (size_t s : hold_idx) hold[static_cast<size_t>(k)].push_back(per_user[static_cast<size_t>(k)][s]);
        report.heldout = evaluate_joint(model, hold);
        report.heldout_valid = true;
    }
    return report;
}

MultiUserModel fine_tune(const SingleUserModel& single,
                         const std::vector<std::vector<ChannelMatrix>>& per_user,
                         const TrainConfig& cfg, TrainReport* report) {
    MultiUserModel joint = make_joint_from_single(single, static_cast<int>(per_user.size()));
    TrainReport r = train_joint(joint, per_user, cfg);
    if (report) *report = std::move(r);
    return joint;
}

std::vector<SweepPoint> rd_sweep(const CodecConfig& codec_cfg,
                                 const std::vector<ChannelMatrix>& data,
                                 std::vector<double> lambdas, TrainConfig base,
                                 std::vector<SingleUserModel>* models, uint64_t model_seed) {
    if (lambdas.empty()) throw TrainError("rd_sweep: need at least one lambda");
    std::sort(lambdas.begin(), lambdas.end());
    std::vector<SweepPoint> points;
    for (size_t i = 0; i < lambdas.size(); ++i) {
        TrainConfig cfg = base;
        cfg.lambda = lambdas[i];
        cfg.lambda_code = static_cast<uint16_t>(i);
        SingleUserModel model =
            SingleUserModel::create(codec_cfg, model_seed ? model_seed : base.seed);
        TrainReport r = train(model, data, cfg);
        if (r.diverged) throw TrainError("rd_sweep: training diverged at lambda " +
                                         std::to_string(lambdas[i]));
        SweepPoint p;
        p.lambda = lambdas[i];
        if (r.heldout_valid) p.heldout = r.heldout;
        points.push_back(std::move(p));
        if (models) models->push_back(std::move(model));
    }
    return points;
}

std::string report_to_json(const TrainReport& report) {
    nlohmann::json j;
    j["diverged"] = report.diverged;
    j["underflow_warnings"] = report.underflow_warnings;
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : report.step_log)
        steps.push_back({{"rate_bpe", s.rate_bpe}, {"mse", s.mse}, {"loss", s.loss}});
    j["steps"] = std::move(steps);
    if (report.heldout_valid) {
        const EvalResult& h = report.heldout;
        nlohmann::json hj = {{"rate_bpe", h.rate_bpe},       {"payload_bpe", h.payload_bpe},
                             {"entropy_bpe", h.entropy_bpe}, {"nmse_linear", h.nmse.linear},
                             {"nmse_db", h.nmse.db},         {"rho", h.rho}};
        nlohmann::json users = nlohmann::json::array();
        for (const auto& u : h.per_user)
            users.push_back({{"rate_bpe", u.rate_bpe},
                             {"entropy_bpe", u.entropy_bpe},
                             {"nmse_db", u.nmse.db},
                             {"rho", u.rho}});
        if (!users.empty()) hj["per_user"] = std::move(users);
        j["heldout"] = std::move(hj);
    }
    return j.dump(2) + "\n";
}

} // namespace cmc
