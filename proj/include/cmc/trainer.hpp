#pragma once

#include "cmc/metrics.hpp"

namespace cmc {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double lambda = 1.0;
    std::vector<double> lambdas; // multi-user weights; empty means all = lambda
    int batch_size = 8;
    int steps = 2000;
    double learning_rate = 1e-3;
    uint64_t seed = 1;
    bool centered_noise = true; // U[-0.5,0.5); false selects the literal U[0,1)
    double holdout_fraction = 0.2;
    uint16_t lambda_code = 0;

    std::vector<double> user_lambdas(int n_users) const {
        if (lambdas.empty()) return std::vector<double>(static_cast<size_t>(n_users), lambda);
        if (static_cast<int>(lambdas.size()) != n_users)
            throw TrainError("train: lambda count does not match user count");
        return lambdas;
    }
};

struct StepLog {
    double rate_bpe = 0.0;
    double mse = 0.0;
    double loss = 0.0;
};

struct TrainReport {
    std::vector<StepLog> step_log;
    EvalResult heldout;
    bool heldout_valid = false;
    bool diverged = false;
    int64_t underflow_warnings = 0;
};

std::string report_to_json(const TrainReport& report);

// ---- loss graphs (shared by the training loops and the gradient tests) ----

struct LossParts {
    NodeId loss = -1;
    double rate_bpe = 0.0; // bits per CSI entry, batch mean
    double mse = 0.0;      // ||H - Hhat||^2 / (Nc Nt), batch mean
    double value = 0.0;
};

// Rate-distortion objective for one user: bits-per-entry of the noise-relaxed
// latent plus lambda times the reconstruction MSE.
LossParts build_single_loss(Graph& g, const Leafs& l, SingleUserModel& m, const Tensor& batch,
                            const Tensor& noise, double lambda, bool train_mode);

// Sum of per-user rate terms plus per-user weighted MSE under joint decoding.
LossParts build_joint_loss(Graph& g, const Leafs& l, MultiUserModel& m,
                           const std::vector<Tensor>& batches, const std::vector<Tensor>& noises,
                           const std::vector<double>& lambdas, bool train_mode);

// latent shape for a given input batch under a codec config
std::vector<int64_t> latent_shape(const CodecConfig& cfg, const Tensor& batch);

// ---- training entry points ----

TrainReport train(SingleUserModel& model, const std::vector<ChannelMatrix>& data,
                  const TrainConfig& cfg);

TrainReport train_joint(MultiUserModel& model,
                        const std::vector<std::vector<ChannelMatrix>>& per_user,
                        const TrainConfig& cfg);

// Scheme-2 training: branches and priors start from the single-user model,
// combining kernels start at zero, then everything trains together.
MultiUserModel fine_tune(const SingleUserModel& single,
                         const std::vector<std::vector<ChannelMatrix>>& per_user,
                         const TrainConfig& cfg, TrainReport* report = nullptr);

struct SweepPoint {
    double lambda = 0.0;
    EvalResult heldout;
};

std::vector<SweepPoint> rd_sweep(const CodecConfig& codec_cfg,
                                 const std::vector<ChannelMatrix>& data,
                                 std::vector<double> lambdas, TrainConfig base,
                                 std::vector<SingleUserModel>* models = nullptr,
                                 uint64_t model_seed = 0);

// deterministic 80/20 split helper
void split_dataset(const std::vector<ChannelMatrix>& data, double holdout_fraction, uint64_t seed,
                   std::vector<ChannelMatrix>& train_part, std::vector<ChannelMatrix>& holdout);

} // namespace cmc
