#pragma once

#include <array>
#include <optional>

#include "cmc/channel.hpp"
#include "cmc/entropy_model.hpp"
#include "cmc/nn.hpp"
#include "cmc/range_coder.hpp"

namespace cmc {

struct CodecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CodecConfig {
    int base_channels = 32;
    int latent_channels = 32;
    int kernel_front = 9; // first encoder layer / last decoder layer
    int kernel_mid = 5;
    int kernel_res = 3;  // residual block convolutions
    int kernel_fuse = 3; // combining kernels in the joint decoder
    std::array<int, 3> down = {4, 2, 2};
    int n_res_blocks = 2;
    bool entropy_coding = true;      // off: send the latent as raw float32
    bool upsample_transposed = false; // transposed conv instead of nearest + conv
    bool decoder_plain_bn = true;     // batch norm on the plain decoder convs
    bool resblock_bn_before_act = true;
    bool entropy_per_channel = true;
    std::array<bool, 2> fusion_after_block = {true, true};

    int total_downsample() const { return down[0] * down[1] * down[2]; }
    std::array<int, 3> up() const { return {down[2], down[1], down[0]}; }
    void validate() const;
};

// ---- tensor <-> channel matrix ----

// [2, N_c, N_t]: channel 0 real part, channel 1 imaginary part
Tensor split_complex(const ChannelMatrix& h);
ChannelMatrix merge_complex(const Tensor& t);
Tensor stack_batch(const std::vector<const ChannelMatrix*>& items);

// round half away from zero, element-wise
Tensor quantize(const Tensor& m);
// additive noise matching the unit quantization bin; centered U[-0.5, 0.5)
// by default, U[0, 1) in literal mode
Tensor add_noise(const Tensor& m, Rng& rng, bool centered = true);

// ---- network pieces ----

struct ResBlock {
    Conv2d c1, c2;
    BatchNorm bn1, bn2;
    PRelu act;
    bool bn_before_act = true;

    static ResBlock create(ParamStore& s, const std::string& name, int ch, int k, Rng& rng,
                           bool bn_before_act);
    NodeId apply(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const;
};

struct FeatureEncoder {
    Conv2d c1, c2, c3;
    BatchNorm bn1, bn2;
    PRelu p1, p2;

    static FeatureEncoder create(ParamStore& s, const std::string& name, const CodecConfig& cfg,
                                 Rng& rng);
    NodeId apply(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const;
};

// Single-user feature decoder; also serves as one branch of the joint
// decoder, whose fusion hooks run between the residual blocks.
struct DecoderBranch {
    Conv2d head, mid, tail;
    BatchNorm head_bn, mid_bn;
    PRelu head_act, mid_act;
    std::vector<ResBlock> blocks;
    std::array<int, 3> up = {2, 2, 4};
    bool plain_bn = true;
    bool transposed = false;

    static DecoderBranch create(ParamStore& s, const std::string& name, const CodecConfig& cfg,
                                Rng& rng);

    NodeId stage_head(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const;
    NodeId stage_tail(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const;
    NodeId apply(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const;

private:
    NodeId up_conv(Graph& g, const Leafs& l, const Conv2d& conv, NodeId x, int factor) const;
};

// K decoder branches plus combining kernels; each fusion stage adds, to every
// branch, the sum of convolved features from all other branches.
struct JointDecoder {
    int n_users = 0;
    std::vector<DecoderBranch> branches;
    // fuse[stage][to][from], unused entries default-initialized
    std::vector<std::vector<std::vector<Conv2d>>> fuse;
    std::array<bool, 2> fusion_after_block = {true, true};

    static JointDecoder create(ParamStore& s, const CodecConfig& cfg, int n_users, Rng& rng,
                               bool zero_fusion);
    std::vector<NodeId> apply(Graph& g, const Leafs& l, ParamStore& s,
                              const std::vector<NodeId>& latents, bool train) const;
};

// ---- models ----

struct SingleUserModel {
    CodecConfig cfg;
    ParamStore store;
    FeatureEncoder enc;
    DecoderBranch dec;
    FactorizedEntropyModel prior;
    double lambda = 1.0;
    uint16_t lambda_code = 0;
    uint32_t model_id = 0;
    std::vector<PmfTable> tables;

    static SingleUserModel create(const CodecConfig& cfg, uint64_t seed);
    void refresh_tables(); // recomputes model_id and coding tables
};

struct MultiUserModel {
    CodecConfig cfg;
    int n_users = 0;
    ParamStore store;
    std::vector<FeatureEncoder> enc;
    JointDecoder dec;
    std::vector<FactorizedEntropyModel> priors;
    std::vector<double> lambdas;
    std::vector<uint16_t> lambda_codes;
    uint32_t model_id = 0;
    std::vector<std::vector<PmfTable>> tables;

    static MultiUserModel create(const CodecConfig& cfg, int n_users, uint64_t seed,
                                 bool zero_fusion = false);
    void refresh_tables();
};

// Builds a K-user model whose branches replicate a single-user model and
// whose combining kernels are zero, so joint decoding initially equals K
// independent single-user decoders.
MultiUserModel make_joint_from_single(const SingleUserModel& single, int n_users);

uint32_t compute_model_id(const ParamStore& store);

// ---- end-to-end paths (eval mode) ----

Tensor encode_features(const SingleUserModel& m, const ChannelMatrix& h);
ChannelMatrix decode_features(const SingleUserModel& m, const Tensor& latent);

Bitstream compress(const SingleUserModel& m, const ChannelMatrix& h);
ChannelMatrix decompress(const SingleUserModel& m, const Bitstream& stream);

Bitstream compress_user(const MultiUserModel& m, int user, const ChannelMatrix& h);
std::vector<ChannelMatrix> decompress_joint(const MultiUserModel& m,
                                            const std::vector<Bitstream>& streams);

// latent tensors straight to reconstructions, bypassing the coder
std::vector<ChannelMatrix> joint_decode_features(const MultiUserModel& m,
                                                 const std::vector<Tensor>& latents);

} // namespace cmc
