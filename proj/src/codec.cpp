#include "cmc/codec.hpp"

#include <cmath>
#include <cstring>

namespace cmc {

void CodecConfig::validate() const {
    if (base_channels < 1 || latent_channels < 1)
        throw CodecError("config: channel counts must be >= 1");
    for (int k : {kernel_front, kernel_mid, kernel_res, kernel_fuse})
        if (k < 1 || k % 2 == 0) throw CodecError("config: kernel sizes must be odd");
    for (int d : down)
        if (d != 1 && d != 2 && d != 4) throw CodecError("config: downsample factors must be 1, 2 or 4");
    if (n_res_blocks < 0 || n_res_blocks > 2)
        throw CodecError("config: residual block count must be 0..2");
}

Tensor split_complex(const ChannelMatrix& h) {
    Tensor t({1, 2, h.n_c, h.n_t});
    for (int n = 0; n < h.n_c; ++n)
        for (int a = 0; a < h.n_t; ++a) {
            t.at4(0, 0, n, a) = h.at(n, a).real();
            t.at4(0, 1, n, a) = h.at(n, a).imag();
        }
    return t;
}

ChannelMatrix merge_complex(const Tensor& t) {
    if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 2)
        throw CodecError("merge_complex: expects a [1,2,H,W] tensor");
    ChannelMatrix h;
    h.n_c = static_cast<int>(t.dim(2));
    h.n_t = static_cast<int>(t.dim(3));
    h.data.resize(static_cast<size_t>(h.n_c) * h.n_t);
    for (int n = 0; n < h.n_c; ++n)
        for (int a = 0; a < h.n_t; ++a) h.at(n, a) = cplx(t.at4(0, 0, n, a), t.at4(0, 1, n, a));
    return h;
}

Tensor stack_batch(const std::vector<const ChannelMatrix*>& items) {
    if (items.empty()) throw CodecError("stack_batch: empty batch");
    const int n_c = items[0]->n_c, n_t = items[0]->n_t;
    Tensor t({static_cast<int64_t>(items.size()), 2, n_c, n_t});
    for (size_t b = 0; b < items.size(); ++b) {
        const ChannelMatrix& h = *items[b];
        if (h.n_c != n_c || h.n_t != n_t) throw CodecError("stack_batch: mixed shapes");
        for (int n = 0; n < n_c; ++n)
            for (int a = 0; a < n_t; ++a) {
                t.at4(static_cast<int64_t>(b), 0, n, a) = h.at(n, a).real();
                t.at4(static_cast<int64_t>(b), 1, n, a) = h.at(n, a).imag();
            }
    }
    return t;
}

Tensor quantize(const Tensor& m) {
    Tensor q = m;
    for (double& v : q.data) v = std::round(v);
    return q;
}

Tensor add_noise(const Tensor& m, Rng& rng, bool centered) {
    Tensor out = m;
    const double offset = centered ? 0.5 : 0.0;
    for (double& v : out.data) v += rng.uniform() - offset;
    return out;
}

// ---- ResBlock ----

ResBlock ResBlock::create(ParamStore& s, const std::string& name, int ch, int k, Rng& rng,
                          bool bn_before_act) {
    ResBlock b;
    b.bn_before_act = bn_before_act;
    b.c1 = Conv2d::create(s, name + "/conv1", ch, ch, k, 1, rng);
    b.bn1 = BatchNorm::create(s, name + "/bn1", ch);
    b.act = PRelu::create(s, name + "/prelu", ch);
    b.c2 = Conv2d::create(s, name + "/conv2", ch, ch, k, 1, rng);
    b.bn2 = BatchNorm::create(s, name + "/bn2", ch);
    return b;
}

NodeId ResBlock::apply(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const {
    NodeId y = c1.apply(g, l, x);
    if (bn_before_act) {
        y = bn1.apply(g, l, s, y, train);
        y = act.apply(g, l, y);
    } else {
        y = act.apply(g, l, y);
        y = bn1.apply(g, l, s, y, train);
    }
    y = c2.apply(g, l, y);
    y = bn2.apply(g, l, s, y, train);
    return op_add(g, x, y);
}

// ---- FeatureEncoder ----

FeatureEncoder FeatureEncoder::create(ParamStore& s, const std::string& name,
                                      const CodecConfig& cfg, Rng& rng) {
    FeatureEncoder e;
    e.c1 = Conv2d::create(s, name + "/conv1", 2, cfg.base_channels, cfg.kernel_front, cfg.down[0],
                          rng);
    e.bn1 = BatchNorm::create(s, name + "/bn1", cfg.base_channels);
    e.p1 = PRelu::create(s, name + "/prelu1", cfg.base_channels);
    e.c2 = Conv2d::create(s, name + "/conv2", cfg.base_channels, cfg.base_channels, cfg.kernel_mid,
                          cfg.down[1], rng);
    e.bn2 = BatchNorm::create(s, name + "/bn2", cfg.base_channels);
    e.p2 = PRelu::create(s, name + "/prelu2", cfg.base_channels);
    e.c3 = Conv2d::create(s, name + "/conv3", cfg.base_channels, cfg.latent_channels,
                          cfg.kernel_mid, cfg.down[2], rng);
    return e;
}

NodeId FeatureEncoder::apply(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const {
    NodeId y = c1.apply(g, l, x);
    y = bn1.apply(g, l, s, y, train);
    y = p1.apply(g, l, y);
    y = c2.apply(g, l, y);
    y = bn2.apply(g, l, s, y, train);
    y = p2.apply(g, l, y);
    return c3.apply(g, l, y);
}

// ---- DecoderBranch ----

DecoderBranch DecoderBranch::create(ParamStore& s, const std::string& name,
                                    const CodecConfig& cfg, Rng& rng) {
    DecoderBranch d;
    d.up = cfg.up();
    d.plain_bn = cfg.decoder_plain_bn;
    d.transposed = cfg.upsample_transposed;
    d.head = Conv2d::create(s, name + "/conv1", cfg.latent_channels, cfg.base_channels,
                            cfg.kernel_mid, d.transposed ? d.up[0] : 1, rng, d.transposed);
    d.head_bn = BatchNorm::create(s, name + "/bn1", cfg.base_channels);
    d.head_act = PRelu::create(s, name + "/prelu1", cfg.base_channels);
    for (int i = 0; i < cfg.n_res_blocks; ++i)
        d.blocks.push_back(ResBlock::create(s, name + "/res" + std::to_string(i + 1),
                                            cfg.base_channels, cfg.kernel_res, rng,
                                            cfg.resblock_bn_before_act));
    d.mid = Conv2d::create(s, name + "/conv2", cfg.base_channels, cfg.base_channels,
                           cfg.kernel_mid, d.transposed ? d.up[1] : 1, rng, d.transposed);
    d.mid_bn = BatchNorm::create(s, name + "/bn2", cfg.base_channels);
    d.mid_act = PRelu::create(s, name + "/prelu2", cfg.base_channels);
    d.tail = Conv2d::create(s, name + "/conv3", cfg.base_channels, 2, cfg.kernel_front,
                            d.transposed ? d.up[2] : 1, rng, d.transposed);
    return d;
}

NodeId DecoderBranch::up_conv(Graph& g, const Leafs& l, const Conv2d& conv, NodeId x,
                              int factor) const {
    if (transposed) return conv.apply(g, l, x);
    if (factor > 1) x = op_upsample_nearest(g, x, factor);
    return conv.apply(g, l, x);
}

NodeId DecoderBranch::stage_head(Graph& g, const Leafs& l, ParamStore& s, NodeId x,
                                 bool train) const {
    NodeId y = up_conv(g, l, head, x, up[0]);
    if (plain_bn) y = head_bn.apply(g, l, s, y, train);
    return head_act.apply(g, l, y);
}

NodeId DecoderBranch::stage_tail(Graph& g, const Leafs& l, ParamStore& s, NodeId x,
                                 bool train) const {
    NodeId y = up_conv(g, l, mid, x, up[1]);
    if (plain_bn) y = mid_bn.apply(g, l, s, y, train);
    y = mid_act.apply(g, l, y);
    return up_conv(g, l, tail, y, up[2]);
}

NodeId DecoderBranch::apply(Graph& g, const Leafs& l, ParamStore& s, NodeId x, bool train) const {
    NodeId h = stage_head(g, l, s, x, train);
    NodeId cur = h;
    for (const auto& blk : blocks) cur = blk.apply(g, l, s, cur, train);
    if (!blocks.empty()) cur = op_add(g, cur, h); // shortcut around the residual blocks
    return stage_tail(g, l, s, cur, train);
}

// ---- JointDecoder ----

JointDecoder JointDecoder::create(ParamStore& s, const CodecConfig& cfg, int n_users, Rng& rng,
                                  bool zero_fusion) {
    JointDecoder jd;
    jd.n_users = n_users;
    jd.fusion_after_block = cfg.fusion_after_block;
    for (int k = 0; k < n_users; ++k)
        jd.branches.push_back(
            DecoderBranch::create(s, "u" + std::to_string(k) + "/dec", cfg, rng));
    const int n_stages = cfg.n_res_blocks;
    jd.fuse.resize(static_cast<size_t>(n_stages));
    for (int st = 0; st < n_stages; ++st) {
        if (st < 2 && !cfg.fusion_after_block[static_cast<size_t>(st)]) continue;
        auto& per_to = jd.fuse[static_cast<size_t>(st)];
        per_to.resize(static_cast<size_t>(n_users));
        for (int to = 0; to < n_users; ++to) {
            per_to[static_cast<size_t>(to)].resize(static_cast<size_t>(n_users));
            for (int from = 0; from < n_users; ++from) {
                if (from == to) continue;
                per_to[static_cast<size_t>(to)][static_cast<size_t>(from)] = Conv2d::create(
                    s,
                    "fuse" + std::to_string(st + 1) + "/u" + std::to_string(from) + "to" +
                        std::to_string(to),
                    cfg.base_channels, cfg.base_channels, cfg.kernel_fuse, 1, rng, false,
                    zero_fusion);
            }
        }
    }
    return jd;
}

std::vector<NodeId> JointDecoder::apply(Graph& g, const Leafs& l, ParamStore& s,
                                        const std::vector<NodeId>& latents, bool train) const {
    if (static_cast<int>(latents.size()) != n_users)
        throw CodecError("joint decode: latent count does not match user count");
    std::vector<NodeId> heads(latents.size());
    for (size_t k = 0; k < latents.size(); ++k)
        heads[k] = branches[k].stage_head(g, l, s, latents[k], train);

    std::vector<NodeId> cur = heads;
    const size_t n_blocks = branches[0].blocks.size();
    for (size_t bi = 0; bi < n_blocks; ++bi) {
        std::vector<NodeId> rb(cur.size());
        for (size_t k = 0; k < cur.size(); ++k)
            rb[k] = branches[k].blocks[bi].apply(g, l, s, cur[k], train);
        const bool fuse_here = bi < fuse.size() && !fuse[bi].empty();
        if (fuse_here) {
            std::vector<NodeId> fused(cur.size());
            for (size_t to = 0; to < cur.size(); ++to) {
                NodeId acc = rb[to];
                for (size_t from = 0; from < cur.size(); ++from) {
                    if (from == to) continue;
                    NodeId side = fuse[bi][to][from].apply(g, l, rb[from]);
                    acc = op_add(g, acc, side);
                }
                fused[to] = acc;
            }
            cur = std::move(fused);
        } else {
            cur = std::move(rb);
        }
    }
    std::vector<NodeId> out(latents.size());
    for (size_t k = 0; k < latents.size(); ++k) {
        NodeId z = n_blocks > 0 ? op_add(g, cur[k], heads[k]) : cur[k];
        out[k] = branches[k].stage_tail(g, l, s, z, train);
    }
    return out;
}

// ---- models ----

SingleUserModel SingleUserModel::create(const CodecConfig& cfg, uint64_t seed) {
    cfg.validate();
    SingleUserModel m;
    m.cfg = cfg;
    Rng rng(seed);
    m.enc = FeatureEncoder::create(m.store, "enc", cfg, rng);
    m.dec = DecoderBranch::create(m.store, "dec", cfg, rng);
    m.prior = FactorizedEntropyModel::create(m.store, "prior", cfg.latent_channels,
                                             cfg.entropy_per_channel, rng);
    return m;
}

void SingleUserModel::refresh_tables() {
    model_id = compute_model_id(store);
    if (!cfg.entropy_coding) {
        tables.clear();
        return;
    }
    const ParamStore frozen = rounded_to_f32(store);
    tables = prior.discretize(frozen);
}

MultiUserModel MultiUserModel::create(const CodecConfig& cfg, int n_users, uint64_t seed,
                                      bool zero_fusion) {
    cfg.validate();
    if (n_users < 1) throw CodecError("multi-user model needs at least one user");
    MultiUserModel m;
    m.cfg = cfg;
    m.n_users = n_users;
    Rng rng(seed);
    for (int k = 0; k < n_users; ++k)
        m.enc.push_back(
            FeatureEncoder::create(m.store, "u" + std::to_string(k) + "/enc", cfg, rng));
    m.dec = JointDecoder::create(m.store, cfg, n_users, rng, zero_fusion);
    for (int k = 0; k < n_users; ++k)
        m.priors.push_back(FactorizedEntropyModel::create(m.store,
                                                          "u" + std::to_string(k) + "/prior",
                                                          cfg.latent_channels,
                                                          cfg.entropy_per_channel, rng));
    m.lambdas.assign(static_cast<size_t>(n_users), 1.0);
    m.lambda_codes.assign(static_cast<size_t>(n_users), 0);
    return m;
}

void MultiUserModel::refresh_tables() {
    model_id = compute_model_id(store);
    tables.clear();
    if (!cfg.entropy_coding) return;
    const ParamStore frozen = rounded_to_f32(store);
    for (int k = 0; k < n_users; ++k)
        tables.push_back(priors[static_cast<size_t>(k)].discretize(frozen));
}

MultiUserModel make_joint_from_single(const SingleUserModel& single, int n_users) {
    MultiUserModel m = MultiUserModel::create(single.cfg, n_users, /*seed=*/0, /*zero_fusion=*/true);
    for (size_t i = 0; i < single.store.size(); ++i) {
        const auto& e = single.store[static_cast<int>(i)];
        for (int k = 0; k < n_users; ++k) {
            const int idx = m.store.find("u" + std::to_string(k) + "/" + e.name);
            if (idx < 0) throw CodecError("joint init: missing parameter " + e.name);
            m.store[idx].value = e.value;
        }
    }
    m.lambdas.assign(static_cast<size_t>(n_users), single.lambda);
    m.lambda_codes.assign(static_cast<size_t>(n_users), single.lambda_code);
    m.refresh_tables();
    return m;
}

uint32_t compute_model_id(const ParamStore& store) {
    // FNV-1a over the float32 image of every parameter, in table order
    uint32_t h = 2166136261u;
    auto mix = [&h](const uint8_t* p, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 16777619u;
        }
    };
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& e = store[static_cast<int>(i)];
        mix(reinterpret_cast<const uint8_t*>(e.name.data()), e.name.size());
        for (double v : e.value.data) {
            const float f = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            uint8_t raw[4] = {uint8_t(bits), uint8_t(bits >> 8), uint8_t(bits >> 16),
                              uint8_t(bits >> 24)};
            mix(raw, 4);
        }
    }
    return h;
}

// ---- end-to-end paths ----

namespace {

void check_divisible(const CodecConfig& cfg, const ChannelMatrix& h) {
    const int d = cfg.total_downsample();
    if (h.n_c % d != 0 || h.n_t % d != 0)
        throw CodecError("input " + std::to_string(h.n_c) + "x" + std::to_string(h.n_t) +
                         " not divisible by the total downsample factor " + std::to_string(d) +
                         "; pad the input first");
}

std::vector<int32_t> latent_to_symbols(const Tensor& q) {
    std::vector<int32_t> out(q.data.size());
    for (size_t i = 0; i < q.data.size(); ++i) {
        const double v = q.data[i];
        if (!(std::abs(v) < 2147483647.0)) throw CodecError("latent symbol exceeds 32-bit range");
        out[i] = static_cast<int32_t>(std::llround(v));
    }
    return out;
}

std::vector<uint8_t> latent_to_raw_floats(const Tensor& m) {
    std::vector<uint8_t> out(m.data.size() * 4);
    for (size_t i = 0; i < m.data.size(); ++i) {
        const float f = static_cast<float>(m.data[i]);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int b = 0; b < 4; ++b) out[i * 4 + static_cast<size_t>(b)] = uint8_t(bits >> (8 * b));
    }
    return out;
}

Tensor raw_floats_to_latent(const std::vector<uint8_t>& bytes, std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    if (bytes.size() != t.data.size() * 4) throw CodecError("raw latent payload size mismatch");
    for (size_t i = 0; i < t.data.size(); ++i) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= uint32_t(bytes[i * 4 + static_cast<size_t>(b)]) << (8 * b);
        float f;
        std::memcpy(&f, &bits, 4);
        t.data[i] = double(f);
    }
    return t;
}

} // namespace

Tensor encode_features(const SingleUserModel& m, const ChannelMatrix& h) {
    check_divisible(m.cfg, h);
    Graph g;
    // eval mode: parameters enter as constants
    auto& store = const_cast<ParamStore&>(m.store);
    Leafs l = register_params(g, store, false);
    NodeId x = g.constant(split_complex(h));
    NodeId lat = m.enc.apply(g, l, store, x, false);
    return g.value(lat);
}

ChannelMatrix decode_features(const SingleUserModel& m, const Tensor& latent) {
    Graph g;
    auto& store = const_cast<ParamStore&>(m.store);
    Leafs l = register_params(g, store, false);
    NodeId lat = g.constant(latent);
    NodeId out = m.dec.apply(g, l, store, lat, false);
    return merge_complex(g.value(out));
}

namespace {

StreamHeader make_header(uint32_t model_id, uint16_t lambda_code, const Tensor& latent) {
    StreamHeader hd;
    hd.model_id = model_id;
    hd.lambda_code = lambda_code;
    hd.c = static_cast<uint16_t>(latent.dim(1));
    hd.h = static_cast<uint16_t>(latent.dim(2));
    hd.w = static_cast<uint16_t>(latent.dim(3));
    return hd;
}

} // namespace

Bitstream compress(const SingleUserModel& m, const ChannelMatrix& h) {
    Tensor latent = encode_features(m, h);
    if (!m.cfg.entropy_coding) {
        Bitstream bs;
        bs.version = kStreamVersionRaw;
        bs.header = make_header(m.model_id, m.lambda_code, latent);
        bs.payload = latent_to_raw_floats(latent);
        bs.payload_bit_len = static_cast<uint32_t>(bs.payload.size() * 8);
        return bs;
    }
    if (m.tables.empty()) throw CodecError("compress: tables not frozen; call refresh_tables()");
    const Tensor q = quantize(latent);
    Bitstream bs = rc_encode(latent_to_symbols(q), m.tables,
                             make_header(m.model_id, m.lambda_code, latent));
    return bs;
}

ChannelMatrix decompress(const SingleUserModel& m, const Bitstream& stream) {
    const std::vector<int64_t> shape = {1, stream.header.c, stream.header.h, stream.header.w};
    Tensor latent;
    if (stream.version == kStreamVersionRaw) {
        latent = raw_floats_to_latent(stream.payload, shape);
    } else {
        if (m.tables.empty())
            throw CodecError("decompress: tables not frozen; call refresh_tables()");
        const std::vector<int32_t> symbols = rc_decode(stream, m.tables, m.model_id);
        latent = Tensor(shape);
        for (size_t i = 0; i < symbols.size(); ++i) latent.data[i] = double(symbols[i]);
    }
    return decode_features(m, latent);
}

Bitstream compress_user(const MultiUserModel& m, int user, const ChannelMatrix& h) {
    check_divisible(m.cfg, h);
    Graph g;
    auto& store = const_cast<ParamStore&>(m.store);
    Leafs l = register_params(g, store, false);
    NodeId x = g.constant(split_complex(h));
    NodeId lat = m.enc[static_cast<size_t>(user)].apply(g, l, store, x, false);
    const Tensor latent = g.value(lat);
    const uint16_t code = m.lambda_codes[static_cast<size_t>(user)];
    if (!m.cfg.entropy_coding) {
        Bitstream bs;
        bs.version = kStreamVersionRaw;
        bs.header = make_header(m.model_id, code, latent);
        bs.payload = latent_to_raw_floats(latent);
        bs.payload_bit_len = static_cast<uint32_t>(bs.payload.size() * 8);
        return bs;
    }
    if (m.tables.empty()) throw CodecError("compress: tables not frozen; call refresh_tables()");
    return rc_encode(latent_to_symbols(quantize(latent)), m.tables[static_cast<size_t>(user)],
                     make_header(m.model_id, code, latent));
}

std::vector<ChannelMatrix> joint_decode_features(const MultiUserModel& m,
                                                 const std::vector<Tensor>& latents) {
    if (static_cast<int>(latents.size()) != m.n_users)
        throw CodecError("joint decode: latent count does not match user count");
    for (const Tensor& t : latents)
        if (!t.same_shape(latents[0])) throw CodecError("joint decode: latents must share a shape");
    Graph g;
    auto& store = const_cast<ParamStore&>(m.store);
    Leafs l = register_params(g, store, false);
    std::vector<NodeId> ids;
    ids.reserve(latents.size());
    for (const Tensor& t : latents) ids.push_back(g.constant(t));
    std::vector<NodeId> outs = m.dec.apply(g, l, store, ids, false);
    std::vector<ChannelMatrix> result;
    result.reserve(outs.size());
    for (NodeId o : outs) result.push_back(merge_complex(g.value(o)));
    return result;
}

std::vector<ChannelMatrix> decompress_joint(const MultiUserModel& m,
                                            const std::vector<Bitstream>& streams) {
    if (static_cast<int>(streams.size()) != m.n_users)
        throw CodecError("joint decode: stream count does not match user count");
    std::vector<Tensor> latents;
    latents.reserve(streams.size());
    for (size_t k = 0; k < streams.size(); ++k) {
        const Bitstream& bs = streams[k];
        const std::vector<int64_t> shape = {1, bs.header.c, bs.header.h, bs.header.w};
        if (bs.version == kStreamVersionRaw) {
            latents.push_back(raw_floats_to_latent(bs.payload, shape));
        } else {
            const std::vector<int32_t> symbols = rc_decode(bs, m.tables[k], m.model_id);
            Tensor t(shape);
            for (size_t i = 0; i < symbols.size(); ++i) t.data[i] = double(symbols[i]);
            latents.push_back(std::move(t));
        }
    }
    return joint_decode_features(m, latents);
}

} // namespace cmc
