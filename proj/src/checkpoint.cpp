#include "cmc/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

namespace cmc {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'M', 'C'};
constexpr uint16_t kVersion = 1;

struct Writer {
    std::vector<uint8_t> out;

    void u8(uint8_t v) { out.push_back(v); }
    void u16(uint16_t v) {
        out.push_back(uint8_t(v));
        out.push_back(uint8_t(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
    }
    void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) out.push_back(uint8_t(bits >> (8 * i)));
    }
    void str(const std::string& s) {
        u16(static_cast<uint16_t>(s.size()));
        out.insert(out.end(), s.begin(), s.end());
    }
};

struct Parser {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;

    void need(size_t k) {
        if (pos + k > n) throw CheckpointError("checkpoint: truncated file");
    }
    uint8_t u8() {
        need(1);
        return p[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = uint16_t(p[pos]) | uint16_t(p[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        need(8);
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= uint64_t(p[pos + i]) << (8 * i);
        pos += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const uint16_t len = u16();
        need(len);
        std::string s(reinterpret_cast<const char*>(p + pos), len);
        pos += len;
        return s;
    }
};

void write_config(Writer& w, const CodecConfig& c) {
    w.i32(c.base_channels);
    w.i32(c.latent_channels);
    w.i32(c.kernel_front);
    w.i32(c.kernel_mid);
    w.i32(c.kernel_res);
    w.i32(c.kernel_fuse);
    for (int d : c.down) w.i32(d);
    w.i32(c.n_res_blocks);
    uint8_t flags = 0;
    flags |= c.entropy_coding ? 1 : 0;
    flags |= c.upsample_transposed ? 2 : 0;
    flags |= c.decoder_plain_bn ? 4 : 0;
    flags |= c.resblock_bn_before_act ? 8 : 0;
    flags |= c.entropy_per_channel ? 16 : 0;
    flags |= c.fusion_after_block[0] ? 32 : 0;
    flags |= c.fusion_after_block[1] ? 64 : 0;
    w.u8(flags);
}

CodecConfig read_config(Parser& r) {
    CodecConfig c;
    c.base_channels = r.i32();
    c.latent_channels = r.i32();
    c.kernel_front = r.i32();
    c.kernel_mid = r.i32();
    c.kernel_res = r.i32();
    c.kernel_fuse = r.i32();
    for (int& d : c.down) d = r.i32();
    c.n_res_blocks = r.i32();
    const uint8_t flags = r.u8();
    c.entropy_coding = flags & 1;
    c.upsample_transposed = flags & 2;
    c.decoder_plain_bn = flags & 4;
    c.resblock_bn_before_act = flags & 8;
    c.entropy_per_channel = flags & 16;
    c.fusion_after_block[0] = flags & 32;
    c.fusion_after_block[1] = flags & 64;
    return c;
}

void write_params(Writer& w, const ParamStore& store) {
    w.u32(static_cast<uint32_t>(store.size()));
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& e = store[static_cast<int>(i)];
        w.str(e.name);
        w.u8(e.trainable ? 1 : 0);
        w.u8(static_cast<uint8_t>(e.value.shape.size()));
        for (int64_t d : e.value.shape) w.u32(static_cast<uint32_t>(d));
        for (double v : e.value.data) w.f32(static_cast<float>(v));
    }
}

void read_params_into(Parser& r, ParamStore& store) {
    const uint32_t count = r.u32();
    size_t matched = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        r.u8(); // trainable flag is structural, taken from the rebuilt model
        const uint8_t ndim = r.u8();
        std::vector<int64_t> shape(ndim);
        for (auto& d : shape) d = r.u32();
        const int64_t numel = Tensor::count(shape);
        const int idx = store.find(name);
        if (idx < 0) throw CheckpointError("checkpoint: unknown parameter " + name);
        auto& e = store[idx];
        if (e.value.shape != shape)
            throw CheckpointError("checkpoint: shape mismatch for " + name);
        for (int64_t k = 0; k < numel; ++k) e.value[k] = double(r.f32());
        ++matched;
    }
    if (matched != store.size())
        throw CheckpointError("checkpoint: parameter table incomplete for this architecture");
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!f) throw CheckpointError("checkpoint: cannot open " + path);
    std::fseek(f.get(), 0, SEEK_END);
    const long size = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    std::vector<uint8_t> buf(static_cast<size_t>(size < 0 ? 0 : size));
    if (!buf.empty() && std::fread(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw CheckpointError("checkpoint: read failed for " + path);
    return buf;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!f) throw CheckpointError("checkpoint: cannot open " + path + " for write");
    if (!bytes.empty() && std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size())
        throw CheckpointError("checkpoint: write failed for " + path);
}

Parser open_parser(const std::vector<uint8_t>& buf) {
    Parser r{buf.data(), buf.size()};
    r.need(4);
    if (std::memcmp(r.p, kMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic");
    r.pos += 4;
    if (r.u16() != kVersion) throw CheckpointError("checkpoint: unsupported version");
    return r;
}

} // namespace

std::vector<uint8_t> checkpoint_bytes(const SingleUserModel& model) {
    Writer w;
    w.out.insert(w.out.end(), kMagic, kMagic + 4);
    w.u16(kVersion);
    w.u8(1); // single-user
    w.u8(1);
    w.u32(compute_model_id(model.store));
    w.f64(model.lambda);
    w.u16(model.lambda_code);
    write_config(w, model.cfg);
    write_params(w, model.store);
    return std::move(w.out);
}

std::vector<uint8_t> checkpoint_bytes(const MultiUserModel& model) {
    Writer w;
    w.out.insert(w.out.end(), kMagic, kMagic + 4);
    w.u16(kVersion);
    w.u8(2); // multi-user
    w.u8(static_cast<uint8_t>(model.n_users));
    w.u32(compute_model_id(model.store));
    for (int k = 0; k < model.n_users; ++k) {
        w.f64(model.lambdas[static_cast<size_t>(k)]);
        w.u16(model.lambda_codes[static_cast<size_t>(k)]);
    }
    write_config(w, model.cfg);
    write_params(w, model.store);
    return std::move(w.out);
}

void save_checkpoint(const std::string& path, const SingleUserModel& model) {
    write_file(path, checkpoint_bytes(model));
}

void save_checkpoint(const std::string& path, const MultiUserModel& model) {
    write_file(path, checkpoint_bytes(model));
}

bool checkpoint_is_multi(const std::string& path) {
    const auto buf = read_file(path);
    Parser r = open_parser(buf);
    return r.u8() == 2;
}

SingleUserModel load_single_checkpoint(const std::string& path) {
    const auto buf = read_file(path);
    Parser r = open_parser(buf);
    if (r.u8() != 1) throw CheckpointError("checkpoint: not a single-user model");
    r.u8(); // user count
    const uint32_t stored_id = r.u32();
    const double lambda = r.f64();
    const uint16_t lambda_code = r.u16();
    const CodecConfig cfg = read_config(r);
    SingleUserModel m = SingleUserModel::create(cfg, /*seed=*/0);
    read_params_into(r, m.store);
    m.lambda = lambda;
    m.lambda_code = lambda_code;
    m.refresh_tables();
    if (m.model_id != stored_id)
        throw CheckpointError("checkpoint: model id mismatch (corrupted parameter payload)");
    return m;
}

MultiUserModel load_multi_checkpoint(const std::string& path) {
    const auto buf = read_file(path);
    Parser r = open_parser(buf);
    if (r.u8() != 2) throw CheckpointError("checkpoint: not a multi-user model");
    const int n_users = r.u8();
    const uint32_t stored_id = r.u32();
    std::vector<double> lambdas;
    std::vector<uint16_t> codes;
    for (int k = 0; k < n_users; ++k) {
        lambdas.push_back(r.f64());
        codes.push_back(r.u16());
    }
    const CodecConfig cfg = read_config(r);
    MultiUserModel m = MultiUserModel::create(cfg, n_users, /*seed=*/0);
    read_params_into(r, m.store);
    m.lambdas = std::move(lambdas);
    m.lambda_codes = std::move(codes);
    m.refresh_tables();
    if (m.model_id != stored_id)
        throw CheckpointError("checkpoint: model id mismatch (corrupted parameter payload)");
    return m;
}

} // namespace cmc
