#include "cmc/dataset.hpp"

#include "cmc/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

namespace cmc {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'I', 'D'};
constexpr uint16_t kVersion = 1;

struct FileCloser {
    void operator()(FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(uint8_t(v & 0xff));
    out.push_back(uint8_t(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;

    bool exhausted() const { return pos >= n; }
    size_t remaining() const { return n - pos; }

    void need(size_t k, const char* what) {
        if (pos + k > n)
            throw DatasetError(DatasetError::Kind::Truncated,
                               std::string("dataset: truncated file while reading ") + what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = uint16_t(p[pos]) | uint16_t(p[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

std::vector<uint8_t> read_file(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw DatasetError(DatasetError::Kind::Io, "dataset: cannot open " + path);
    std::fseek(f.get(), 0, SEEK_END);
    const long size = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    std::vector<uint8_t> buf(static_cast<size_t>(size < 0 ? 0 : size));
    if (!buf.empty() && std::fread(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw DatasetError(DatasetError::Kind::Io, "dataset: read failed for " + path);
    return buf;
}

} // namespace

ChannelMatrix to_storage_precision(const ChannelMatrix& m) {
    ChannelMatrix out = m;
    for (cplx& v : out.data) v = cplx(round_f32(v.real()), round_f32(v.imag()));
    out.pos_x = round_f32(out.pos_x);
    out.pos_y = round_f32(out.pos_y);
    return out;
}

void write_dataset(const std::string& path, const std::vector<ChannelMatrix>& matrices) {
    int n_c = matrices.empty() ? 0 : matrices[0].n_c;
    int n_t = matrices.empty() ? 0 : matrices[0].n_t;
    bool positions = !matrices.empty() && matrices[0].has_position;
    for (const auto& m : matrices) {
        if (m.n_c != n_c || m.n_t != n_t ||
            m.data.size() != static_cast<size_t>(n_c) * static_cast<size_t>(n_t))
            throw DatasetError(DatasetError::Kind::ShapeMismatch,
                               "dataset: matrices must share one shape");
        if (m.has_position != positions)
            throw DatasetError(DatasetError::Kind::ShapeMismatch,
                               "dataset: positions must be present for all matrices or none");
    }

    std::vector<uint8_t> out;
    out.reserve(18 + matrices.size() * static_cast<size_t>(n_c) * n_t * 8);
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kVersion);
    put_u32(out, static_cast<uint32_t>(n_c));
    put_u32(out, static_cast<uint32_t>(n_t));
    put_u32(out, static_cast<uint32_t>(matrices.size()));
    for (const auto& m : matrices)
        for (const cplx& v : m.data) {
            put_f32(out, float(v.real()));
            put_f32(out, float(v.imag()));
        }
    if (positions)
        for (const auto& m : matrices) {
            put_f32(out, float(m.pos_x));
            put_f32(out, float(m.pos_y));
        }

    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw DatasetError(DatasetError::Kind::Io, "dataset: cannot open " + path + " for write");
    if (!out.empty() && std::fwrite(out.data(), 1, out.size(), f.get()) != out.size())
        throw DatasetError(DatasetError::Kind::Io, "dataset: write failed for " + path);
}

std::vector<ChannelMatrix> read_dataset(const std::string& path) {
    std::vector<uint8_t> buf = read_file(path);
    Reader r{buf.data(), buf.size()};

    r.need(4, "magic");
    if (std::memcmp(r.p, kMagic, 4) != 0)
        throw DatasetError(DatasetError::Kind::MalformedHeader, "dataset: bad magic bytes");
    r.pos += 4;
    const uint16_t version = r.u16("version");
    if (version != kVersion)
        throw DatasetError(DatasetError::Kind::MalformedHeader,
                           "dataset: unsupported version " + std::to_string(version));
    const uint32_t n_c = r.u32("n_c");
    const uint32_t n_t = r.u32("n_t");
    const uint32_t count = r.u32("count");

    std::vector<ChannelMatrix> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        ChannelMatrix m;
        m.n_c = static_cast<int>(n_c);
        m.n_t = static_cast<int>(n_t);
        m.data.resize(static_cast<size_t>(n_c) * n_t);
        for (cplx& v : m.data) {
            const double re = r.f32("matrix entries");
            const double im = r.f32("matrix entries");
            v = cplx(re, im);
        }
        out.push_back(std::move(m));
    }

    if (r.remaining() == static_cast<size_t>(count) * 8 && count > 0) {
        for (auto& m : out) {
            m.pos_x = r.f32("positions");
            m.pos_y = r.f32("positions");
            m.has_position = true;
        }
    } else if (r.remaining() != 0) {
        throw DatasetError(DatasetError::Kind::Truncated,
                           "dataset: trailing bytes do not form a position block");
    }
    return out;
}

} // namespace cmc
