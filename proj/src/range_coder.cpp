#include "cmc/range_coder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cmc {

void PmfTable::validate() const {
    if (n_max < n_min) throw CoderError("pmf: empty support");
    if (freq.size() != static_cast<size_t>(support_size()))
        throw CoderError("pmf: frequency count does not match support");
    uint64_t total = escape_freq;
    for (uint32_t f : freq) {
        if (f == 0) throw CoderError("pmf: zero frequency inside support");
        total += f;
    }
    if (escape_freq == 0) throw CoderError("pmf: zero escape frequency");
    if (total != kPmfTotal) throw CoderError("pmf: frequencies must sum to 2^16");
}

void PmfTable::finalize() {
    validate();
    cum.assign(freq.size() + 2, 0);
    uint32_t acc = 0;
    for (size_t i = 0; i < freq.size(); ++i) {
        cum[i] = acc;
        acc += freq[i];
    }
    cum[freq.size()] = acc;             // escape starts here
    cum[freq.size() + 1] = acc + escape_freq; // == kPmfTotal
}

double PmfTable::bits_of(int32_t symbol) const {
    if (symbol < n_min || symbol > n_max)
        return -std::log2(double(escape_freq) / double(kPmfTotal)) + 32.0;
    return -std::log2(double(freq[static_cast<size_t>(symbol - n_min)]) / double(kPmfTotal));
}

namespace {

// Carry handling follows the deferred-flush scheme: `low` lives in 64 bits so
// a carry shows up in bit 32 and is folded into the pending byte run during
// renormalization. The first emitted byte is a 0/1 carry slot that the
// decoder absorbs in its initial fill.
class RangeEncoder {
public:
    explicit RangeEncoder(std::vector<uint8_t>& out) : out_(out) {}

    void encode(uint32_t cum_lo, uint32_t f) {
        normalize();
        const uint32_t r = range_ >> kPmfPrecisionBits;
        low_ += uint64_t(cum_lo) * r;
        range_ = f * r;
    }

    void flush() {
        const uint32_t lo32 = uint32_t(low_);
        const uint32_t hi32 = uint32_t(low_ >> 32);
        out_.push_back(uint8_t(pending_first_ + hi32));
        while (--pending_len_) out_.push_back(uint8_t(0xffu + hi32));
        out_.push_back(uint8_t(lo32 >> 24));
        out_.push_back(uint8_t(lo32 >> 16));
        out_.push_back(uint8_t(lo32 >> 8));
        out_.push_back(uint8_t(lo32));
    }

private:
    void normalize() {
        while (range_ <= 0xffffffu) {
            const uint32_t lo32 = uint32_t(low_);
            const uint32_t hi32 = uint32_t(low_ >> 32);
            if (lo32 < 0xff000000u || hi32 != 0) {
                out_.push_back(uint8_t(pending_first_ + hi32));
                while (--pending_len_) out_.push_back(uint8_t(0xffu + hi32));
                pending_first_ = uint8_t(lo32 >> 24);
            }
            ++pending_len_;
            low_ = uint32_t(lo32 << 8); // the emitted (or deferred) top byte drops out
            range_ <<= 8;
        }
    }

    std::vector<uint8_t>& out_;
    uint64_t low_ = 0;
    uint32_t range_ = 0xffffffffu;
    uint32_t pending_len_ = 1;
    uint8_t pending_first_ = 0;
};

class RangeDecoder {
public:
    RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
        for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next_byte();
    }

    // cumulative-frequency target of the pending symbol
    uint32_t target() {
        normalize();
        r_ = range_ >> kPmfPrecisionBits;
        uint32_t t = code_ / r_;
        return t >= kPmfTotal ? kPmfTotal - 1 : t;
    }

    void consume(uint32_t cum_lo, uint32_t f) {
        code_ -= cum_lo * r_;
        range_ = f * r_;
    }

private:
    uint8_t next_byte() {
        if (pos_ >= size_) throw CoderError("bitstream: truncated payload");
        return data_[pos_++];
    }

    void normalize() {
        while (range_ <= 0xffffffu) {
            code_ = (code_ << 8) | next_byte();
            range_ <<= 8;
        }
    }

    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    uint32_t code_ = 0;
    uint32_t range_ = 0xffffffffu;
    uint32_t r_ = 0;
};

size_t channel_of(size_t i, const StreamHeader& h, size_t n_tables) {
    if (n_tables == 1) return 0;
    const size_t plane = size_t(h.h) * size_t(h.w);
    return plane == 0 ? 0 : std::min(i / plane, n_tables - 1);
}

} // namespace

Bitstream rc_encode(std::span<const int32_t> symbols, const std::vector<PmfTable>& tables,
                    const StreamHeader& header) {
    if (tables.empty()) throw CoderError("encode: no tables");
    for (const auto& t : tables)
        if (t.cum.empty()) throw CoderError("encode: tables must be finalized");
    const size_t expected = size_t(header.c) * size_t(header.h) * size_t(header.w);
    if (symbols.size() != expected)
        throw CoderError("encode: symbol count does not match header shape");

    Bitstream bs;
    bs.header = header;
    if (symbols.empty()) {
        bs.payload_bit_len = 0;
        return bs;
    }

    RangeEncoder enc(bs.payload);
    for (size_t i = 0; i < symbols.size(); ++i) {
        const PmfTable& t = tables[channel_of(i, header, tables.size())];
        const int32_t s = symbols[i];
        if (s >= t.n_min && s <= t.n_max) {
            const size_t idx = static_cast<size_t>(s - t.n_min);
            enc.encode(t.cum[idx], t.freq[idx]);
        } else {
            // escape, then the raw value as two uniform 16-bit symbols
            enc.encode(t.cum[t.freq.size()], t.escape_freq);
            const uint32_t v = static_cast<uint32_t>(s);
            enc.encode(v >> 16, 1);
            enc.encode(v & 0xffffu, 1);
        }
    }
    enc.flush();
    bs.payload_bit_len = static_cast<uint32_t>(bs.payload.size() * 8);
    return bs;
}

std::vector<int32_t> rc_decode(const Bitstream& stream, const std::vector<PmfTable>& tables,
                               uint32_t expected_model_id) {
    if (stream.header.model_id != expected_model_id)
        throw CoderError("bitstream: model id mismatch (stream " +
                         std::to_string(stream.header.model_id) + ", decoder " +
                         std::to_string(expected_model_id) + ")");
    if (tables.empty()) throw CoderError("decode: no tables");
    for (const auto& t : tables)
        if (t.cum.empty()) throw CoderError("decode: tables must be finalized");

    const size_t count =
        size_t(stream.header.c) * size_t(stream.header.h) * size_t(stream.header.w);
    std::vector<int32_t> out;
    out.reserve(count);
    if (count == 0) return out;

    RangeDecoder dec(stream.payload.data(), stream.payload.size());
    for (size_t i = 0; i < count; ++i) {
        const PmfTable& t = tables[channel_of(i, stream.header, tables.size())];
        const uint32_t target = dec.target();
        // cum has support_size()+2 entries; find the bucket containing target
        const auto it = std::upper_bound(t.cum.begin(), t.cum.end(), target);
        const size_t idx = static_cast<size_t>(it - t.cum.begin()) - 1;
        if (idx < t.freq.size()) {
            dec.consume(t.cum[idx], t.freq[idx]);
            out.push_back(t.n_min + static_cast<int32_t>(idx));
        } else {
            dec.consume(t.cum[t.freq.size()], t.escape_freq);
            const uint32_t hi = dec.target();
            dec.consume(hi, 1);
            const uint32_t lo = dec.target();
            dec.consume(lo, 1);
            out.push_back(static_cast<int32_t>((hi << 16) | lo));
        }
    }
    return out;
}

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(uint8_t(v & 0xff));
    out.push_back(uint8_t(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

} // namespace

std::vector<uint8_t> serialize_bitstream(const Bitstream& stream) {
    std::vector<uint8_t> out;
    out.reserve(21 + stream.payload.size());
    out.insert(out.end(), {'C', 'M', 'C', 'B'});
    out.push_back(stream.version);
    put_u32(out, stream.header.model_id);
    put_u16(out, stream.header.lambda_code);
    put_u16(out, stream.header.c);
    put_u16(out, stream.header.h);
    put_u16(out, stream.header.w);
    put_u32(out, stream.payload_bit_len);
    out.insert(out.end(), stream.payload.begin(), stream.payload.end());
    return out;
}

Bitstream deserialize_bitstream(std::span<const uint8_t> bytes, size_t& offset) {
    auto need = [&](size_t k) {
        if (offset + k > bytes.size()) throw CoderError("bitstream: truncated header");
    };
    need(4);
    if (std::memcmp(bytes.data() + offset, "CMCB", 4) != 0)
        throw CoderError("bitstream: bad magic");
    offset += 4;
    need(1);
    const uint8_t version = bytes[offset++];
    if (version != kStreamVersionCoded && version != kStreamVersionRaw)
        throw CoderError("bitstream: unsupported version");
    auto u16 = [&]() {
        need(2);
        uint16_t v = uint16_t(bytes[offset]) | uint16_t(bytes[offset + 1]) << 8;
        offset += 2;
        return v;
    };
    auto u32 = [&]() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[offset + i]) << (8 * i);
        offset += 4;
        return v;
    };
    Bitstream bs;
    bs.version = version;
    bs.header.model_id = u32();
    bs.header.lambda_code = u16();
    bs.header.c = u16();
    bs.header.h = u16();
    bs.header.w = u16();
    bs.payload_bit_len = u32();
    const size_t payload_bytes = (size_t(bs.payload_bit_len) + 7) / 8;
    if (offset + payload_bytes > bytes.size())
        throw CoderError("bitstream: truncated payload");
    bs.payload.assign(bytes.begin() + long(offset), bytes.begin() + long(offset + payload_bytes));
    offset += payload_bytes;
    return bs;
}

} // namespace cmc
