#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "cmc/range_coder.hpp"
#include "cmc/rng.hpp"

using namespace cmc;

namespace {

// fixed-point table from real masses via scaling; remainder goes to the escape
PmfTable table_from_masses(int32_t n_min, const std::vector<double>& masses) {
    PmfTable t;
    t.n_min = n_min;
    t.n_max = n_min + static_cast<int32_t>(masses.size()) - 1;
    double total = std::accumulate(masses.begin(), masses.end(), 0.0);
    uint32_t assigned = 0;
    for (double m : masses) {
        uint32_t f = static_cast<uint32_t>(std::floor(m / total * (kPmfTotal - masses.size() - 1)));
        if (f < 1) f = 1;
        t.freq.push_back(f);
        assigned += f;
    }
    t.escape_freq = kPmfTotal - assigned;
    t.finalize();
    return t;
}

PmfTable random_table(Rng& rng) {
    const int width = 1 + static_cast<int>(rng.below(40));
    std::vector<double> masses;
    for (int i = 0; i < width; ++i) masses.push_back(std::pow(rng.uniform() + 1e-3, 3.0));
    return table_from_masses(static_cast<int32_t>(rng.below(21)) - 10, masses);
}

StreamHeader header_for(size_t count, uint32_t model_id = 0xabcd1234u) {
    StreamHeader h;
    h.model_id = model_id;
    h.lambda_code = 3;
    h.c = 1;
    h.h = 1;
    h.w = static_cast<uint16_t>(count);
    return h;
}

double cross_entropy_bits(const std::vector<int32_t>& symbols, const PmfTable& t) {
    double bits = 0.0;
    for (int32_t s : symbols) bits += t.bits_of(s);
    return bits;
}

int32_t draw_from_table(const PmfTable& t, Rng& rng) {
    const uint32_t target = static_cast<uint32_t>(rng.below(kPmfTotal));
    uint32_t acc = 0;
    for (size_t i = 0; i < t.freq.size(); ++i) {
        acc += t.freq[i];
        if (target < acc) return t.n_min + static_cast<int32_t>(i);
    }
    return t.n_max + 1000; // escape region
}

} // namespace

TEST_CASE("empty sequence gives a zero-bit payload") {
    PmfTable t = table_from_masses(0, {1.0});
    StreamHeader h = header_for(0);
    h.w = 0;
    const Bitstream bs = rc_encode({}, {t}, h);
    CHECK(bs.payload_bit_len == 0);
    CHECK(bs.payload.empty());
    CHECK(rc_decode(bs, {t}, h.model_id).empty());
}

TEST_CASE("uniform 256-symbol source codes near 8 bits per symbol") {
    PmfTable t;
    t.n_min = 0;
    t.n_max = 255;
    t.freq.assign(256, 255); // 256*255 = 65280, escape picks up the rest
    t.escape_freq = kPmfTotal - 256 * 255;
    t.finalize();

    Rng rng(99);
    std::vector<int32_t> symbols;
    for (int i = 0; i < 10000; ++i) symbols.push_back(static_cast<int32_t>(rng.below(256)));
    const Bitstream bs = rc_encode(symbols, {t}, header_for(symbols.size()));
    const double ce = cross_entropy_bits(symbols, t); // ~80057 bits at this precision
    CHECK(double(bs.payload_bit_len) <= 1.02 * ce + 64.0);
    CHECK(double(bs.payload_bit_len) >= ce - 64.0);
    CHECK(rc_decode(bs, {t}, 0xabcd1234u) == symbols);
}

TEST_CASE("highly skewed source approaches its entropy") {
    // P(0) = 0.9 -> 0.152 bits per symbol
    PmfTable t = table_from_masses(-1, {0.05, 0.9, 0.05});
    std::vector<int32_t> symbols(10000, 0);
    const Bitstream bs = rc_encode(symbols, {t}, header_for(symbols.size()));
    const double ce = cross_entropy_bits(symbols, t);
    CHECK(ce == doctest::Approx(10000.0 * 0.152).epsilon(0.01));
    CHECK(double(bs.payload_bit_len) <= 1.02 * ce + 64.0);
    CHECK(double(bs.payload_bit_len) >= ce - 64.0);
    CHECK(rc_decode(bs, {t}, 0xabcd1234u) == symbols);
}

TEST_CASE("round trip across random tables, lengths and escapes") {
    Rng rng(2024);
    for (int trial = 0; trial < 400; ++trial) {
        const PmfTable t = random_table(rng);
        size_t len;
        switch (trial % 4) {
            case 0: len = 0; break;
            case 1: len = 1; break;
            default: len = rng.below(300); break;
        }
        std::vector<int32_t> symbols;
        for (size_t i = 0; i < len; ++i) {
            if (rng.below(20) == 0)
                symbols.push_back(static_cast<int32_t>(rng.next_u64())); // arbitrary 32-bit
            else
                symbols.push_back(draw_from_table(t, rng));
        }
        const Bitstream bs = rc_encode(symbols, {t}, header_for(symbols.size()));
        CHECK(rc_decode(bs, {t}, 0xabcd1234u) == symbols);
    }
}

TEST_CASE("one hundred thousand random symbols over one table") {
    Rng rng(31337);
    const PmfTable t = random_table(rng);
    std::vector<int32_t> symbols;
    for (int i = 0; i < 100000; ++i) symbols.push_back(draw_from_table(t, rng));
    StreamHeader h = header_for(symbols.size());
    h.c = 1;
    h.h = 100;
    h.w = 1000;
    const Bitstream bs = rc_encode(symbols, {t}, h);
    CHECK(rc_decode(bs, {t}, h.model_id) == symbols);
}

TEST_CASE("per-channel tables select by plane index") {
    Rng rng(7);
    std::vector<PmfTable> tables = {random_table(rng), random_table(rng), random_table(rng)};
    StreamHeader h = header_for(0);
    h.c = 3;
    h.h = 2;
    h.w = 4;
    std::vector<int32_t> symbols;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 8; ++i) symbols.push_back(draw_from_table(tables[size_t(c)], rng));
    const Bitstream bs = rc_encode(symbols, tables, h);
    CHECK(rc_decode(bs, tables, h.model_id) == symbols);
}

TEST_CASE("escape path recovers far out-of-range values exactly") {
    PmfTable t = table_from_masses(-2, {0.2, 0.2, 0.2, 0.2, 0.2});
    const std::vector<int32_t> symbols = {0, 1000000000, -7, 2, -2000000000, 0};
    StreamHeader h = header_for(symbols.size());
    const Bitstream bs = rc_encode(symbols, {t}, h);
    CHECK(rc_decode(bs, {t}, h.model_id) == symbols);
}

TEST_CASE("wrong model id is rejected before any output") {
    PmfTable t = table_from_masses(0, {0.5, 0.5});
    const std::vector<int32_t> symbols = {0, 1, 0};
    const Bitstream bs = rc_encode(symbols, {t}, header_for(symbols.size(), 111));
    CHECK_THROWS_AS((void)rc_decode(bs, {t}, 222), CoderError);
}

TEST_CASE("truncated payload is detected") {
    Rng rng(55);
    const PmfTable t = random_table(rng);
    std::vector<int32_t> symbols;
    for (int i = 0; i < 200; ++i) symbols.push_back(draw_from_table(t, rng));
    Bitstream bs = rc_encode(symbols, {t}, header_for(symbols.size()));
    bs.payload.resize(bs.payload.size() / 2);
    CHECK_THROWS_AS((void)rc_decode(bs, {t}, 0xabcd1234u), CoderError);
}

TEST_CASE("bitstream wire format round-trips and is byte-stable") {
    Rng rng(91);
    const PmfTable t = random_table(rng);
    std::vector<int32_t> symbols;
    for (int i = 0; i < 64; ++i) symbols.push_back(draw_from_table(t, rng));
    StreamHeader h = header_for(symbols.size(), 42);
    h.lambda_code = 9;
    const Bitstream bs = rc_encode(symbols, {t}, h);

    const std::vector<uint8_t> bytes1 = serialize_bitstream(bs);
    const std::vector<uint8_t> bytes2 = serialize_bitstream(rc_encode(symbols, {t}, h));
    CHECK(bytes1 == bytes2);

    // fixed layout: magic, version, model id, lambda code, shape, bit length
    REQUIRE(bytes1.size() >= 21);
    CHECK(bytes1[0] == 'C');
    CHECK(bytes1[1] == 'M');
    CHECK(bytes1[2] == 'C');
    CHECK(bytes1[3] == 'B');
    CHECK(bytes1[4] == kStreamVersionCoded);
    CHECK((uint32_t(bytes1[5]) | uint32_t(bytes1[6]) << 8) == 42u);
    CHECK((uint32_t(bytes1[9]) | uint32_t(bytes1[10]) << 8) == 9u);

    size_t offset = 0;
    const Bitstream back = deserialize_bitstream(bytes1, offset);
    CHECK(offset == bytes1.size());
    CHECK(back.header.model_id == bs.header.model_id);
    CHECK(back.header.lambda_code == bs.header.lambda_code);
    CHECK(back.payload == bs.payload);
    CHECK(rc_decode(back, {t}, 42) == symbols);
}

TEST_CASE("pmf tables validate their fixed-point totals") {
    PmfTable t;
    t.n_min = 0;
    t.n_max = 1;
    t.freq = {100, 200};
    t.escape_freq = 1;
    CHECK_THROWS_AS(t.finalize(), CoderError); // does not sum to 2^16
    t.freq = {kPmfTotal - 2, 1};
    t.escape_freq = 1;
    t.finalize();
    CHECK(t.cum.back() == kPmfTotal);
}
