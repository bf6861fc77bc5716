#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmc {

struct CoderError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kPmfPrecisionBits = 16;
constexpr uint32_t kPmfTotal = 1u << kPmfPrecisionBits;

// Frozen fixed-point coding table for one latent channel. freq covers the
// integer support [n_min, n_max]; one extra escape symbol carries the tail
// mass. All frequencies are >= 1 and sum (incl. escape) to exactly kPmfTotal.
struct PmfTable {
    int32_t n_min = 0;
    int32_t n_max = 0;
    std::vector<uint32_t> freq;
    uint32_t escape_freq = 1;
    std::vector<uint32_t> cum; // prefix sums over freq + escape, built by finalize()

    int32_t support_size() const { return n_max - n_min + 1; }
    void finalize();            // validates totals and builds cum
    void validate() const;

    // information content of one symbol under this table, in bits
    double bits_of(int32_t symbol) const;
};

struct StreamHeader {
    uint32_t model_id = 0;
    uint16_t lambda_code = 0;
    uint16_t c = 0, h = 0, w = 0;
};

// version byte values
constexpr uint8_t kStreamVersionCoded = 1; // range-coded integer payload
constexpr uint8_t kStreamVersionRaw = 2;   // raw float32 latent payload (entropy coding disabled)

struct Bitstream {
    StreamHeader header;
    uint8_t version = kStreamVersionCoded;
    std::vector<uint8_t> payload;
    uint32_t payload_bit_len = 0;
};

// Encodes symbols laid out channel-major: symbol i belongs to channel
// i / (h*w) (or channel 0 everywhere when a single table is given).
// symbols.size() must equal header.c * header.h * header.w.
Bitstream rc_encode(std::span<const int32_t> symbols, const std::vector<PmfTable>& tables,
                    const StreamHeader& header);

std::vector<int32_t> rc_decode(const Bitstream& stream, const std::vector<PmfTable>& tables,
                               uint32_t expected_model_id);

// Exact wire layout, little-endian:
// "CMCB" | version u8 | model_id u32 | lambda_code u16 | C u16 | H u16 | W u16
// | payload_bit_len u32 | payload bytes.
std::vector<uint8_t> serialize_bitstream(const Bitstream& stream);
// Parses one stream starting at offset; advances offset past it.
Bitstream deserialize_bitstream(std::span<const uint8_t> bytes, size_t& offset);

} // namespace cmc
