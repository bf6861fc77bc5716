#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cmc/channel.hpp"

namespace cmc {

struct DatasetError : std::runtime_error {
    enum class Kind { MalformedHeader, ShapeMismatch, Truncated, Io };
    Kind kind;
    DatasetError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// CSID container. Layout: magic "CSID" | version u16 | N_c u32 | N_t u32 |
// count u32 | count * N_c * N_t complex entries as little-endian float32
// (re, im) interleaved | optional count * (x, y) float32 positions.
void write_dataset(const std::string& path, const std::vector<ChannelMatrix>& matrices);
std::vector<ChannelMatrix> read_dataset(const std::string& path);

// Casts entries (and positions) to float32 and back, the precision the
// container stores. Applied on write; useful in tests for round-trip identity.
ChannelMatrix to_storage_precision(const ChannelMatrix& m);

} // namespace cmc
