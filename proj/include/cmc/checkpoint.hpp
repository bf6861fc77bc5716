#pragma once

#include <string>

#include "cmc/codec.hpp"

namespace cmc {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Binary container: magic "DCMC", version, architecture description, the
// rate-distortion weight(s) the model was trained under, and a named
// parameter table with float32 payloads (entropy-model parameters included).
void save_checkpoint(const std::string& path, const SingleUserModel& model);
void save_checkpoint(const std::string& path, const MultiUserModel& model);

std::vector<uint8_t> checkpoint_bytes(const SingleUserModel& model);
std::vector<uint8_t> checkpoint_bytes(const MultiUserModel& model);

bool checkpoint_is_multi(const std::string& path);

SingleUserModel load_single_checkpoint(const std::string& path);
MultiUserModel load_multi_checkpoint(const std::string& path);

} // namespace cmc
