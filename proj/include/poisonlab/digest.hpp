#pragma once

#include <cstdint>
#include <string>

namespace poisonlab {

class Tensor;

// SHA-256 hex digests used to pin artifacts (datasets, triggers, configs)
// inside run records.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string digest_tensor(const Tensor& t);

}  // namespace poisonlab
