#include "poisonlab/digest.hpp"

#include <openssl/evp.h>

#include <array>
#include <stdexcept>

#include "poisonlab/tensor.hpp"

namespace poisonlab {

std::string sha256_hex(const void* data, size_t len) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int md_len = 0;
  if (!EVP_Digest(data, len, md.data(), &md_len, EVP_sha256(), nullptr))
    throw std::runtime_error("sha256: EVP_Digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(md_len * 2);
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string digest_tensor(const Tensor& t) {
  std::string header = shape_str(t.shape()) + ";";
  std::string payload(header);
  payload.append(reinterpret_cast<const char*>(t.data()),
                 static_cast<size_t>(t.size()) * sizeof(float));
  return sha256_hex(payload);
}

}  // namespace poisonlab
