#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vmscan {

// Streaming SHA-256 (OpenSSL EVP underneath).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const uint8_t> data);
  // Finalizes and returns the lowercase hex digest. One-shot: the object
  // cannot be reused afterwards.
  std::string finish_hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::span<const uint8_t> data);
std::string sha256_hex(const std::string& text);
std::string sha256_file_hex(const std::string& path);

}  // namespace vmscan
