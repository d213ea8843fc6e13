#include "flipreid/hashing.hpp"

#include <openssl/evp.h>

#include <array>
#include <memory>
#include <stdexcept>

namespace flipreid {

namespace {

std::string to_hex(const unsigned char *digest, std::size_t n) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(n * 2, '0');
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = kHex[digest[i] >> 4];
    out[2 * i + 1] = kHex[digest[i] & 0xf];
  }
  return out;
}

std::string sha1_parts(std::span<const std::span<const std::uint8_t>> parts) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("SHA-1 initialisation failed");
  for (auto p : parts)
    EVP_DigestUpdate(ctx.get(), p.data(), p.size());
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  return to_hex(digest.data(), len);
}

} // namespace

std::string sha1_hex(std::span<const std::uint8_t> data) {
  const std::span<const std::uint8_t> parts[] = {data};
  return sha1_parts(parts);
}

std::string sha1_hex(std::string_view text) {
  return sha1_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
}

std::string git_blob_hash(std::span<const std::uint8_t> data) {
  const std::string header = "blob " + std::to_string(data.size()) + '\0';
  const std::span<const std::uint8_t> parts[] = {
      {reinterpret_cast<const std::uint8_t *>(header.data()), header.size()}, data};
  return sha1_parts(parts);
}

} // namespace flipreid
