#pragma once

#include "clens/error.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>

namespace clens::util {

inline std::string to_hex(std::span<const unsigned char> bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char b : bytes) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xf]);
  }
  return out;
}

inline std::string digest_hex(const EVP_MD* md, std::span<const std::string_view> parts) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("EVP_MD_CTX_new failed");
  std::array<unsigned char, EVP_MAX_MD_SIZE> buf{};
  unsigned int len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, md, nullptr) == 1 && [&] {
    for (auto p : parts)
      if (EVP_DigestUpdate(ctx, p.data(), p.size()) != 1) return false;
    return true;
  }() && EVP_DigestFinal_ex(ctx, buf.data(), &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("digest computation failed");
  return to_hex({buf.data(), len});
}

inline std::string sha256_hex(std::string_view data) {
  const std::string_view parts[] = {data};
  return digest_hex(EVP_sha256(), parts);
}

/// Git blob object id: sha1("blob <size>\0" + content).
inline std::string git_blob_hash(std::string_view data) {
  const std::string header = "blob " + std::to_string(data.size());
  const std::string_view parts[] = {header, std::string_view("\0", 1), data};
  return digest_hex(EVP_sha1(), parts);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string file_hash(const std::string& path) { return git_blob_hash(read_file(path)); }

}  // namespace clens::util
