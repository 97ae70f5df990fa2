#pragma once

// Needs OpenSSL::Crypto at link time.

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include "dfstrans/serialization.hpp"

namespace dfstrans {

/// Same digest as `git hash-object`: SHA-1 over "blob <size>\0" + content.
inline std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw IoError("cannot allocate digest context");
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("SHA-1 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

inline std::string git_blob_hash_file(const std::filesystem::path& p) { return git_blob_hash(read_text_file(p)); }

struct RunManifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, blob hash
  std::vector<std::string> outputs;
  double duration_seconds = 0.0;
  std::string started_at;  // UTC, ISO 8601

  void add_input(const std::filesystem::path& p) { inputs.emplace_back(p.string(), git_blob_hash_file(p)); }

  json to_json() const {
    json in = json::array();
    for (const auto& [p, h] : inputs) in.push_back({{"path", p}, {"sha1", h}});
    return {{"command", command},         {"config", config},   {"seed", seed},
            {"inputs", in},               {"outputs", outputs}, {"duration_seconds", duration_seconds},
            {"started_at", started_at}};
  }
};

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline constexpr const char* kManifestName = "manifest.json";

/// Writes `<dir>/manifest.json`, replacing any earlier one.
inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  write_text_file(dir / kManifestName, m.to_json().dump(2) + "\n");
}

}  // namespace dfstrans
