// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lbw {

// SHA-256 over a byte buffer, hex-encoded. Used for artifact/content hashes
// in dataset provenance, manifests, and determinism checks.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_hex(const std::vector<uint8_t>& v);

// CRC32 (IEEE 802.3 polynomial). Trails the checkpoint file format.
uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

// Incremental SHA-256 for hashing large streams without buffering.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::string hex_digest();  // finalizes; object must not be reused

 private:
  void process_block(const uint8_t* block);
  uint32_t state_[8];
  uint64_t bit_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
  bool finalized_ = false;
};

}  // namespace lbw
