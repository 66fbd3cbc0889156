#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbsp/error.hpp"
#include "dbsp/mask.hpp"

namespace dbsp {

// Binary mask file layout (little-endian):
//   bytes 0..7   magic "DBSPMSK1"
//   u32 version (= 1), num_heads, num_q_blocks, num_kv_blocks, block_size
//   num_heads * num_q_blocks rows, each ceil(num_kv_blocks / 8) bytes,
//   bit k stored in row byte k/8 at position k%8 (LSB first).
// A JSON sidecar ({heads, q_blocks, kv_blocks, block_size, rows: [hex, ...]})
// is accepted on load for hand-written fixtures.

namespace detail {

constexpr char kMaskMagic[8] = {'D', 'B', 'S', 'P', 'M', 'S', 'K', '1'};
constexpr uint32_t kMaskVersion = 1;
constexpr size_t kMaskHeaderBytes = 8 + 5 * 4;
// Header fields are u32 but a corrupt file must not drive allocations wild.
constexpr uint64_t kMaxDimension = 1u << 20;

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32(const std::string& data, size_t offset) {
  return static_cast<uint32_t>(static_cast<uint8_t>(data[offset])) |
         static_cast<uint32_t>(static_cast<uint8_t>(data[offset + 1])) << 8 |
         static_cast<uint32_t>(static_cast<uint8_t>(data[offset + 2])) << 16 |
         static_cast<uint32_t>(static_cast<uint8_t>(data[offset + 3])) << 24;
}

inline size_t row_bytes(uint32_t num_kv_blocks) { return (num_kv_blocks + 7) / 8; }

inline void append_row(std::string& out, const BlockMask& m, uint32_t q) {
  const size_t nbytes = row_bytes(m.num_kv_blocks());
  for (size_t b = 0; b < nbytes; ++b) {
    const size_t word = (b * 8) / 64;
    const size_t shift = (b * 8) % 64;
    out.push_back(static_cast<char>((m.row_word(q, word) >> shift) & 0xff));
  }
}

// Atomic write: stage to a sibling temp file, then rename into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& data) {
  namespace fs = std::filesystem;
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open '" + tmp.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw io_error("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw io_error("cannot rename '" + tmp.string() + "' to '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

inline AttentionMaskSet mask_set_from_sidecar(const std::string& text,
                                              const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(origin + ": invalid JSON sidecar: " + e.what());
  }
  try {
    const uint32_t heads = j.at("heads").get<uint32_t>();
    const uint32_t nq = j.at("q_blocks").get<uint32_t>();
    const uint32_t nk = j.at("kv_blocks").get<uint32_t>();
    const uint32_t block_size = j.at("block_size").get<uint32_t>();
    if (heads == 0 || nq == 0 || nk == 0 || block_size == 0)
      throw parse_error(origin + ": sidecar dimensions must be positive");
    const auto& rows = j.at("rows");
    if (rows.size() != static_cast<size_t>(heads) * nq)
      throw parse_error(origin + ": sidecar needs heads*q_blocks row strings, got " +
                        std::to_string(rows.size()));
    const size_t nbytes = row_bytes(nk);
    std::vector<BlockMask> masks(heads, BlockMask(nq, nk));
    size_t r = 0;
    for (uint32_t h = 0; h < heads; ++h)
      for (uint32_t q = 0; q < nq; ++q, ++r) {
        const std::string hex = rows[r].get<std::string>();
        if (hex.size() != nbytes * 2)
          throw parse_error(origin + ": row " + std::to_string(r) + " needs " +
                            std::to_string(nbytes * 2) + " hex chars");
        for (size_t b = 0; b < nbytes; ++b) {
          auto nibble = [&](char c) -> uint32_t {
            if (c >= '0' && c <= '9') return static_cast<uint32_t>(c - '0');
            if (c >= 'a' && c <= 'f') return static_cast<uint32_t>(c - 'a' + 10);
            if (c >= 'A' && c <= 'F') return static_cast<uint32_t>(c - 'A' + 10);
            throw parse_error(origin + ": row " + std::to_string(r) +
                              " has a non-hex character");
          };
          const uint32_t byte = (nibble(hex[2 * b]) << 4) | nibble(hex[2 * b + 1]);
          for (uint32_t bit = 0; bit < 8; ++bit) {
            const uint32_t k = static_cast<uint32_t>(b * 8 + bit);
            if (k < nk && ((byte >> bit) & 1u)) masks[h].set(q, k, true);
          }
        }
      }
    return AttentionMaskSet(std::move(masks), block_size);
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(origin + ": sidecar is missing a required key: " + e.what());
  }
}

}  // namespace detail

inline void save_mask_set(const AttentionMaskSet& set, const std::filesystem::path& path) {
  std::string out;
  const size_t payload =
      static_cast<size_t>(set.num_heads()) * set.num_q_blocks() *
      detail::row_bytes(set.num_kv_blocks());
  out.reserve(detail::kMaskHeaderBytes + payload);
  out.append(detail::kMaskMagic, sizeof(detail::kMaskMagic));
  detail::put_u32(out, detail::kMaskVersion);
  detail::put_u32(out, set.num_heads());
  detail::put_u32(out, set.num_q_blocks());
  detail::put_u32(out, set.num_kv_blocks());
  detail::put_u32(out, set.block_size());
  for (uint32_t h = 0; h < set.num_heads(); ++h)
    for (uint32_t q = 0; q < set.num_q_blocks(); ++q)
      detail::append_row(out, set.head(h), q);
  detail::write_file_atomic(path, out);
}

inline AttentionMaskSet load_mask_set(const std::filesystem::path& path) {
  const std::string data = detail::read_file(path);
  const std::string origin = path.string();

  if (data.size() < sizeof(detail::kMaskMagic) ||
      std::memcmp(data.data(), detail::kMaskMagic, sizeof(detail::kMaskMagic)) != 0) {
    // Fixture sidecars are JSON objects; anything else is a corrupt file.
    const size_t first = data.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && data[first] == '{')
      return detail::mask_set_from_sidecar(data, origin);
    throw parse_error(origin + ": bad magic at byte 0");
  }
  if (data.size() < detail::kMaskHeaderBytes)
    throw parse_error(origin + ": truncated header at byte " + std::to_string(data.size()));

  const uint32_t version = detail::get_u32(data, 8);
  if (version != detail::kMaskVersion)
    throw parse_error(origin + ": unsupported version " + std::to_string(version) +
                      " at byte 8");
  const uint32_t heads = detail::get_u32(data, 12);
  const uint32_t nq = detail::get_u32(data, 16);
  const uint32_t nk = detail::get_u32(data, 20);
  const uint32_t block_size = detail::get_u32(data, 24);
  if (heads == 0 || nq == 0 || nk == 0 || block_size == 0 ||
      heads > detail::kMaxDimension || nq > detail::kMaxDimension ||
      nk > detail::kMaxDimension)
    throw parse_error(origin + ": dimension out of range at byte 12");

  const uint64_t payload = static_cast<uint64_t>(heads) * nq * detail::row_bytes(nk);
  const uint64_t expected = detail::kMaskHeaderBytes + payload;
  if (data.size() != expected)
    throw parse_error(origin + ": payload size mismatch: expected " +
                      std::to_string(expected) + " bytes, got " +
                      std::to_string(data.size()) + " (payload starts at byte " +
                      std::to_string(detail::kMaskHeaderBytes) + ")");

  std::vector<BlockMask> masks(heads, BlockMask(nq, nk));
  size_t offset = detail::kMaskHeaderBytes;
  const size_t nbytes = detail::row_bytes(nk);
  for (uint32_t h = 0; h < heads; ++h)
    for (uint32_t q = 0; q < nq; ++q) {
      for (size_t b = 0; b < nbytes; ++b) {
        const uint32_t byte = static_cast<uint8_t>(data[offset + b]);
        if (byte == 0) continue;
        for (uint32_t bit = 0; bit < 8; ++bit) {
          const uint32_t k = static_cast<uint32_t>(b * 8 + bit);
          if (k >= nk) {
            if ((byte >> bit) & 1u)
              throw parse_error(origin + ": padding bit set at byte " +
                                std::to_string(offset + b));
            continue;
          }
          if ((byte >> bit) & 1u) masks[h].set(q, k, true);
        }
      }
      offset += nbytes;
    }
  return AttentionMaskSet(std::move(masks), block_size);
}

}  // namespace dbsp
