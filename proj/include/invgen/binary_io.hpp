// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian container shared by dataset and checkpoint files:
//
//   magic[4] | u32 version | u32 header_len | header (JSON text)
//   | u64 payload_len | payload bytes | u32 crc32(all preceding bytes)

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "invgen/common.hpp"

namespace invgen::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  template <typename T>
  void put_array(const T* data, std::size_t n) {
    const auto* p = reinterpret_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n * sizeof(T));
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size, std::string context)
      : data_(data), size_(size), context_(std::move(context)) {}

  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  void get_array(T* out, std::size_t n) {
    need(n * sizeof(T));
    std::memcpy(out, data_ + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) {
      throw TruncationError(context_ + ": file truncated (needed " +
                            std::to_string(n) + " bytes at offset " +
                            std::to_string(pos_) + ", " +
                            std::to_string(size_ - pos_) + " available)");
    }
  }
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; chunk to stay portable for large payloads
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Frames `payload` behind magic/version/header and appends the checksum.
inline std::vector<char> frame(std::string_view magic, std::uint32_t version,
                               const std::string& header,
                               const std::vector<char>& payload) {
  Writer w;
  w.put_bytes(magic);
  w.put<std::uint32_t>(version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
  w.put_bytes(header);
  w.put<std::uint64_t>(payload.size());
  w.put_array(payload.data(), payload.size());
  std::vector<char> out = w.bytes();
  const std::uint32_t crc = crc32_of(out.data(), out.size());
  const auto* p = reinterpret_cast<const char*>(&crc);
  out.insert(out.end(), p, p + sizeof(crc));
  return out;
}

struct Framed {
  std::uint32_t version = 0;
  std::string header;
  std::vector<char> payload;
};

/// Reverses `frame`. Checks, in order: magic, version, truncation, checksum.
inline Framed unframe(const std::vector<char>& bytes, std::string_view magic,
                      std::uint32_t supported_version,
                      const std::string& context) {
  Reader r(bytes.data(), bytes.size(), context);
  const std::string m = r.get_bytes(magic.size());
  if (m != magic) {
    throw IoError(context + ": bad magic bytes, not a '" + std::string(magic) +
                  "' file");
  }
  Framed f;
  f.version = r.get<std::uint32_t>();
  if (f.version != supported_version) {
    throw VersionError(context + ": file format version " +
                       std::to_string(f.version) +
                       " is not supported (this build reads version " +
                       std::to_string(supported_version) + ")");
  }
  const auto header_len = r.get<std::uint32_t>();
  f.header = r.get_bytes(header_len);
  const auto payload_len = r.get<std::uint64_t>();
  if (r.remaining() < payload_len + sizeof(std::uint32_t)) {
    throw TruncationError(context + ": file truncated (payload declares " +
                          std::to_string(payload_len) + " bytes, " +
                          std::to_string(r.remaining()) +
                          " bytes remain including checksum)");
  }
  if (r.remaining() > payload_len + sizeof(std::uint32_t)) {
    throw IoError(context + ": trailing bytes after checksum");
  }
  const std::size_t body_end = bytes.size() - sizeof(std::uint32_t);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body_end, sizeof(stored));
  const std::size_t payload_begin = bytes.size() - r.remaining();
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload_begin),
                   bytes.begin() + static_cast<std::ptrdiff_t>(body_end));
  const std::uint32_t actual = crc32_of(bytes.data(), body_end);
  if (stored != actual) {
    throw ChecksumError(context + ": checksum mismatch (file corrupt or "
                        "truncated)");
  }
  return f;
}

}  // namespace invgen::io
