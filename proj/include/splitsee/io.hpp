#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitsee/autograd.hpp"

namespace splitsee {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Malformed or corrupted file contents, with the byte offset where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }

  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  void put_crc() { put<std::uint32_t>(crc32_of(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    require(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    require(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::span<const std::uint8_t> get_bytes(std::size_t n, const char* what) {
    require(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void require(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated payload reading ") + what, pos_);
    }
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Validates `magic` at the start and a trailing CRC32 over everything before it.
/// Returns a reader positioned after the magic, bounded before the CRC.
inline ByteReader open_checked(std::span<const std::uint8_t> bytes, const std::array<char, 4>& magic) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic.data(), 4) != 0) {
    throw FormatError("bad magic, expected \"" + std::string(magic.begin(), magic.end()) + "\"", 0);
  }
  if (bytes.size() < 8) {
    throw FormatError("truncated payload, no room for checksum", bytes.size());
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc32_of(bytes.first(body)) != stored) {
    throw FormatError("checksum mismatch", body);
  }
  ByteReader r(bytes.first(body));
  r.get_bytes(4, "magic");
  return r;
}

/// Table of named float tensors: u32 count, then per entry a length-prefixed
/// UTF-8 name, u32 rank, u32 dims, and row-major binary32 data.
template <class S>
void write_tensor_table(ByteWriter& w, const ParamStore<S>& table) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& m = table.value(i);
    w.put_string(table.name(i));
    w.put<std::uint32_t>(2);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (Index k = 0; k < m.size(); ++k) {
      w.put<float>(static_cast<float>(m.data()[k]));
    }
  }
}

inline ParamStore<float> read_tensor_table(ByteReader& r) {
  ParamStore<float> table;
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.position();
    std::string name = r.get_string("tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank < 1 || rank > 2) {
      throw FormatError("tensor " + name + " has unsupported rank " + std::to_string(rank), at);
    }
    std::uint32_t rows = 1;
    std::uint32_t cols = r.get<std::uint32_t>("tensor dims");
    if (rank == 2) {
      rows = cols;
      cols = r.get<std::uint32_t>("tensor dims");
    }
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n > r.remaining() / sizeof(float)) {
      throw FormatError("truncated payload reading tensor " + name, r.position());
    }
    Matrix<float> m(rows, cols);
    for (std::uint64_t k = 0; k < n; ++k) {
      m.data()[k] = r.get<float>("tensor data");
    }
    if (table.contains(name)) {
      throw FormatError("duplicate tensor " + name, at);
    }
    table.add(std::move(name), std::move(m));
  }
  return table;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string() + " for reading");
  }
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temporary and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw std::runtime_error("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace splitsee
