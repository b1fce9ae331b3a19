// Copyright 2026 The Phosflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "phosflow/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include "phosflow/errors.hpp"

namespace phosflow {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), c, c + n);
  }
  template <typename T>
  void values(const Array<T>& a) {
    for (T v : a.values()) {
      if constexpr (sizeof(T) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        le(bits, 4);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        le(bits, 8);
      }
    }
  }
  std::vector<std::uint8_t> out;

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += static_cast<std::size_t>(n);
    return v;
  }
  void need(std::size_t n, const char* what) {
    if (buf.size() - pos < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte offset " +
                        std::to_string(pos));
    }
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

}  // namespace

void Checkpoint::put_entry(std::string name, Entry e) {
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ParameterError("checkpoint entry name too long");
  for (auto& [n, v] : entries_) {
    if (n == name) {
      v = std::move(e);
      return;
    }
  }
  entries_.emplace_back(std::move(name), std::move(e));
}

void Checkpoint::put(std::string name, Array<float> value) { put_entry(std::move(name), std::move(value)); }
void Checkpoint::put(std::string name, Array<double> value) { put_entry(std::move(name), std::move(value)); }

bool Checkpoint::contains(std::string_view name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return true;
  return false;
}

const Checkpoint::Entry& Checkpoint::find(std::string_view name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw FormatError("checkpoint has no entry '" + std::string(name) + "'");
}

template <typename T>
Array<T> Checkpoint::get(std::string_view name) const {
  return std::visit([](const auto& a) { return a.template cast<T>(); }, find(name));
}

template Array<float> Checkpoint::get<float>(std::string_view) const;
template Array<double> Checkpoint::get<double>(std::string_view) const;

double Checkpoint::scalar(std::string_view name) const { return get<double>(name).item(); }

double Checkpoint::scalar_or(std::string_view name, double fallback) const {
  return contains(name) ? scalar(name) : fallback;
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  Writer w;
  w.bytes("PFCK", 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, entry] : entries_) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    std::visit(
        [&](const auto& a) {
          using T = typename std::decay_t<decltype(a)>::value_type;
          w.u8(sizeof(T) == 4 ? 0 : 1);
          if (a.rank() > 255) throw ParameterError("checkpoint entry rank too large");
          w.u8(static_cast<std::uint8_t>(a.rank()));
          for (auto d : a.shape()) w.u32(static_cast<std::uint32_t>(d));
          w.values(a);
        },
        entry);
  }
  return std::move(w.out);
}

Checkpoint Checkpoint::from_bytes(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), "PFCK", 4) != 0) throw FormatError("not a PFCK checkpoint (bad magic at byte offset 0)");
  r.pos = 4;
  const auto version = static_cast<std::uint32_t>(r.le(4, "version"));
  if (version != kVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kVersion) + "); re-export it with a matching phosflow build");
  }
  const auto count = static_cast<std::uint32_t>(r.le(4, "entry count"));
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = static_cast<std::size_t>(r.le(2, "name length"));
    r.need(len, "name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
    r.pos += len;
    const auto dtype = static_cast<std::uint8_t>(r.le(1, "dtype"));
    const auto rank = static_cast<std::size_t>(r.le(1, "rank"));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.le(4, "extent"));
    const std::size_t n = shape_size(shape);
    if (dtype == 0) {
      std::vector<float> v(n);
      for (auto& x : v) {
        const auto bits = static_cast<std::uint32_t>(r.le(4, "f32 values"));
        std::memcpy(&x, &bits, 4);
      }
      ck.put_entry(std::move(name), Array<float>(shape, std::move(v)));
    } else if (dtype == 1) {
      std::vector<double> v(n);
      for (auto& x : v) {
        const auto bits = r.le(8, "f64 values");
        std::memcpy(&x, &bits, 8);
      }
      ck.put_entry(std::move(name), Array<double>(shape, std::move(v)));
    } else {
      throw FormatError("unknown dtype code " + std::to_string(dtype) + " at byte offset " + std::to_string(r.pos - 1));
    }
  }
  if (r.pos != bytes.size()) throw FormatError("trailing bytes after checkpoint payload at byte offset " + std::to_string(r.pos));
  return ck;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("short write to " + path.string());
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, to_bytes()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return from_bytes(read_file_bytes(path)); }

}  // namespace phosflow
