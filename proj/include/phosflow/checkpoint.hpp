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

#ifndef PHOSFLOW_CHECKPOINT_HPP
#define PHOSFLOW_CHECKPOINT_HPP

// "PFCK" container: named dense arrays in a flat little-endian file.
//
//   magic "PFCK" | version u32 | entry count u32 |
//   per entry: name length u16, UTF-8 name, dtype u8 (0 f32, 1 f64),
//              rank u8, extents u32 x rank, raw values.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "phosflow/array.hpp"

namespace phosflow {

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;
  using Entry = std::variant<Array<float>, Array<double>>;

  void put(std::string name, Array<float> value);
  void put(std::string name, Array<double> value);
  void put_scalar(std::string name, double value) { put(std::move(name), Array<double>::scalar(value)); }

  bool contains(std::string_view name) const;
  /// Converts between f32 and f64 on request. Throws FormatError when absent.
  template <typename T>
  Array<T> get(std::string_view name) const;
  double scalar(std::string_view name) const;
  double scalar_or(std::string_view name, double fallback) const;

  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(const std::vector<std::uint8_t>& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  const Entry& find(std::string_view name) const;
  void put_entry(std::string name, Entry e);

  std::vector<std::pair<std::string, Entry>> entries_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace phosflow

#endif  // PHOSFLOW_CHECKPOINT_HPP
