/*
 * Copyright 2026 The roundlab Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "roundlab/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

namespace roundlab::io
{

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

/// Little-endian byte sink.
class Writer
{
public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void f32(float v) { put(v); }

  const std::vector<char> &buffer() const noexcept { return buf_; }

private:
  template <typename T> void put(T v)
  {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf_.insert(buf_.end(), raw, raw + sizeof(T));
  }

  std::vector<char> buf_;
};

/// Little-endian byte source that reports the failing offset on truncation.
class Reader
{
public:
  explicit Reader(std::vector<char> data) : data_(std::move(data)) {}

  void expect_magic(std::string_view magic, std::string_view what)
  {
    need(magic.size(), what);
    if (std::string_view(&data_[pos_], magic.size()) != magic)
      throw FormatError(std::string(what) + ": bad magic, expected \"" + std::string(magic) + "\"", pos_);
    pos_ += magic.size();
  }

  std::uint8_t u8(std::string_view what) { return get<std::uint8_t>(what); }
  std::uint16_t u16(std::string_view what) { return get<std::uint16_t>(what); }
  std::uint32_t u32(std::string_view what) { return get<std::uint32_t>(what); }
  float f32(std::string_view what) { return get<float>(what); }

  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  void expect_end(std::string_view what) const
  {
    if (!at_end())
      throw FormatError(std::string(what) + ": trailing bytes", pos_);
  }

private:
  void need(std::size_t n, std::string_view what) const
  {
    if (pos_ + n > data_.size())
      throw FormatError("truncated while reading " + std::string(what), pos_);
  }

  template <typename T> T get(std::string_view what)
  {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, &data_[pos_], sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::vector<char> data_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Write through a sibling temp file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path &path, std::string_view content)
{
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw ConfigError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out)
      throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path &path, const std::vector<char> &content)
{
  write_file_atomic(path, std::string_view(content.data(), content.size()));
}

} // namespace roundlab::io
