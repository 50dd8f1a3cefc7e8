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

#include <cstddef>
#include <stdexcept>
#include <string>

namespace roundlab
{

/// Base class of every error thrown by the library.
class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Tensor or model shapes do not compose.
class DimensionError : public Error
{
public:
  using Error::Error;
};

/// Convolution geometry does not tile the padded input.
class GeometryError : public Error
{
public:
  using Error::Error;
};

class IndexError : public Error
{
public:
  using Error::Error;
};

/// Invalid argument value (out-of-range rate, empty batch, unlabeled data, ...).
class ArgumentError : public Error
{
public:
  using Error::Error;
};

/// Malformed run configuration.
class ConfigError : public Error
{
public:
  using Error::Error;
};

/// Binary file could not be parsed. Carries the byte offset where parsing failed.
class FormatError : public Error
{
public:
  FormatError(const std::string &what, std::size_t offset)
    : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset)
  {
  }

  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

/// A loss or gradient became non-finite.
class NumericError : public Error
{
public:
  using Error::Error;
};

} // namespace roundlab
