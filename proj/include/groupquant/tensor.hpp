/*
 * Copyright (c) 2025 The groupquant Authors
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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "groupquant/errors.hpp"

namespace groupquant {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, i32 = 2 };

inline const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::f32: return "f32";
    case Dtype::f64: return "f64";
    case Dtype::i32: return "i32";
  }
  return "unknown";
}

inline std::size_t dtype_size(Dtype d) {
  return d == Dtype::f64 ? 8 : 4;
}

// Dense row-major tensor, the on-disk interchange container. Values live in
// exactly one of three element types; all internal numerics widen to f64.
//
// File layout, little-endian regardless of host:
//   magic "QTNSR1" (6 bytes) | dtype u8 (0=f32, 1=f64, 2=i32) | ndim u8 |
//   ndim x u64 dims | payload, row-major
class Tensor {
public:
  using Shape = std::vector<std::size_t>;

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }
  Tensor(Shape shape, std::vector<std::int32_t> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }

  static Tensor zeros(Dtype dtype, Shape shape) {
    std::size_t n = checked_numel(shape);
    switch (dtype) {
      case Dtype::f32: return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
      case Dtype::f64: return Tensor(std::move(shape), std::vector<double>(n, 0.0));
      case Dtype::i32: return Tensor(std::move(shape), std::vector<std::int32_t>(n, 0));
    }
    throw config_error("unknown dtype");
  }

  Dtype dtype() const { return static_cast<Dtype>(data_.index()); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape_) n *= d;
    return n;
  }

  const std::vector<float>& data_f32() const { return typed<float>(); }
  const std::vector<double>& data_f64() const { return typed<double>(); }
  const std::vector<std::int32_t>& data_i32() const { return typed<std::int32_t>(); }

  // Widened copy of the payload; i32 and f32 convert exactly.
  std::vector<double> as_f64() const {
    std::vector<double> out(numel());
    std::visit(
        [&](const auto& v) {
          for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]);
        },
        data_);
    return out;
  }

  bool operator==(const Tensor& other) const = default;

private:
  template <typename T>
  const std::vector<T>& typed() const {
    const auto* p = std::get_if<std::vector<T>>(&data_);
    if (!p) throw config_error(std::string("tensor dtype is ") + dtype_name(dtype()));
    return *p;
  }

  static std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw config_error("tensor shape must have at least one dimension");
    std::size_t n = 1;
    for (auto d : shape) {
      if (d < 1) throw config_error("tensor dimensions must be >= 1");
      if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d)
        throw config_error("tensor shape overflows size_t");
      n *= d;
    }
    return n;
  }

  void validate() const {
    const std::size_t n = checked_numel(shape_);
    const std::size_t have = std::visit([](const auto& v) { return v.size(); }, data_);
    if (n != have)
      throw config_error("tensor data length " + std::to_string(have) +
                         " does not match shape product " + std::to_string(n));
  }

  Shape shape_;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::int32_t>> data_;
};

namespace detail {

inline constexpr char kTensorMagic[6] = {'Q', 'T', 'N', 'S', 'R', '1'};

inline void put_u64_le(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u32_le(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

} // namespace detail

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::string buf;
  buf.reserve(8 + 8 * t.rank() + t.numel() * dtype_size(t.dtype()));
  buf.append(detail::kTensorMagic, sizeof(detail::kTensorMagic));
  buf.push_back(static_cast<char>(t.dtype()));
  if (t.rank() > 255) throw config_error("tensor rank exceeds format limit (255)");
  buf.push_back(static_cast<char>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) detail::put_u64_le(buf, t.dim(i));

  switch (t.dtype()) {
    case Dtype::f32:
      for (float v : t.data_f32()) detail::put_u32_le(buf, std::bit_cast<std::uint32_t>(v));
      break;
    case Dtype::f64:
      for (double v : t.data_f64()) detail::put_u64_le(buf, std::bit_cast<std::uint64_t>(v));
      break;
    case Dtype::i32:
      for (std::int32_t v : t.data_i32()) detail::put_u32_le(buf, std::bit_cast<std::uint32_t>(v));
      break;
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw io_error("write failed: " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error("read failed: " + path.string());

  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t size = bytes.size();
  const std::string where = path.string();

  if (size < 8) throw format_error(where + ": truncated header");
  if (std::memcmp(p, detail::kTensorMagic, 6) != 0)
    throw format_error(where + ": bad magic (expected QTNSR1)");
  const std::uint8_t dtype_tag = p[6];
  if (dtype_tag > 2)
    throw format_error(where + ": dtype tag out of range: " + std::to_string(dtype_tag));
  const Dtype dtype = static_cast<Dtype>(dtype_tag);
  const std::size_t ndim = p[7];
  if (ndim == 0) throw format_error(where + ": ndim must be >= 1");

  std::size_t off = 8;
  if (size < off + 8 * ndim) throw format_error(where + ": truncated dims");
  Tensor::Shape shape(ndim);
  std::size_t n = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint64_t d = detail::get_u64_le(p + off);
    off += 8;
    if (d < 1) throw format_error(where + ": dims entries must be >= 1");
    if (d > std::numeric_limits<std::size_t>::max() / n)
      throw format_error(where + ": dims product overflows");
    shape[i] = static_cast<std::size_t>(d);
    n *= shape[i];
  }

  const std::size_t payload = n * dtype_size(dtype);
  if (size < off + payload)
    throw format_error(where + ": truncated payload (expected " + std::to_string(payload) +
                       " bytes, got " + std::to_string(size - off) + ")");
  if (size > off + payload) throw format_error(where + ": trailing bytes after payload");

  switch (dtype) {
    case Dtype::f32: {
      std::vector<float> data(n);
      for (std::size_t i = 0; i < n; ++i)
        data[i] = std::bit_cast<float>(detail::get_u32_le(p + off + 4 * i));
      return Tensor(std::move(shape), std::move(data));
    }
    case Dtype::f64: {
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i)
        data[i] = std::bit_cast<double>(detail::get_u64_le(p + off + 8 * i));
      return Tensor(std::move(shape), std::move(data));
    }
    case Dtype::i32: {
      std::vector<std::int32_t> data(n);
      for (std::size_t i = 0; i < n; ++i)
        data[i] = std::bit_cast<std::int32_t>(detail::get_u32_le(p + off + 4 * i));
      return Tensor(std::move(shape), std::move(data));
    }
  }
  throw format_error(where + ": unreachable dtype");
}

// ---- Eigen bridges (rank-2 tensors; rows = first dimension) ----

inline Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw config_error("expected rank-2 tensor, got rank " + std::to_string(t.rank()));
  const auto rows = static_cast<Eigen::Index>(t.dim(0));
  const auto cols = static_cast<Eigen::Index>(t.dim(1));
  const std::vector<double> v = t.as_f64();
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[static_cast<std::size_t>(r * cols + c)];
  return m;
}

inline Eigen::MatrixXi to_matrix_i32(const Tensor& t) {
  if (t.rank() != 2) throw config_error("expected rank-2 tensor, got rank " + std::to_string(t.rank()));
  if (t.dtype() != Dtype::i32) throw config_error("expected i32 tensor");
  const auto rows = static_cast<Eigen::Index>(t.dim(0));
  const auto cols = static_cast<Eigen::Index>(t.dim(1));
  const auto& v = t.data_i32();
  Eigen::MatrixXi m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[static_cast<std::size_t>(r * cols + c)];
  return m;
}

inline Tensor from_matrix(const Eigen::MatrixXd& m) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::move(data));
}

inline Tensor from_matrix_f32(const Eigen::MatrixXd& m) {
  std::vector<float> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::move(data));
}

inline Tensor from_matrix_i32(const Eigen::MatrixXi& m) {
  std::vector<std::int32_t> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::move(data));
}

} // namespace groupquant
