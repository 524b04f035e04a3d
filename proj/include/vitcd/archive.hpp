#pragma once

// Tensor container shared by model weights, direction files and datasets.
//
// Layout (all integers little-endian):
//   8 bytes   magic "CFW1\0\0\0\0"
//   8 bytes   header length N
//   N bytes   JSON header {"tensors": {name: {"shape": [...], "offset": k}},
//                          "metadata": {...}}
//   payload   float32 values, row-major, tensors in header key order
//   4 bytes   CRC-32 of the payload

#include "vitcd/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vitcd {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;  // row-major
};

struct Archive {
  std::map<std::string, Tensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  void put(const std::string& name, const Field& m);
  void put(const std::string& name, const Vector& v);
  /// Throws FormatError naming the tensor if absent or of the wrong shape.
  Field get_matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const;
  Vector get_vector(const std::string& name, Eigen::Index n) const;
  Field get_matrix(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

std::vector<std::uint8_t> encode_archive(const Archive& a);
Archive decode_archive(const std::vector<std::uint8_t>& bytes);

void write_archive(const std::string& path, const Archive& a);
Archive read_archive(const std::string& path);

/// Rounds to the archive's storage precision.
inline Scalar to_storage(Scalar x) { return static_cast<Scalar>(static_cast<float>(x)); }

// Writes via a temporary sibling and rename.
void write_file_atomic(const std::string& path, const std::string& contents);
void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& contents);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);

}  // namespace vitcd
