#include "vitcd/archive.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace vitcd {

static_assert(std::endian::native == std::endian::little,
              "archive codec assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'F', 'W', '1', 0, 0, 0, 0};

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <class T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T read_le(const std::vector<std::uint8_t>& in, std::size_t at) {
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return v;
}

}  // namespace

void Archive::put(const std::string& name, const Field& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(static_cast<float>(m(r, c)));
  tensors[name] = std::move(t);
}

void Archive::put(const std::string& name, const Vector& v) {
  Tensor t;
  t.shape = {v.size()};
  t.values.reserve(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) t.values.push_back(static_cast<float>(v(i)));
  tensors[name] = std::move(t);
}

Field Archive::get_matrix(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("archive: missing tensor '" + name + "'");
  if (it->second.shape.size() != 2)
    throw FormatError("archive: tensor '" + name + "' is not a matrix");
  return get_matrix(name, it->second.shape[0], it->second.shape[1]);
}

Field Archive::get_matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("archive: missing tensor '" + name + "'");
  const Tensor& t = it->second;
  if (t.shape != std::vector<std::int64_t>{rows, cols})
    throw FormatError("archive: tensor '" + name + "' has shape mismatch, expected " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  Field m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = t.values[r * cols + c];
  return m;
}

Vector Archive::get_vector(const std::string& name, Eigen::Index n) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("archive: missing tensor '" + name + "'");
  const Tensor& t = it->second;
  if (t.shape != std::vector<std::int64_t>{n})
    throw FormatError("archive: tensor '" + name + "' has shape mismatch, expected length " +
                      std::to_string(n));
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = t.values[i];
  return v;
}

std::vector<std::uint8_t> encode_archive(const Archive& a) {
  nlohmann::json index = nlohmann::json::object();
  std::int64_t offset = 0;
  for (const auto& [name, t] : a.tensors) {
    if (element_count(t.shape) != static_cast<std::int64_t>(t.values.size()))
      throw FormatError("archive: tensor '" + name + "' shape does not match its data");
    index[name] = {{"shape", t.shape}, {"offset", offset}};
    offset += static_cast<std::int64_t>(t.values.size() * sizeof(float));
  }
  const std::string header =
      nlohmann::json{{"tensors", index}, {"metadata", a.metadata}}.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  append_le<std::uint64_t>(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  const std::size_t payload_start = out.size();
  for (const auto& [name, t] : a.tensors) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
    out.insert(out.end(), p, p + t.values.size() * sizeof(float));
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, out.data() + payload_start, static_cast<uInt>(out.size() - payload_start)));
  append_le<std::uint32_t>(out, crc);
  return out;
}

Archive decode_archive(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw FormatError("archive: bad magic or truncated file");
  const auto header_len = read_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 20) throw FormatError("archive: truncated header");
  const std::size_t payload_start = 16 + header_len;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + payload_start);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: malformed header: ") + e.what());
  }
  const std::size_t payload_len = bytes.size() - payload_start - 4;
  const auto stored_crc = read_le<std::uint32_t>(bytes, bytes.size() - 4);
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, bytes.data() + payload_start, static_cast<uInt>(payload_len)));

  Archive a;
  a.metadata = header.value("metadata", nlohmann::json::object());
  std::size_t expected = 0;
  try {
    for (const auto& [name, entry] : header.at("tensors").items()) {
      Tensor t;
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::int64_t>();
      const auto n = element_count(t.shape);
      if (n < 0 || offset < 0 ||
          static_cast<std::size_t>(offset) + n * sizeof(float) > payload_len)
        throw FormatError("archive: tensor '" + name + "' extends past the payload (truncated?)");
      t.values.resize(static_cast<std::size_t>(n));
      std::memcpy(t.values.data(), bytes.data() + payload_start + offset, n * sizeof(float));
      expected += n * sizeof(float);
      a.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: malformed tensor index: ") + e.what());
  }
  if (expected != payload_len) throw FormatError("archive: payload size does not match index");
  if (crc != stored_crc) throw FormatError("archive: checksum mismatch");
  return a;
}

void write_archive(const std::string& path, const Archive& a) {
  write_file_atomic(path, encode_archive(a));
}

Archive read_archive(const std::string& path) { return decode_archive(read_file_bytes(path)); }

void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(contents.data()),
              static_cast<std::streamsize>(contents.size()));
    if (!out) throw FormatError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  write_file_atomic(path, std::vector<std::uint8_t>(contents.begin(), contents.end()));
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace vitcd
