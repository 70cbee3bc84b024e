#include "ssa/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ssa {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts need byte swaps");

constexpr char kTensorMagic[4] = {'S', 'S', 'A', 'T'};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, 0, "cannot open file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(path + ": write failed");
}

void need(const std::string& bytes, std::size_t cursor, std::size_t n, const std::string& path,
          const std::string& what) {
  if (cursor + n > bytes.size()) throw FormatError(path, bytes.size(), "truncated: " + what);
}

template <typename T>
T read_le(const std::string& bytes, std::size_t& cursor) {
  T v;
  std::memcpy(&v, bytes.data() + cursor, sizeof(T));
  cursor += sizeof(T);
  return v;
}

template <typename T>
void append_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

}  // namespace

std::string serialize_tensor(const Tensor& t) {
  std::string out;
  out.append(kTensorMagic, 4);
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) append_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  return out;
}

Tensor parse_tensor(const std::string& bytes, std::size_t& cursor, const std::string& path) {
  need(bytes, cursor, 4, path, "magic");
  if (std::memcmp(bytes.data() + cursor, kTensorMagic, 4) != 0)
    throw FormatError(path, cursor, "bad tensor magic");
  cursor += 4;
  need(bytes, cursor, 4, path, "rank");
  const std::uint32_t rank = read_le<std::uint32_t>(bytes, cursor);
  if (rank > 8) throw FormatError(path, cursor - 4, "implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) {
    need(bytes, cursor, 8, path, "extent");
    shape[d] = static_cast<std::size_t>(read_le<std::uint64_t>(bytes, cursor));
  }
  const std::size_t count = shape_size(shape);
  if (count > (1ull << 32)) throw FormatError(path, cursor, "implausible element count");
  need(bytes, cursor, count * sizeof(double), path, "payload");
  Eigen::ArrayXd data(static_cast<Eigen::Index>(count));
  std::memcpy(data.data(), bytes.data() + cursor, count * sizeof(double));
  cursor += count * sizeof(double);
  return Tensor::from_array(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  write_file(path, serialize_tensor(t));
}

Tensor load_tensor(const std::string& path) {
  const std::string bytes = read_file(path);
  std::size_t cursor = 0;
  Tensor t = parse_tensor(bytes, cursor, path);
  if (cursor != bytes.size())
    throw FormatError(path, cursor, "trailing bytes after tensor payload");
  return t;
}

void NamedTensors::add(std::string name, Tensor t) {
  items.emplace_back(std::move(name), std::move(t));
}

const Tensor* NamedTensors::find(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& NamedTensors::get(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw std::invalid_argument("bundle is missing tensor '" + name + "'");
  return *t;
}

void save_bundle(const std::string& path, const NamedTensors& bundle) {
  std::string blobs;
  std::string manifest;
  manifest += "SSAH1\n";
  manifest += "count " + std::to_string(bundle.items.size()) + "\n";
  for (const auto& [name, t] : bundle.items) {
    char offset[32];
    std::snprintf(offset, sizeof(offset), "%020zu", blobs.size());
    manifest += name + " " + offset + "\n";
    blobs += serialize_tensor(t);
  }
  write_file(path, manifest + blobs);
}

namespace {

std::string read_line(const std::string& bytes, std::size_t& cursor, const std::string& path) {
  const std::size_t eol = bytes.find('\n', cursor);
  if (eol == std::string::npos) throw FormatError(path, bytes.size(), "missing newline");
  std::string line = bytes.substr(cursor, eol - cursor);
  cursor = eol + 1;
  return line;
}

}  // namespace

NamedTensors load_bundle(const std::string& path) {
  const std::string bytes = read_file(path);
  std::size_t cursor = 0;
  if (read_line(bytes, cursor, path) != "SSAH1")
    throw FormatError(path, 0, "bad bundle magic, expected SSAH1");
  const std::size_t count_at = cursor;
  std::string count_line = read_line(bytes, cursor, path);
  if (count_line.rfind("count ", 0) != 0)
    throw FormatError(path, count_at, "expected 'count N' line");
  std::size_t count = 0;
  try {
    count = std::stoul(count_line.substr(6));
  } catch (const std::exception&) {
    throw FormatError(path, count_at, "unparseable tensor count");
  }
  std::vector<std::pair<std::string, std::size_t>> entries;
  entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t line_at = cursor;
    const std::string line = read_line(bytes, cursor, path);
    const std::size_t space = line.rfind(' ');
    if (space == std::string::npos || space == 0 || space + 1 >= line.size())
      throw FormatError(path, line_at, "manifest line is not '<name> <offset>'");
    std::size_t offset = 0;
    try {
      offset = std::stoul(line.substr(space + 1));
    } catch (const std::exception&) {
      throw FormatError(path, line_at + space + 1, "unparseable blob offset");
    }
    entries.emplace_back(line.substr(0, space), offset);
  }
  const std::size_t blob_base = cursor;
  NamedTensors bundle;
  for (const auto& [name, offset] : entries) {
    std::size_t at = blob_base + offset;
    if (at > bytes.size())
      throw FormatError(path, bytes.size(), "blob offset for '" + name + "' past end of file");
    bundle.add(name, parse_tensor(bytes, at, path));
  }
  return bundle;
}

}  // namespace ssa
