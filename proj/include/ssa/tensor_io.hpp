#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssa/errors.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

// Binary tensor file: magic "SSAT", u32 rank, u64 extents, then the values
// as little-endian f64 in row-major order.
std::string serialize_tensor(const Tensor& t);
Tensor parse_tensor(const std::string& bytes, std::size_t& cursor, const std::string& path);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Ordered name -> tensor collection; order is preserved on disk so identical
// contents serialize to identical bytes.
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(std::string name, Tensor t);
  const Tensor* find(const std::string& name) const;
  // Throws std::invalid_argument when the name is missing.
  const Tensor& get(const std::string& name) const;
};

// Checkpoint bundle: line "SSAH1", line "count N", then N manifest lines
// "<name> <offset>" with zero-padded 20-digit offsets into the blob region
// that follows, each blob a serialized tensor.
void save_bundle(const std::string& path, const NamedTensors& bundle);
NamedTensors load_bundle(const std::string& path);

}  // namespace ssa
