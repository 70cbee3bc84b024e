#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssa/errors.hpp"

namespace ssa {

// Per-pixel class indices, row-major. Values above any valid class index are
// allowed; the conventional ignore marker is 255.
struct LabelMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w, std::int32_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::int32_t& at(std::size_t h, std::size_t w_) { return labels[h * width + w_]; }
  std::int32_t at(std::size_t h, std::size_t w_) const { return labels[h * width + w_]; }
  std::size_t size() const { return labels.size(); }
};

// Binary PGM (P5) with maxval 255. Labels must fit one byte.
void save_pgm(const std::string& path, const LabelMask& mask);
LabelMask load_pgm(const std::string& path);

}  // namespace ssa
