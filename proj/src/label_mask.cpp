#include "ssa/label_mask.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace ssa {

void save_pgm(const std::string& path, const LabelMask& mask) {
  std::string out;
  out += "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
  out.reserve(out.size() + mask.size());
  for (std::int32_t v : mask.labels) {
    if (v < 0 || v > 255)
      throw std::invalid_argument(path + ": label " + std::to_string(v) + " does not fit a byte");
    out += static_cast<char>(static_cast<unsigned char>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error(path + ": write failed");
}

namespace {

// Skips whitespace and '#' comment lines between header tokens.
void skip_separators(const std::string& bytes, std::size_t& cursor) {
  while (cursor < bytes.size()) {
    const unsigned char c = static_cast<unsigned char>(bytes[cursor]);
    if (std::isspace(c)) {
      ++cursor;
    } else if (c == '#') {
      while (cursor < bytes.size() && bytes[cursor] != '\n') ++cursor;
    } else {
      break;
    }
  }
}

std::size_t read_number(const std::string& bytes, std::size_t& cursor, const std::string& path,
                        const std::string& what) {
  skip_separators(bytes, cursor);
  const std::size_t start = cursor;
  std::size_t value = 0;
  while (cursor < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[cursor]))) {
    value = value * 10 + static_cast<std::size_t>(bytes[cursor] - '0');
    ++cursor;
  }
  if (cursor == start) throw FormatError(path, start, "expected " + what);
  return value;
}

}  // namespace

LabelMask load_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(path, 0, "cannot open file");
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string bytes = std::move(buf).str();

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw FormatError(path, 0, "not a binary PGM (P5) file");
  std::size_t cursor = 2;
  const std::size_t width = read_number(bytes, cursor, path, "width");
  const std::size_t height = read_number(bytes, cursor, path, "height");
  const std::size_t at_maxval = cursor;
  const std::size_t maxval = read_number(bytes, cursor, path, "maxval");
  if (maxval != 255)
    throw FormatError(path, at_maxval, "unsupported maxval " + std::to_string(maxval));
  if (cursor >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[cursor])))
    throw FormatError(path, cursor, "expected single whitespace before pixel data");
  ++cursor;
  const std::size_t expected = width * height;
  if (bytes.size() - cursor < expected)
    throw FormatError(path, bytes.size(), "pixel data truncated");
  if (bytes.size() - cursor > expected)
    throw FormatError(path, cursor + expected, "trailing bytes after pixel data");

  LabelMask mask(height, width);
  for (std::size_t i = 0; i < expected; ++i)
    mask.labels[i] = static_cast<std::int32_t>(static_cast<unsigned char>(bytes[cursor + i]));
  return mask;
}

}  // namespace ssa
