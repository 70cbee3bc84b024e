#include "ssa/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssa/errors.hpp"
#include "ssa/tensor_io.hpp"

namespace ssa {

// Half-width of the uniform per-image color cast.
constexpr double kCastAmplitude = 0.15;

void SynthConfig::validate() const {
  if (height < 4 || width < 4)
    throw std::invalid_argument("synth config: canvas must be at least 4x4");
  if (num_classes < 2 || num_classes > 255)
    throw std::invalid_argument("synth config: num_classes must be in [2, 255]");
  if (noise_sigma < 0.0)
    throw std::invalid_argument("synth config: noise_sigma must be non-negative");
}

void class_color(std::size_t k, double rgb[3]) {
  const double hue = std::fmod(0.61803398874989485 * static_cast<double>(k), 1.0);
  const double sat = 0.5, val = 0.6;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = val * (1.0 - sat);
  const double q = val * (1.0 - sat * f);
  const double t = val * (1.0 - sat * (1.0 - f));
  switch (sector) {
    case 0: rgb[0] = val; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = val; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = val; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = val; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = val; break;
    default: rgb[0] = val; rgb[1] = p; rgb[2] = q; break;
  }
}

SynthSample generate(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width;
  SplitMix64 rng(seed);

  SynthSample sample;
  sample.seed = seed;
  sample.labels = LabelMask(h, w, 0);

  for (std::size_t s = 0; s < cfg.shapes_per_image; ++s) {
    const auto cls = static_cast<std::int32_t>(1 + rng.below(cfg.num_classes - 1));
    const std::size_t a = rng.below(h);
    const std::size_t b = rng.below(w);
    const std::size_t c = rng.below(std::max(h, w));
    const std::size_t e = rng.below(std::max(h, w));
    const std::uint64_t kind = static_cast<std::uint64_t>(cls - 1) % 3;
    if (kind == 0) {
      // Rectangle anchored at (a, b), clipped at the canvas edges.
      const std::size_t rect_h = 2 + c % (h / 2);
      const std::size_t rect_w = 2 + e % (w / 2);
      for (std::size_t y = a; y < std::min(h, a + rect_h); ++y)
        for (std::size_t x = b; x < std::min(w, b + rect_w); ++x) sample.labels.at(y, x) = cls;
    } else if (kind == 1) {
      // Disk centered at (a, b).
      const std::size_t radius = 2 + c % (std::min(h, w) / 4 + 1);
      const auto r2 = static_cast<long>(radius * radius);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const long dy = static_cast<long>(y) - static_cast<long>(a);
          const long dx = static_cast<long>(x) - static_cast<long>(b);
          if (dy * dy + dx * dx <= r2) sample.labels.at(y, x) = cls;
        }
      }
    } else {
      // Diagonal stripe through (a, b): along the main diagonal when c is
      // even, the anti-diagonal when odd.
      const long thickness =
          static_cast<long>(1 + e % std::max<std::size_t>(1, std::min(h, w) / 8));
      const long down_right = c % 2 == 0 ? 1 : 0;
      const long offset = down_right ? static_cast<long>(b) - static_cast<long>(a)
                                     : static_cast<long>(a) + static_cast<long>(b);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const long along = down_right ? static_cast<long>(x) - static_cast<long>(y)
                                        : static_cast<long>(x) + static_cast<long>(y);
          if (std::abs(along - offset) < thickness) sample.labels.at(y, x) = cls;
        }
    }
  }

  sample.image = Tensor::zeros({h, w, 3});
  double* img = sample.image.data();
  std::vector<double> palette(cfg.num_classes * 3);
  for (std::size_t k = 0; k < cfg.num_classes; ++k) class_color(k, &palette[k * 3]);
  // Per-image color cast: one offset per channel shared by every pixel,
  // modelling appearance shift between images. Classifiers with fixed
  // per-class colors cannot explain it; per-image statistics can.
  double cast[3];
  for (double& c : cast) c = rng.uniform(-kCastAmplitude, kCastAmplitude);
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto cls = static_cast<std::size_t>(sample.labels.labels[p]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = palette[cls * 3 + ch] + cast[ch] + rng.gaussian(0.0, cfg.noise_sigma);
      img[p * 3 + ch] = std::clamp(v, 0.0, 1.0);
    }
  }
  return sample;
}

std::vector<SynthSample> make_dataset(const SynthConfig& cfg, std::uint64_t base_seed,
                                      std::size_t count) {
  std::vector<SynthSample> samples;
  samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) samples.push_back(generate(cfg, base_seed + i));
  return samples;
}

EncoderParams EncoderParams::init(std::size_t dim, SplitMix64& rng) {
  EncoderParams p;
  p.w1 = Tensor::zeros({3, 3, 3, dim}, true);
  const double bound1 = 1.0 / std::sqrt(9.0 * 3.0);
  for (Eigen::Index i = 0; i < p.w1.array().size(); ++i)
    p.w1.array()[i] = rng.uniform(-bound1, bound1);
  p.b1 = Tensor::zeros({dim}, true);
  p.w2 = Tensor::zeros({3, 3, dim, dim}, true);
  const double bound2 = 1.0 / std::sqrt(9.0 * static_cast<double>(dim));
  for (Eigen::Index i = 0; i < p.w2.array().size(); ++i)
    p.w2.array()[i] = rng.uniform(-bound2, bound2);
  p.b2 = Tensor::zeros({dim}, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named_params() const {
  return {{"encoder.w1", w1}, {"encoder.b1", b1}, {"encoder.w2", w2}, {"encoder.b2", b2}};
}

Tensor encode(const Tensor& image, const EncoderParams& params) {
  return conv3x3(relu(conv3x3(image, params.w1, params.b1)), params.w2, params.b2);
}

namespace {

std::string manifest_text(const Dataset& dataset) {
  char buf[64];
  std::ostringstream out;
  out << "ssa-dataset v1\n";
  out << "height " << dataset.config.height << "\n";
  out << "width " << dataset.config.width << "\n";
  out << "classes " << dataset.config.num_classes << "\n";
  out << "shapes_per_image " << dataset.config.shapes_per_image << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", dataset.config.noise_sigma);
  out << "noise_sigma " << buf << "\n";
  out << "base_seed " << dataset.base_seed << "\n";
  out << "count " << dataset.samples.size() << "\n";
  for (std::size_t i = 0; i < dataset.samples.size(); ++i)
    out << "sample " << i << " " << dataset.samples[i].seed << "\n";
  return std::move(out).str();
}

std::string sample_name(const char* stem, std::size_t index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05zu.%s", stem, index, ext);
  return buf;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& dataset) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "manifest.txt", std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(dir + ": cannot write manifest.txt");
    out << manifest_text(dataset);
  }
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    save_tensor((fs::path(dir) / sample_name("image", i, "ssat")).string(), s.image);
    save_pgm((fs::path(dir) / sample_name("label", i, "pgm")).string(), s.labels);
  }
}

namespace {

class ManifestParser {
 public:
  ManifestParser(std::string path, std::string text)
      : path_(std::move(path)), text_(std::move(text)) {}

  bool done() const { return cursor_ >= text_.size(); }
  std::size_t cursor() const { return cursor_; }

  std::vector<std::string> next_fields() {
    const std::size_t at = cursor_;
    const std::size_t eol = text_.find('\n', cursor_);
    if (eol == std::string::npos) throw FormatError(path_, text_.size(), "missing newline");
    std::string line = text_.substr(cursor_, eol - cursor_);
    cursor_ = eol + 1;
    std::vector<std::string> fields;
    std::istringstream split(line);
    std::string field;
    while (split >> field) fields.push_back(field);
    if (fields.empty()) throw FormatError(path_, at, "blank manifest line");
    return fields;
  }

  std::uint64_t expect_number(const std::string& key) {
    const std::size_t at = cursor_;
    auto fields = next_fields();
    if (fields.size() != 2 || fields[0] != key)
      throw FormatError(path_, at, "expected '" + key + " <value>' line");
    return parse_u64(fields[1], at);
  }

  std::uint64_t parse_u64(const std::string& text, std::size_t at) {
    try {
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw FormatError(path_, at, "unparseable number '" + text + "'");
    }
  }

  double parse_double(const std::string& text, std::size_t at) {
    try {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw FormatError(path_, at, "unparseable number '" + text + "'");
    }
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::string text_;
  std::size_t cursor_ = 0;
};

}  // namespace

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.txt").string();
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw FormatError(manifest_path, 0, "cannot open file");
  std::ostringstream buf;
  buf << in.rdbuf();
  ManifestParser parser(manifest_path, std::move(buf).str());

  {
    const std::size_t at = parser.cursor();
    auto fields = parser.next_fields();
    if (fields.size() != 2 || fields[0] != "ssa-dataset" || fields[1] != "v1")
      throw FormatError(manifest_path, at, "expected 'ssa-dataset v1' header");
  }
  Dataset dataset;
  dataset.config.height = parser.expect_number("height");
  dataset.config.width = parser.expect_number("width");
  dataset.config.num_classes = parser.expect_number("classes");
  dataset.config.shapes_per_image = parser.expect_number("shapes_per_image");
  {
    const std::size_t at = parser.cursor();
    auto fields = parser.next_fields();
    if (fields.size() != 2 || fields[0] != "noise_sigma")
      throw FormatError(manifest_path, at, "expected 'noise_sigma <value>' line");
    dataset.config.noise_sigma = parser.parse_double(fields[1], at);
  }
  dataset.base_seed = parser.expect_number("base_seed");
  const std::uint64_t count = parser.expect_number("count");
  dataset.config.validate();

  dataset.samples.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = parser.cursor();
    auto fields = parser.next_fields();
    if (fields.size() != 3 || fields[0] != "sample")
      throw FormatError(manifest_path, at, "expected 'sample <index> <seed>' line");
    const std::uint64_t index = parser.parse_u64(fields[1], at);
    if (index != i)
      throw FormatError(manifest_path, at, "sample index " + fields[1] + " out of order");
    dataset.samples[i].seed = parser.parse_u64(fields[2], at);
  }
  if (!parser.done())
    throw FormatError(manifest_path, parser.cursor(), "trailing content after sample list");

  for (std::uint64_t i = 0; i < count; ++i) {
    auto& s = dataset.samples[i];
    const std::string image_path = (fs::path(dir) / sample_name("image", i, "ssat")).string();
    s.image = load_tensor(image_path);
    if (s.image.rank() != 3 || s.image.shape()[0] != dataset.config.height ||
        s.image.shape()[1] != dataset.config.width || s.image.shape()[2] != 3)
      throw FormatError(image_path, 0, "image shape " + shape_str(s.image.shape()) +
                                           " does not match manifest");
    s.labels = load_pgm((fs::path(dir) / sample_name("label", i, "pgm")).string());
    if (s.labels.height != dataset.config.height || s.labels.width != dataset.config.width)
      throw FormatError((fs::path(dir) / sample_name("label", i, "pgm")).string(), 0,
                        "label mask does not match manifest extents");
  }
  return dataset;
}

bool is_eval_sample(std::uint64_t seed) { return seed % 5 == 0; }

}  // namespace ssa
