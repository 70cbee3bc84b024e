#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssa/label_mask.hpp"
#include "ssa/rng.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

struct SynthConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 4;  // class 0 is the background
  std::size_t shapes_per_image = 3;
  double noise_sigma = 0.1;

  void validate() const;
};

struct SynthSample {
  Tensor image;  // [H, W, 3], values in [0, 1]
  LabelMask labels;
  std::uint64_t seed = 0;
};

// Flat-color class palette: golden-ratio hue stepping at fixed saturation
// and value, so any class count yields distinct colors.
void class_color(std::size_t k, double rgb[3]);

// Shapes over a background canvas, later shapes painting over earlier ones.
// The class fixes the geometry: class 1 draws rectangles, class 2 disks,
// class 3 diagonal stripes, and higher classes cycle through those three
// kinds. Pixels take their class color shifted by a per-image color cast
// (uniform in [-0.15, 0.15] per channel, shared across the image) plus
// clamped gaussian noise; the cast gives every image its own appearance
// while keeping same-label pixels identical at zero sigma. Each shape
// consumes a fixed number of draws so geometry never depends on prior
// shapes.
SynthSample generate(const SynthConfig& cfg, std::uint64_t seed);

// Samples with seeds base_seed + index.
std::vector<SynthSample> make_dataset(const SynthConfig& cfg, std::uint64_t base_seed,
                                      std::size_t count);

// Two-layer convolutional encoder lifting RGB to D feature channels.
struct EncoderParams {
  Tensor w1;  // [3, 3, 3, D]
  Tensor b1;  // [D]
  Tensor w2;  // [3, 3, D, D]
  Tensor b2;  // [D]

  static EncoderParams init(std::size_t dim, SplitMix64& rng);
  std::vector<std::pair<std::string, Tensor>> named_params() const;
};

Tensor encode(const Tensor& image, const EncoderParams& params);

struct Dataset {
  SynthConfig config;
  std::uint64_t base_seed = 0;
  std::vector<SynthSample> samples;
};

// Directory layout: manifest.txt plus image_%05d.ssat / label_%05d.pgm pairs.
void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

// Held-out rule: every sample whose seed is divisible by 5.
bool is_eval_sample(std::uint64_t seed);

}  // namespace ssa
