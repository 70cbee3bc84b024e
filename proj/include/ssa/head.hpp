#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssa/label_mask.hpp"
#include "ssa/rng.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

enum class PEKind { kConditional, kSinusoidal, kLearnable, kNone };
enum class SpatialAxis { kSpatial, kChannel };
enum class TeacherMode { kGroundTruth, kSelf };
enum class HeadMode { kVanilla, kSSA };

const char* to_string(PEKind v);
const char* to_string(SpatialAxis v);
const char* to_string(TeacherMode v);
const char* to_string(HeadMode v);

struct HeadConfig {
  std::size_t num_classes = 4;
  std::size_t embed_dim = 16;
  double lambda_r = 1.0;
  double lambda_s = 1.0;
  double lambda_p = 1.0;
  std::size_t edge_size = 4;
  SpatialAxis spatial_axis = SpatialAxis::kSpatial;
  PEKind pe_kind = PEKind::kConditional;
  bool center_normalize = true;
  TeacherMode teacher_mode = TeacherMode::kGroundTruth;
  std::int32_t ignore_index = 255;

  void validate() const;  // throws std::invalid_argument
};

// One shared parameter set serves both the student pass and the guided
// teacher pass; the teacher has no weights of its own.
struct PrototypeSet {
  Tensor s_proto;    // [K, D] semantic prototypes
  Tensor p_proto;    // [K, D] spatial prototypes
  Tensor phi_s_w;    // [2D, D]
  Tensor phi_s_b;    // [D]
  Tensor phi_p_w;    // [2D, D]
  Tensor phi_p_b;    // [D]
  Tensor pe_kernel;  // [3, 3, D], conditional encoding only
  Tensor pe_table;   // [H*W, D], learnable encoding only

  static PrototypeSet init(const HeadConfig& cfg, std::size_t height, std::size_t width,
                           SplitMix64& rng);

  // Parameters that exist for the given encoding kind, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_params(PEKind kind) const;
};

struct HeadOutput {
  Tensor coarse;    // [H, W, K]
  Tensor fused;     // [H, W, K]
  Tensor pos;       // [H, W, D]
  Tensor s_center;  // [K, D]
  Tensor p_center;  // [K, D]
  Tensor s_proto;   // [K, D] adapted semantic prototypes
  Tensor p_proto;   // [K, D] adapted spatial prototypes
  std::vector<double> guide_counts;  // teacher pass only: guidance mass per class
};

// Plain prototype classifier: logits[h, w, k] = <sf[h, w, :], s_proto[k, :]>.
Tensor vanilla_forward(const Tensor& sf, const Tensor& s_proto);

Tensor make_sinusoidal_table(std::size_t height, std::size_t width, std::size_t dim);

Tensor position_encode(const Tensor& sf, const PrototypeSet& protos, PEKind kind);

// Class centers as coarse-probability-weighted feature averages. With
// normalize, each row is divided by its total weight plus epsilon.
Tensor semantic_center(const Tensor& coarse, const Tensor& sf, bool normalize);

// Spatial centers from position features. kSpatial normalizes each class's
// weights over all pixels; kChannel reuses the per-pixel class softmax.
Tensor spatial_center(const Tensor& coarse, const Tensor& pos, SpatialAxis axis);

Tensor adapt_semantic(const Tensor& center, const Tensor& s_proto, const Tensor& w,
                      const Tensor& b);
Tensor adapt_spatial(const Tensor& center, const Tensor& p_proto, const Tensor& w,
                     const Tensor& b);

HeadOutput ssa_forward(const Tensor& sf, const PrototypeSet& protos, const HeadConfig& cfg);

// Guided pass: center weights come from the label mask (kGroundTruth) or
// from the student's detached coarse probabilities (kSelf). Ignored pixels
// carry zero weight. Outputs stay connected to the shared parameters;
// distillation call sites detach them.
HeadOutput teacher_forward(const Tensor& sf, const LabelMask& mg, const PrototypeSet& protos,
                           const HeadConfig& cfg, const HeadOutput& student);

std::vector<std::size_t> class_counts(const LabelMask& mg, std::size_t num_classes,
                                      std::int32_t ignore_index);

// Rows averaged over the images whose guidance mass for that class is
// positive; a class absent everywhere yields a zero row. Value-level only.
Tensor batch_semantic_center(const std::vector<Tensor>& centers,
                             const std::vector<std::vector<double>>& guide_counts);

}  // namespace ssa
