#pragma once

#include <cstdint>
#include <vector>

#include "ssa/head.hpp"
#include "ssa/label_mask.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

// Class membership and boundary-band masks derived from a label mask.
// boundary marks pixels within the band; onehot is zero at ignored pixels.
struct BoundaryMasks {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<std::uint8_t> boundary;  // [H*W]
  std::vector<std::uint8_t> onehot;    // [K*H*W]

  bool in_band(std::size_t h, std::size_t w) const { return boundary[h * width + w] != 0; }
  bool in_class(std::size_t k, std::size_t h, std::size_t w) const {
    return onehot[(k * height + h) * width + w] != 0;
  }
};

// Seeds are non-ignored pixels with a differently-labeled non-ignored
// 4-neighbor; the band is their Chebyshev dilation by (edge_size - 1) / 2,
// so a two-sided class border of width 2 grows to width edge_size.
BoundaryMasks boundary_band(const LabelMask& mg, std::size_t num_classes, std::size_t edge_size,
                            std::int32_t ignore_index);

// Mean cross-entropy over non-ignored pixels. When every pixel is ignored the
// loss is zero and *all_ignored is set.
Tensor ce_loss(const Tensor& logits, const LabelMask& mg, std::int32_t ignore_index,
               bool* all_ignored = nullptr);

// Soft dice with smoothing 1, averaged over classes present in the mask.
// Ignored pixels count toward neither intersection nor union.
Tensor dice_loss(const Tensor& logits, const LabelMask& mg, std::int32_t ignore_index);

// Per-pixel cross-entropy between teacher and student distributions,
// averaged per class over boundary and non-boundary pixels with each pixel
// weighted by the teacher's entropy, then averaged over the contributing
// (class, region) terms. Terms whose weight mass is below epsilon drop out.
Tensor response_distill(const Tensor& student, const Tensor& teacher, const BoundaryMasks& masks);

// Off-diagonal positive part of the gap between student and target row-wise
// affinity maps, summed and divided by the class count.
Tensor semantic_distill(const Tensor& s_proto, const Tensor& target);

// Row-wise cross-entropy from student to target prototype distributions,
// divided by the class count.
Tensor spatial_distill(const Tensor& p_proto, const Tensor& target);

struct LossBreakdown {
  Tensor l_c;    // student fused map vs labels
  Tensor l_g;    // teacher fused map vs labels
  Tensor l_rd;   // response distillation
  Tensor l_sd;   // semantic prototype distillation
  Tensor l_pd;   // spatial prototype distillation
  Tensor total;  // l_c + l_g + lambda_r*l_rd + lambda_s*l_sd + lambda_p*l_pd
  bool all_ignored = false;
};

// Distillation targets pinned to fixed values. Finite-difference checks
// evaluate the objective against base-point targets so perturbations see the
// same constants the backward pass does; the teacher task loss stays live.
struct DistillTargets {
  Tensor response;  // [H, W, K] teacher logits
  Tensor semantic;  // [K, D] adapted semantic prototypes
  Tensor spatial;   // [K, D] adapted spatial prototypes
};

// Teacher outputs are detached before use as targets. sd_target, when given,
// replaces the teacher's adapted semantic prototypes (already detached).
// frozen, when given, supplies all three targets and overrides both.
LossBreakdown total_loss(const HeadOutput& student, const HeadOutput& teacher,
                         const LabelMask& mg, const HeadConfig& cfg,
                         const Tensor* sd_target = nullptr,
                         const DistillTargets* frozen = nullptr);

}  // namespace ssa
