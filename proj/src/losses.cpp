#include "ssa/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ssa {

namespace {

void check_logits(const char* op, const Tensor& logits, const LabelMask& mg) {
  if (logits.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": logits must be [H, W, K], got " +
                                shape_str(logits.shape()));
  if (logits.shape()[0] != mg.height || logits.shape()[1] != mg.width)
    throw std::invalid_argument(std::string(op) + ": logits " + shape_str(logits.shape()) +
                                " do not match mask " + std::to_string(mg.height) + "x" +
                                std::to_string(mg.width));
}

void check_label(const char* op, std::int32_t label, std::size_t k) {
  if (label < 0 || static_cast<std::size_t>(label) >= k)
    throw std::invalid_argument(std::string(op) + ": label " + std::to_string(label) +
                                " outside [0, " + std::to_string(k) + ")");
}

}  // namespace

BoundaryMasks boundary_band(const LabelMask& mg, std::size_t num_classes, std::size_t edge_size,
                            std::int32_t ignore_index) {
  if (edge_size < 1) throw std::invalid_argument("boundary_band: edge_size must be at least 1");
  const std::size_t h = mg.height, w = mg.width;
  BoundaryMasks masks;
  masks.height = h;
  masks.width = w;
  masks.num_classes = num_classes;
  masks.boundary.assign(h * w, 0);
  masks.onehot.assign(num_classes * h * w, 0);

  std::vector<std::uint8_t> seed(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::int32_t label = mg.at(y, x);
      if (label == ignore_index) continue;
      check_label("boundary_band", label, num_classes);
      masks.onehot[(static_cast<std::size_t>(label) * h + y) * w + x] = 1;
      const bool differs =
          (y > 0 && mg.at(y - 1, x) != ignore_index && mg.at(y - 1, x) != label) ||
          (y + 1 < h && mg.at(y + 1, x) != ignore_index && mg.at(y + 1, x) != label) ||
          (x > 0 && mg.at(y, x - 1) != ignore_index && mg.at(y, x - 1) != label) ||
          (x + 1 < w && mg.at(y, x + 1) != ignore_index && mg.at(y, x + 1) != label);
      if (differs) seed[y * w + x] = 1;
    }
  }

  const std::size_t radius = (edge_size - 1) / 2;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!seed[y * w + x]) continue;
      const std::size_t y0 = y > radius ? y - radius : 0;
      const std::size_t y1 = std::min(h - 1, y + radius);
      const std::size_t x0 = x > radius ? x - radius : 0;
      const std::size_t x1 = std::min(w - 1, x + radius);
      for (std::size_t yy = y0; yy <= y1; ++yy)
        for (std::size_t xx = x0; xx <= x1; ++xx) masks.boundary[yy * w + xx] = 1;
    }
  }
  return masks;
}

Tensor ce_loss(const Tensor& logits, const LabelMask& mg, std::int32_t ignore_index,
               bool* all_ignored) {
  check_logits("ce_loss", logits, mg);
  const std::size_t h = mg.height, w = mg.width, k = logits.shape()[2];
  Tensor select = Tensor::zeros({h, w, k});
  std::size_t valid = 0;
  for (std::size_t p = 0; p < h * w; ++p) {
    const std::int32_t label = mg.labels[p];
    if (label == ignore_index) continue;
    check_label("ce_loss", label, k);
    select.array()[static_cast<Eigen::Index>(p * k + static_cast<std::size_t>(label))] = 1.0;
    ++valid;
  }
  if (all_ignored) *all_ignored = (valid == 0);
  if (valid == 0) return Tensor::scalar(0.0);
  Tensor picked = reduce_sum(mul(log_softmax(logits, 2), select));
  return mul_scalar(picked, -1.0 / static_cast<double>(valid));
}

Tensor dice_loss(const Tensor& logits, const LabelMask& mg, std::int32_t ignore_index) {
  check_logits("dice_loss", logits, mg);
  const std::size_t h = mg.height, w = mg.width, k = logits.shape()[2];
  const std::size_t hw = h * w;

  Tensor valid = Tensor::zeros({hw});
  Tensor target = Tensor::zeros({hw, k});
  std::vector<double> gt_sum(k, 0.0);
  for (std::size_t p = 0; p < hw; ++p) {
    const std::int32_t label = mg.labels[p];
    if (label == ignore_index) continue;
    check_label("dice_loss", label, k);
    valid.array()[static_cast<Eigen::Index>(p)] = 1.0;
    target.array()[static_cast<Eigen::Index>(p * k + static_cast<std::size_t>(label))] = 1.0;
    gt_sum[static_cast<std::size_t>(label)] += 1.0;
  }
  std::size_t present = 0;
  for (double s : gt_sum)
    if (s > 0.0) ++present;
  if (present == 0) return Tensor::scalar(0.0);

  Tensor probs = scale_rows(reshape(softmax(logits, 2), {hw, k}), valid);
  Tensor inter = reduce_sum(mul(probs, target), 0);  // [K]
  Tensor psum = reduce_sum(probs, 0);                // [K]
  Tensor gsum = Tensor::from_data({k}, gt_sum);
  Tensor score = div(add_scalar(mul_scalar(inter, 2.0), 1.0),
                     add_scalar(add(psum, gsum), 1.0));

  std::vector<double> weight(k, 0.0);
  for (std::size_t c = 0; c < k; ++c)
    if (gt_sum[c] > 0.0) weight[c] = 1.0 / static_cast<double>(present);
  Tensor loss_per_class = sub(Tensor::full({k}, 1.0), score);
  return reduce_sum(mul(loss_per_class, Tensor::from_data({k}, weight)));
}

Tensor response_distill(const Tensor& student, const Tensor& teacher, const BoundaryMasks& masks) {
  if (student.shape() != teacher.shape())
    throw std::invalid_argument("response_distill: shape mismatch " + shape_str(student.shape()) +
                                " vs " + shape_str(teacher.shape()));
  if (student.rank() != 3)
    throw std::invalid_argument("response_distill: expected [H, W, K] maps");
  const std::size_t h = student.shape()[0], w = student.shape()[1], k = student.shape()[2];
  if (masks.height != h || masks.width != w || masks.num_classes != k)
    throw std::invalid_argument("response_distill: masks do not match map shape");
  const std::size_t hw = h * w;

  Tensor tprob = softmax(teacher, 2);
  Tensor tlogp = log_softmax(teacher, 2);
  // Per-pixel teacher entropy, a plain weighting since the teacher is
  // already detached.
  Eigen::ArrayXd entropy = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(hw));
  for (std::size_t p = 0; p < hw; ++p) {
    double e = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      e -= tprob[p * k + c] * tlogp[p * k + c];
    entropy[static_cast<Eigen::Index>(p)] = e;
  }

  Tensor pixel_ce =
      mul_scalar(reduce_sum(mul(tprob, log_softmax(student, 2)), 2), -1.0);  // [H, W]

  Tensor acc = Tensor::scalar(0.0);
  std::size_t terms = 0;
  for (std::size_t c = 0; c < k; ++c) {
    for (int band = 1; band >= 0; --band) {
      Tensor weights = Tensor::zeros({h, w});
      double mass = 0.0;
      for (std::size_t p = 0; p < hw; ++p) {
        const bool in_class = masks.onehot[c * hw + p] != 0;
        const bool in_band = masks.boundary[p] != 0;
        if (!in_class || (band == 1) != in_band) continue;
        const double we = entropy[static_cast<Eigen::Index>(p)];
        weights.array()[static_cast<Eigen::Index>(p)] = we;
        mass += we;
      }
      if (mass < kEps) continue;
      acc = add(acc, mul_scalar(reduce_sum(mul(pixel_ce, weights)), 1.0 / mass));
      ++terms;
    }
  }
  if (terms == 0) return Tensor::scalar(0.0);
  return mul_scalar(acc, 1.0 / static_cast<double>(terms));
}

Tensor semantic_distill(const Tensor& s_proto, const Tensor& target) {
  if (s_proto.rank() != 2 || s_proto.shape() != target.shape())
    throw std::invalid_argument("semantic_distill: prototype shapes differ, " +
                                shape_str(s_proto.shape()) + " vs " + shape_str(target.shape()));
  const std::size_t k = s_proto.shape()[0];
  Tensor affinity = softmax(matmul(s_proto, transpose(s_proto)), 1);
  Tensor affinity_target = softmax(matmul(target, transpose(target)), 1);
  Tensor gap = relu(sub(affinity, affinity_target));
  Tensor off_diag = Tensor::full({k, k}, 1.0);
  for (std::size_t i = 0; i < k; ++i)
    off_diag.array()[static_cast<Eigen::Index>(i * k + i)] = 0.0;
  return mul_scalar(reduce_sum(mul(gap, off_diag)), 1.0 / static_cast<double>(k));
}

Tensor spatial_distill(const Tensor& p_proto, const Tensor& target) {
  if (p_proto.rank() != 2 || p_proto.shape() != target.shape())
    throw std::invalid_argument("spatial_distill: prototype shapes differ, " +
                                shape_str(p_proto.shape()) + " vs " + shape_str(target.shape()));
  const std::size_t k = p_proto.shape()[0];
  Tensor cross = mul(softmax(p_proto, 1), log_softmax(target, 1));
  return mul_scalar(reduce_sum(cross), -1.0 / static_cast<double>(k));
}

LossBreakdown total_loss(const HeadOutput& student, const HeadOutput& teacher,
                         const LabelMask& mg, const HeadConfig& cfg, const Tensor* sd_target,
                         const DistillTargets* frozen) {
  LossBreakdown out;
  out.l_c = add(ce_loss(student.fused, mg, cfg.ignore_index, &out.all_ignored),
                dice_loss(student.fused, mg, cfg.ignore_index));
  out.l_g = add(ce_loss(teacher.fused, mg, cfg.ignore_index),
                dice_loss(teacher.fused, mg, cfg.ignore_index));
  BoundaryMasks masks = boundary_band(mg, cfg.num_classes, cfg.edge_size, cfg.ignore_index);
  Tensor rtarget = frozen ? frozen->response : detach(teacher.fused);
  out.l_rd = response_distill(student.fused, rtarget, masks);
  Tensor starget = frozen   ? frozen->semantic
                   : sd_target ? *sd_target
                               : detach(teacher.s_proto);
  out.l_sd = semantic_distill(student.s_proto, starget);
  Tensor ptarget = frozen ? frozen->spatial : detach(teacher.p_proto);
  out.l_pd = spatial_distill(student.p_proto, ptarget);
  out.total = add(add(out.l_c, out.l_g),
                  add(add(mul_scalar(out.l_rd, cfg.lambda_r), mul_scalar(out.l_sd, cfg.lambda_s)),
                      mul_scalar(out.l_pd, cfg.lambda_p)));
  return out;
}

}  // namespace ssa
