#include "ssa/metrics.hpp"

#include <limits>
#include <stdexcept>

namespace ssa {

LabelMask predict_labels(const Tensor& logits) {
  if (logits.rank() != 3)
    throw std::invalid_argument("predict_labels: logits must be [H, W, K], got " +
                                shape_str(logits.shape()));
  const std::size_t h = logits.shape()[0], w = logits.shape()[1], k = logits.shape()[2];
  LabelMask out(h, w);
  const double* v = logits.data();
  for (std::size_t p = 0; p < h * w; ++p) {
    std::size_t best = 0;
    double mx = v[p * k];
    for (std::size_t c = 1; c < k; ++c) {
      if (v[p * k + c] > mx) {
        mx = v[p * k + c];
        best = c;
      }
    }
    out.labels[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

IouAccumulator::IouAccumulator(std::size_t num_classes, std::int32_t ignore_index)
    : num_classes_(num_classes),
      ignore_index_(ignore_index),
      intersection_(num_classes, 0),
      pred_count_(num_classes, 0),
      truth_count_(num_classes, 0) {}

void IouAccumulator::add(const LabelMask& predicted, const LabelMask& truth) {
  if (predicted.height != truth.height || predicted.width != truth.width)
    throw std::invalid_argument("iou: prediction and truth extents differ");
  for (std::size_t p = 0; p < truth.size(); ++p) {
    const std::int32_t t = truth.labels[p];
    if (t == ignore_index_) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= num_classes_)
      throw std::invalid_argument("iou: label " + std::to_string(t) + " outside [0, " +
                                  std::to_string(num_classes_) + ")");
    const std::int32_t pr = predicted.labels[p];
    if (pr >= 0 && static_cast<std::size_t>(pr) < num_classes_) {
      ++pred_count_[static_cast<std::size_t>(pr)];
      if (pr == t) ++intersection_[static_cast<std::size_t>(pr)];
    }
    ++truth_count_[static_cast<std::size_t>(t)];
  }
}

std::vector<double> IouAccumulator::per_class() const {
  std::vector<double> out(num_classes_, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < num_classes_; ++c) {
    const std::uint64_t uni = pred_count_[c] + truth_count_[c] - intersection_[c];
    if (uni > 0)
      out[c] = static_cast<double>(intersection_[c]) / static_cast<double>(uni);
  }
  return out;
}

double IouAccumulator::miou() const {
  const std::vector<double> ious = per_class();
  double sum = 0.0;
  std::size_t counted = 0;
  for (double v : ious) {
    if (v == v) {
      sum += v;
      ++counted;
    }
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

}  // namespace ssa
