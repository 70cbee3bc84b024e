#pragma once

#include <cstdint>
#include <vector>

#include "ssa/label_mask.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

// Per-pixel argmax labels; ties resolve to the lower class index.
LabelMask predict_labels(const Tensor& logits);

// Streaming intersection/union tallies over any number of images.
class IouAccumulator {
 public:
  IouAccumulator(std::size_t num_classes, std::int32_t ignore_index);

  void add(const LabelMask& predicted, const LabelMask& truth);

  // IoU per class; classes absent from both predictions and truth give NaN.
  std::vector<double> per_class() const;
  // Mean over classes with non-empty union; zero when every class is empty.
  double miou() const;

 private:
  std::size_t num_classes_;
  std::int32_t ignore_index_;
  std::vector<std::uint64_t> intersection_;
  std::vector<std::uint64_t> pred_count_;
  std::vector<std::uint64_t> truth_count_;
};

}  // namespace ssa
