#pragma once

#include <cstdint>
#include <optional>

#include "bevfuse/diffcore/ops.hpp"

namespace bevfuse::train {

inline constexpr double kIouThreshold = 0.5;

/// Dataset-level IoU: intersection and union are summed over every added
/// map before dividing. Ignored cells count toward neither.
class IouAccumulator {
 public:
  explicit IouAccumulator(double threshold = kIouThreshold) : threshold_(threshold) {}

  void add(const diff::Tensor& logits, const diff::Tensor& target,
           const diff::Tensor* ignore = nullptr) {
    if (logits.shape() != target.shape() || (ignore && ignore->shape() != target.shape())) {
      throw diff::ShapeError("iou: prediction, target and ignore mask shapes differ");
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (ignore && (*ignore)[i] > 0.5) continue;
      const bool p = diff::sigmoid_scalar(logits[i]) >= threshold_;
      const bool t = target[i] > 0.5;
      inter_ += p && t;
      union_ += p || t;
    }
  }

  std::uint64_t intersection() const { return inter_; }
  std::uint64_t union_count() const { return union_; }
  /// Empty prediction and empty target over everything counted gives 1.
  double value() const {
    return union_ == 0 ? 1.0 : static_cast<double>(inter_) / static_cast<double>(union_);
  }

 private:
  double threshold_;
  std::uint64_t inter_ = 0, union_ = 0;
};

inline double iou(const diff::Tensor& logits, const diff::Tensor& target,
                  double threshold = kIouThreshold, const diff::Tensor* ignore = nullptr) {
  IouAccumulator acc(threshold);
  acc.add(logits, target, ignore);
  return acc.value();
}

}  // namespace bevfuse::train
