#pragma once

#include <vector>

#include "crate/matrix.hpp"

namespace crate {

// A batch of token matrices, one d x N matrix per sample, in batch order.
// Labels are class indices; an empty label vector means unlabeled data.
struct TokenBatch {
  std::vector<Matrix> samples;
  std::vector<int> labels;

  std::size_t size() const { return samples.size(); }
  bool labeled() const { return !labels.empty(); }
};

}  // namespace crate
