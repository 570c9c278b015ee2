#include "ldgm/tensor.hpp"

#include <cmath>

#include "ldgm/error.hpp"

namespace ldgm::nn {

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) throw Error(ErrorCode::Shape, "tensor data does not match shape");
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

void Tensor::round_to(Precision precision) {
  if (precision == Precision::F64) return;
  for (auto& x : data_) x = static_cast<double>(static_cast<float>(x));
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace ldgm::nn
