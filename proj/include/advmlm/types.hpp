// Copyright 2026 The advmlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ==============================================================================

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "advmlm/tensor.hpp"

namespace advmlm {

/// Row-major integer matrix, used for token ids and 0/1 position masks.
using IntMatrix = Eigen::Array<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::vector<Index> flatten_ids(const IntMatrix& m) {
  std::vector<Index> out(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) out[static_cast<std::size_t>(i)] = m.data()[i];
  return out;
}

/// Constant tensor holding `m` with the given shape (numel must match).
template <class S>
Tensor<S> mask_tensor(const IntMatrix& m, Shape shape) {
  typename Tensor<S>::Array a(m.size());
  for (Index i = 0; i < m.size(); ++i) a[i] = static_cast<S>(m.data()[i]);
  return Tensor<S>(std::move(shape), std::move(a));
}

}  // namespace advmlm
