#pragma once

// Helpers shared by parameter structs. A parameter struct exposes
// `for_each(fn)` visiting (name, Tensor&) in a fixed order; that order defines
// the parameter ids used by gradients, the optimizer, and checkpoints.

#include <vector>

#include "fixslot/tensor.hpp"

namespace fixslot {

// Copy of `params` whose tensors are tape leaves with consecutive ids.
template <typename S, typename P>
P attach_params(const P& params, Tape<S>& tape, int& next_id) {
  P copy = params;
  copy.for_each([&](const char*, Tensor<S>& t) { t = tape.leaf(t, next_id++); });
  return copy;
}

template <typename S, typename P>
std::vector<Tensor<S>*> param_pointers(P& params) {
  std::vector<Tensor<S>*> out;
  params.for_each([&](const char*, Tensor<S>& t) { out.push_back(&t); });
  return out;
}

template <typename P>
int param_count(const P& params) {
  int n = 0;
  params.for_each([&](const char*, const auto&) { ++n; });
  return n;
}

}  // namespace fixslot
