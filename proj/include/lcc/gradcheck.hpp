#pragma once

#include <functional>
#include <span>

#include "lcc/tensor.hpp"

namespace lcc {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Central-difference check of the analytic gradient of f at x, over the given
// flat indices. Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
// f must rebuild its graph from the tensor it is handed.
double grad_check_sampled(const ScalarFn& f, Tensor x, double eps,
                          std::span<const int64_t> indices);

// All entries of x.
double grad_check(const ScalarFn& f, Tensor x, double eps);

} // namespace lcc
