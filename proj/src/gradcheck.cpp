#include "lcc/gradcheck.hpp"

#include <cmath>
#include <numeric>
#include <vector>

namespace lcc {

double grad_check_sampled(const ScalarFn& f, Tensor x, double eps,
                          std::span<const int64_t> indices) {
    if (eps < 1e-7 || eps > 1e-4)
        throw Error("grad_check: eps " + std::to_string(eps) + " outside [1e-7, 1e-4]");
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor y = f(x);
    if (!std::isfinite(y.item())) throw EvalError("grad_check: f(x) is not finite");
    y.backward();
    const std::vector<double> analytic = x.grad();

    double max_rel = 0.0;
    for (int64_t idx : indices) {
        const double saved = x.at(idx);
        x.at(idx) = saved + eps;
        const double up = f(x).item();
        x.at(idx) = saved - eps;
        const double down = f(x).item();
        x.at(idx) = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw EvalError("grad_check: perturbed evaluation is not finite");
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic[static_cast<size_t>(idx)];
        const double rel = std::abs(a - numeric) /
                           std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

double grad_check(const ScalarFn& f, Tensor x, double eps) {
    std::vector<int64_t> all(static_cast<size_t>(x.size()));
    std::iota(all.begin(), all.end(), 0);
    return grad_check_sampled(f, std::move(x), eps, all);
}

} // namespace lcc
