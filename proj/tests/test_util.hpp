#pragma once

// Test-only oracles: central finite differences and random fills. These never
// call into the backward rules they are used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mmhdit/ops.hpp"
#include "mmhdit/rng.hpp"
#include "mmhdit/tensor.hpp"

namespace mmh::test {

inline Tensor64 random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = rng.normal() * scale;
    return Tensor64::from_data(std::move(shape), std::move(data), requires_grad);
}

/// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

/// Compares backward() against central differences for every element of
/// every tensor in `params`. `loss` must rebuild the graph on each call.
inline GradCheck check_gradients(const std::vector<Tensor64>& params, const std::function<Tensor64()>& loss,
                                 double h = 1e-5, double floor = 1e-6) {
    for (auto p : params) {
        if (p.has_grad()) p.zero_grad();
    }
    loss().backward();
    GradCheck result;
    for (auto p : params) {
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        auto values = p.data_mut();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double keep = values[i];
            double plus, minus;
            {
                NoGradGuard guard;
                values[i] = keep + h;
                plus = loss().item();
                values[i] = keep - h;
                minus = loss().item();
            }
            values[i] = keep;
            const double numeric = (plus - minus) / (2 * h);
            result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic[i], numeric, floor));
            ++result.checked;
        }
    }
    return result;
}

/// Fixed random projection so vector-valued outputs reduce to a scalar loss.
inline Tensor64 probe_loss(const Tensor64& out, std::uint64_t seed = 99) {
    Rng rng(seed);
    auto w = random_tensor(out.shape(), rng, 1.0, false);
    return sum(mul(out, w));
}

}  // namespace mmh::test
