#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <ssmt/rng.hpp>
#include <ssmt/tensor.hpp>

namespace testutil {

inline ssmt::Tensor random_tensor(ssmt::Rng& rng, ssmt::Shape shape, double lo = -1.0,
                                  double hi = 1.0, bool requires_grad = true) {
    const size_t n = [&] {
        size_t p = 1;
        for (int d : shape) p *= static_cast<size_t>(d);
        return p;
    }();
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return ssmt::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Pushes every entry with |x - center| < margin away from the center, so
// finite differences never straddle a kink (relu at 0, clamped norms).
inline void nudge_away_from(ssmt::Tensor& t, double center, double margin) {
    for (double& x : t.data()) {
        const double delta = x - center;
        if (std::fabs(delta) < margin) x = center + (delta >= 0.0 ? margin : -margin);
    }
}

struct GradCheck {
    double max_rel_err = 0.0;
    int comparisons = 0;
    std::string worst;  // op/site label of the worst comparison
};

// Central-difference check of every element of every leaf against the
// gradients produced by backward(). `build` must construct a fresh scalar
// from the current leaf values on each call.
inline void check_gradients(GradCheck& acc, const std::string& label,
                            std::vector<ssmt::Tensor> leaves,
                            const std::function<ssmt::Tensor()>& build, double h = 1e-5) {
    for (auto& leaf : leaves) leaf.zero_grad();
    ssmt::Tensor loss = build();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        analytic.push_back(leaf.has_grad() ? leaf.grad()
                                           : std::vector<double>(leaf.numel(), 0.0));
    }

    ssmt::NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].data();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + h;
            const double fp = build().value();
            vals[i] = keep - h;
            const double fm = build().value();
            vals[i] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[li][i];
            const double rel =
                std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
            ++acc.comparisons;
            if (rel > acc.max_rel_err) {
                acc.max_rel_err = rel;
                acc.worst = label + " leaf " + std::to_string(li) + " elem " + std::to_string(i);
            }
        }
    }
}

}  // namespace testutil
