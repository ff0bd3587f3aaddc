#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "errors.hpp"

namespace ismrnn {

// Central-difference gradient of a scalar function, with a per-coordinate
// comparability verdict.  A coordinate where the two one-sided differences
// disagree badly (a kink, e.g. |x| at 0) is marked not comparable so callers
// can exclude it instead of failing on finite-difference noise.
struct FdGradient {
    std::vector<double> grad;
    std::vector<bool> comparable;
};

inline FdGradient finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f,
    std::vector<double> theta, double step) {
    if (!(step > 0.0))
        throw ParamError("finite_difference_gradient: step must be positive");
    const double f0 = f(theta);
    FdGradient out;
    out.grad.resize(theta.size());
    out.comparable.resize(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        theta[i] = saved + step;
        const double fp = f(theta);
        theta[i] = saved - step;
        const double fm = f(theta);
        theta[i] = saved;

        out.grad[i] = (fp - fm) / (2.0 * step);
        const double dplus = (fp - f0) / step;
        const double dminus = (f0 - fm) / step;
        const double mag = std::max(std::abs(dplus), std::abs(dminus));
        // One-sided slopes of a smooth function differ by O(step * f'');
        // a disagreement comparable to the slopes themselves means the
        // central difference is not trustworthy here.
        const bool kink = mag > 50.0 * step && std::abs(dplus - dminus) > 0.5 * mag;
        out.comparable[i] = !kink;
    }
    return out;
}

// max over comparable coordinates of |ad - fd| / max(|ad|, |fd|, floor).
inline double max_rel_error(std::span<const double> ad, const FdGradient& fd,
                            double floor = 1e-8) {
    if (ad.size() != fd.grad.size())
        throw ShapeError("max_rel_error: gradient lengths " + std::to_string(ad.size()) +
                         " and " + std::to_string(fd.grad.size()) + " differ");
    double worst = 0.0;
    for (std::size_t i = 0; i < ad.size(); ++i) {
        if (!fd.comparable[i]) continue;
        const double denom = std::max({std::abs(ad[i]), std::abs(fd.grad[i]), floor});
        worst = std::max(worst, std::abs(ad[i] - fd.grad[i]) / denom);
    }
    return worst;
}

} // namespace ismrnn
