#pragma once

#include <gtest/gtest.h>

#include <span>
#include <vector>

#include "ismrnn/gradcheck.hpp"
#include "ismrnn/rng.hpp"
#include "ismrnn/tensor.hpp"

namespace testutil {

using ismrnn::Shape;
using ismrnn::Tape;
using ismrnn::Tensor;

inline std::vector<Tensor> split_params(const std::vector<Shape>& shapes,
                                        std::span<const double> theta, bool tracked) {
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (const Shape& s : shapes) {
        const std::size_t n = ismrnn::shape_size(s);
        std::vector<double> v(theta.begin() + off, theta.begin() + off + n);
        off += n;
        Tensor t = Tensor::from_values(s, std::move(v));
        if (tracked) t.set_tracked();
        out.push_back(t);
    }
    EXPECT_EQ(off, theta.size());
    return out;
}

// Runs fn without a tape (evaluation mode) and returns the scalar value.
template <class Fn>
double forward_value(const std::vector<Shape>& shapes, Fn&& fn, std::span<const double> theta) {
    auto params = split_params(shapes, theta, false);
    return fn(params).item();
}

// Runs fn under a fresh tape and returns the concatenated parameter gradient.
template <class Fn>
std::vector<double> backward_gradient(const std::vector<Shape>& shapes, Fn&& fn,
                                      std::span<const double> theta) {
    auto params = split_params(shapes, theta, true);
    ismrnn::Tape tape;
    Tensor loss;
    {
        ismrnn::Tape::Scope scope(tape);
        loss = fn(params);
    }
    tape.backward(loss);
    std::vector<double> g;
    for (Tensor& p : params)
        g.insert(g.end(), p.grad().begin(), p.grad().end());
    return g;
}

// Compares reverse-mode gradients against central differences.
template <class Fn>
void expect_gradients_match(const std::vector<Shape>& shapes, Fn&& fn,
                            std::vector<double> theta, double step = 1e-5,
                            double tol = 2e-6) {
    auto ad = backward_gradient(shapes, fn, theta);
    auto fd = ismrnn::finite_difference_gradient(
        [&](std::span<const double> t) { return forward_value(shapes, fn, t); }, theta, step);
    double err = ismrnn::max_rel_error(ad, fd);
    EXPECT_LT(err, tol);
}

inline std::vector<double> random_theta(std::size_t n, std::uint64_t seed,
                                        double lo = -1.0, double hi = 1.0) {
    ismrnn::RngStream rng(seed, "test-theta");
    std::vector<double> v(n);
    for (double& x : v) x = rng.next_uniform(lo, hi);
    return v;
}

} // namespace testutil
