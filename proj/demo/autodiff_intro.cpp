// A five-minute tour of the reverse-mode core: build a one-layer network,
// pull gradients off the tape, and check one of them against a finite
// difference.  Everything the full model does is this, composed.

#include <cstdio>

#include "ismrnn/gradcheck.hpp"
#include "ismrnn/tensor.hpp"

using namespace ismrnn;

int main() {
    RngStream rng(7, "intro");
    Tensor x = Tensor::randu({4, 3}, rng, -1.0, 1.0); // batch of 4, width 3
    Tensor y = Tensor::randu({4, 2}, rng, -1.0, 1.0); // targets, width 2
    Tensor w = Tensor::randu({3, 2}, rng, -0.5, 0.5).set_tracked();
    Tensor b = Tensor::zeros({2}).set_tracked();

    // ops recorded only while a tape is in scope; outside it this is plain math
    Tape tape;
    double loss_out;
    {
        Tape::Scope scope(tape);
        Tensor pred = tanh(linear(x, w, b));
        Tensor loss = mean_all(square(sub(pred, y)));
        loss_out = loss.values()[0];
        tape.backward(loss);
    }
    std::printf("loss      %.6f\n", loss_out);
    std::printf("dL/db     [%.6f, %.6f]\n", b.grad()[0], b.grad()[1]);

    // the same derivative, the slow way: wiggle w[0][0] and difference the loss
    auto f = [&](std::span<const double> theta) {
        Tensor w2 = Tensor::from_values({3, 2}, std::vector<double>(theta.begin(), theta.end()));
        Tensor pred = tanh(linear(x, w2, b));
        return mean_all(square(sub(pred, y))).values()[0];
    };
    FdGradient fd = finite_difference_gradient(f, w.values(), 1e-6);
    std::printf("dL/dw[0]  tape %.8f  finite-diff %.8f\n", w.grad()[0], fd.grad[0]);
    return 0;
}
