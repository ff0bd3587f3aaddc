// What the selective state-space scan actually does to a signal.  The step
// size delta is the gate: small delta decays the state slowly (long memory),
// large delta overwrites it fast.  Feed one impulse through both regimes and
// watch the tail.

#include <cstdio>

#include "ismrnn/mamba.hpp"

using namespace ismrnn;

int main() {
    const std::size_t L = 16;

    // one batch, one channel, one state dim; impulse at t = 0
    Tensor u = Tensor::zeros({1, L, 1});
    u.values()[0] = 1.0;
    Tensor A = Tensor::from_values({1, 1}, {-1.0});     // unit decay rate
    Tensor Bp = Tensor::full({1, L, 1}, 1.0);           // write the input in
    Tensor Cp = Tensor::full({1, L, 1}, 1.0);           // read the state out
    Tensor Dskip = Tensor::zeros({1});                  // no passthrough

    auto respond = [&](double dt) {
        Tensor delta = Tensor::full({1, L, 1}, dt);
        return ssm_scan(u, delta, A, Bp, Cp, Dskip);
    };
    Tensor slow = respond(0.1); // state decays by exp(-0.1) per step
    Tensor fast = respond(2.0); // state decays by exp(-2.0) per step

    std::printf("t    slow(dt=0.1)  fast(dt=2.0)\n");
    for (std::size_t t = 0; t < L; ++t)
        std::printf("%-4zu %12.6f %13.6f\n", t, slow.values()[t], fast.values()[t]);
    std::printf("\nsame kernel, same weights; only the step size differs.\n"
                "in the model delta is computed from the input, so the block\n"
                "chooses per time step what to remember and what to flush.\n");
    return 0;
}
