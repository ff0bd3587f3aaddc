#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "ismrnn/tensor.hpp"
#include "testutil.hpp"

using ismrnn::RngStream;
using ismrnn::Shape;
using ismrnn::Tape;
using ismrnn::Tensor;
using testutil::expect_gradients_match;
using testutil::random_theta;

namespace {

// Independent matmul oracle: plain separate multiply and add, ascending k.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t M, std::size_t K, std::size_t N) {
    std::vector<double> c(M * N, 0.0);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                double prod = a[m * K + k] * b[k * N + n];
                acc = acc + prod;
            }
            c[m * N + n] = acc;
        }
    return c;
}

// Bit-for-bit oracle: fma dot products in ascending k, the documented
// accumulation contract of the library kernel.
std::vector<double> fma_matmul(const std::vector<double>& a, const std::vector<double>& b,
                               std::size_t M, std::size_t K, std::size_t N) {
    std::vector<double> c(M * N, 0.0);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k)
                acc = std::fma(a[m * K + k], b[k * N + n], acc);
            c[m * N + n] = acc;
        }
    return c;
}

Tensor rand_tensor(Shape s, std::uint64_t seed) {
    RngStream rng(seed, "tensor");
    return Tensor::randu(std::move(s), rng, -1.0, 1.0);
}

} // namespace

// ---- construction ----

TEST(TensorBasics, FactoriesAndAccessors) {
    Tensor z = Tensor::zeros({2, 3});
    EXPECT_EQ(z.rank(), 2u);
    EXPECT_EQ(z.size(), 6u);
    EXPECT_EQ(z.rows(), 2u);
    EXPECT_EQ(z.cols(), 3u);
    for (double v : z.values()) EXPECT_EQ(v, 0.0);

    Tensor f = Tensor::full({4}, 2.5);
    for (double v : f.values()) EXPECT_EQ(v, 2.5);

    EXPECT_DOUBLE_EQ(Tensor::scalar(-3.0).item(), -3.0);
}

TEST(TensorBasics, FromValuesLengthMismatchThrows) {
    try {
        Tensor::from_values({2, 3}, {1.0, 2.0});
        FAIL() << "expected ShapeError";
    } catch (const ismrnn::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2 x 3]"), std::string::npos);
    }
}

TEST(TensorBasics, ItemOnNonScalarThrows) {
    EXPECT_THROW(Tensor::zeros({2, 2}).item(), ismrnn::ContractError);
}

TEST(TensorBasics, RowsOnNonMatrixThrows) {
    EXPECT_THROW(Tensor::zeros({2, 2, 2}).rows(), ismrnn::ShapeError);
}

// ---- matmul ----

TEST(Matmul, MatchesNaiveOracle) {
    const std::size_t M = 5, K = 7, N = 4;
    Tensor a = rand_tensor({M, K}, 1);
    Tensor b = rand_tensor({K, N}, 2);
    Tensor c = ismrnn::matmul(a, b);
    auto ref = naive_matmul(a.values(), b.values(), M, K, N);
    ASSERT_EQ(c.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
        EXPECT_NEAR(c.values()[i], ref[i], 1e-13);
}

TEST(Matmul, BitwiseEqualToFmaDotReference) {
    const std::size_t M = 9, K = 33, N = 8;
    Tensor a = rand_tensor({M, K}, 3);
    Tensor b = rand_tensor({K, N}, 4);
    Tensor c = ismrnn::matmul(a, b);
    auto ref = fma_matmul(a.values(), b.values(), M, K, N);
    EXPECT_EQ(std::memcmp(c.data(), ref.data(), ref.size() * sizeof(double)), 0);
}

TEST(Matmul, TransposeFlagsMatchNaive) {
    const std::size_t M = 3, K = 5, N = 4;
    // Storage shapes for each flag combination.
    for (bool ta : {false, true}) {
        for (bool tb : {false, true}) {
            Tensor a = rand_tensor(ta ? Shape{K, M} : Shape{M, K}, 10 + ta);
            Tensor b = rand_tensor(tb ? Shape{N, K} : Shape{K, N}, 20 + tb);
            // Materialize effective operands for the oracle.
            std::vector<double> ae(M * K), be(K * N);
            for (std::size_t m = 0; m < M; ++m)
                for (std::size_t k = 0; k < K; ++k)
                    ae[m * K + k] = ta ? a.values()[k * M + m] : a.values()[m * K + k];
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t n = 0; n < N; ++n)
                    be[k * N + n] = tb ? b.values()[n * K + k] : b.values()[k * N + n];
            auto ref = naive_matmul(ae, be, M, K, N);
            Tensor c = ismrnn::matmul(a, b, ta, tb);
            ASSERT_EQ(c.rows(), M);
            ASSERT_EQ(c.cols(), N);
            for (std::size_t i = 0; i < ref.size(); ++i)
                EXPECT_NEAR(c.values()[i], ref[i], 1e-13);
        }
    }
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    try {
        ismrnn::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
        FAIL() << "expected ShapeError";
    } catch (const ismrnn::ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2 x 3]"), std::string::npos);
        EXPECT_NE(msg.find("[4 x 5]"), std::string::npos);
    }
}

TEST(Matmul, NonMatrixThrows) {
    EXPECT_THROW(ismrnn::matmul(Tensor::zeros({2, 2, 2}), Tensor::zeros({2, 2})),
                 ismrnn::ShapeError);
}

TEST(Matmul, DeterministicAcrossCalls) {
    Tensor a = rand_tensor({6, 31}, 5);
    Tensor b = rand_tensor({31, 7}, 6);
    Tensor c1 = ismrnn::matmul(a, b);
    Tensor c2 = ismrnn::matmul(a, b);
    EXPECT_EQ(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)), 0);
}

TEST(Matmul, LinearAppliesRowBias) {
    Tensor x = rand_tensor({3, 4}, 7);
    Tensor w = rand_tensor({4, 2}, 8);
    Tensor b = Tensor::from_values({2}, {10.0, -10.0});
    Tensor y = ismrnn::linear(x, w, b);
    Tensor y0 = ismrnn::matmul(x, w);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 2; ++c)
            EXPECT_DOUBLE_EQ(y.values()[r * 2 + c],
                             y0.values()[r * 2 + c] + b.values()[c]);
}

// ---- broadcast arithmetic ----

TEST(Broadcast, SameShape) {
    Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_values({2, 2}, {10, 20, 30, 40});
    EXPECT_EQ(ismrnn::add(a, b).values(), (std::vector<double>{11, 22, 33, 44}));
    EXPECT_EQ(ismrnn::sub(a, b).values(), (std::vector<double>{-9, -18, -27, -36}));
    EXPECT_EQ(ismrnn::mul(a, b).values(), (std::vector<double>{10, 40, 90, 160}));
}

TEST(Broadcast, RowVectorAgainstLastAxis) {
    Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r1 = Tensor::from_values({3}, {10, 20, 30});
    Tensor r2 = Tensor::from_values({1, 3}, {10, 20, 30});
    auto expect = std::vector<double>{11, 22, 33, 14, 25, 36};
    EXPECT_EQ(ismrnn::add(a, r1).values(), expect);
    EXPECT_EQ(ismrnn::add(a, r2).values(), expect);
}

TEST(Broadcast, RowVectorAgainstRank3LastAxis) {
    Tensor a = Tensor::from_values({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor r = Tensor::from_values({2}, {100, 200});
    EXPECT_EQ(ismrnn::add(a, r).values(),
              (std::vector<double>{101, 202, 103, 204, 105, 206, 107, 208}));
}

TEST(Broadcast, ColumnVector) {
    Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor c = Tensor::from_values({2, 1}, {10, 100});
    EXPECT_EQ(ismrnn::mul(a, c).values(), (std::vector<double>{10, 20, 30, 400, 500, 600}));
}

TEST(Broadcast, ScalarEitherSide) {
    Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor s = Tensor::scalar(2.0);
    EXPECT_EQ(ismrnn::mul(a, s).values(), (std::vector<double>{2, 4, 6, 8}));
    EXPECT_EQ(ismrnn::sub(s, a).values(), (std::vector<double>{1, 0, -1, -2}));
    EXPECT_EQ(ismrnn::div(s, a).values(), (std::vector<double>{2, 1, 2.0 / 3.0, 0.5}));
}

TEST(Broadcast, MismatchThrowsNamingBothShapes) {
    try {
        ismrnn::add(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}));
        FAIL() << "expected ShapeError";
    } catch (const ismrnn::ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2 x 3]"), std::string::npos);
        EXPECT_NE(msg.find("[2 x 4]"), std::string::npos);
    }
}

TEST(Broadcast, DivValues) {
    Tensor a = Tensor::from_values({3}, {1.0, 9.0, -8.0});
    Tensor b = Tensor::from_values({3}, {2.0, 3.0, 4.0});
    EXPECT_EQ(ismrnn::div(a, b).values(), (std::vector<double>{0.5, 3.0, -2.0}));
}

// ---- elementwise functions ----

TEST(Elementwise, KnownValues) {
    Tensor x = Tensor::from_values({5}, {-2.0, -0.5, 0.0, 0.5, 2.0});
    EXPECT_DOUBLE_EQ(ismrnn::sigmoid(x).values()[2], 0.5);
    EXPECT_DOUBLE_EQ(ismrnn::tanh(x).values()[2], 0.0);
    EXPECT_DOUBLE_EQ(ismrnn::silu(x).values()[2], 0.0);
    EXPECT_NEAR(ismrnn::softplus(x).values()[2], std::log(2.0), 1e-15);
    EXPECT_DOUBLE_EQ(ismrnn::neg(x).values()[0], 2.0);
    EXPECT_DOUBLE_EQ(ismrnn::abs(x).values()[0], 2.0);
    EXPECT_DOUBLE_EQ(ismrnn::square(x).values()[4], 4.0);
    EXPECT_DOUBLE_EQ(ismrnn::scale(x, 3.0).values()[3], 1.5);
    EXPECT_DOUBLE_EQ(ismrnn::add_const(x, 1.0).values()[0], -1.0);
    EXPECT_DOUBLE_EQ(ismrnn::rsub_const(1.0, x).values()[4], -1.0);
    EXPECT_DOUBLE_EQ(ismrnn::exp(Tensor::scalar(0.0)).item(), 1.0);
    EXPECT_DOUBLE_EQ(ismrnn::sqrt(Tensor::scalar(9.0)).item(), 3.0);
}

TEST(Elementwise, SigmoidAndSoftplusAreStableAtExtremes) {
    Tensor x = Tensor::from_values({2}, {-800.0, 800.0});
    Tensor s = ismrnn::sigmoid(x);
    EXPECT_GE(s.values()[0], 0.0);
    EXPECT_LE(s.values()[1], 1.0);
    EXPECT_TRUE(std::isfinite(s.values()[0]));
    Tensor sp = ismrnn::softplus(x);
    EXPECT_TRUE(std::isfinite(sp.values()[0]));
    EXPECT_TRUE(std::isfinite(sp.values()[1]));
    EXPECT_DOUBLE_EQ(sp.values()[1], 800.0);
    EXPECT_GE(sp.values()[0], 0.0);
}

// ---- structure ops ----

TEST(Structure, ReshapeSharesStorageAndSkipsTape) {
    Tensor x = rand_tensor({2, 6}, 30);
    x.set_tracked();
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = ismrnn::reshape(x, {3, 4});
    EXPECT_EQ(tape.size(), 0u);
    EXPECT_EQ(x.node()->val.get(), y.node()->val.get());
    EXPECT_EQ(x.node()->grad.get(), y.node()->grad.get());
    y.values()[0] = 123.0;
    EXPECT_EQ(x.values()[0], 123.0);
}

TEST(Structure, ReshapeGradientFlowsToBase) {
    Tensor x = rand_tensor({2, 6}, 31);
    x.set_tracked();
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor y = ismrnn::reshape(x, {4, 3});
        Tensor loss = ismrnn::sum_all(ismrnn::square(y));
        tape.backward(loss);
    }
    for (std::size_t i = 0; i < x.size(); ++i)
        EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.values()[i]);
}

TEST(Structure, ReshapeSizeMismatchThrows) {
    EXPECT_THROW(ismrnn::reshape(Tensor::zeros({2, 3}), {4, 2}), ismrnn::ShapeError);
}

TEST(Structure, ConcatColsValues) {
    Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_values({2, 1}, {5, 6});
    Tensor c = ismrnn::concat_cols({a, b});
    EXPECT_EQ(c.shape(), (Shape{2, 3}));
    EXPECT_EQ(c.values(), (std::vector<double>{1, 2, 5, 3, 4, 6}));
}

TEST(Structure, ConcatRowsValues) {
    Tensor a = Tensor::from_values({1, 3}, {1, 2, 3});
    Tensor b = Tensor::from_values({2, 3}, {4, 5, 6, 7, 8, 9});
    Tensor c = ismrnn::concat_rows({a, b});
    EXPECT_EQ(c.shape(), (Shape{3, 3}));
    EXPECT_EQ(c.values(), (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
}

TEST(Structure, ConcatMismatchThrows) {
    EXPECT_THROW(ismrnn::concat_cols({Tensor::zeros({2, 2}), Tensor::zeros({3, 2})}),
                 ismrnn::ShapeError);
    EXPECT_THROW(ismrnn::concat_rows({Tensor::zeros({2, 2}), Tensor::zeros({2, 3})}),
                 ismrnn::ShapeError);
}

TEST(Structure, SliceValues) {
    Tensor x = Tensor::from_values({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    EXPECT_EQ(ismrnn::slice_cols(x, 1, 3).values(), (std::vector<double>{2, 3, 6, 7}));
    EXPECT_EQ(ismrnn::slice_rows(x, 1, 2).values(), (std::vector<double>{5, 6, 7, 8}));
    Tensor y = Tensor::from_values({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor s = ismrnn::slice_rows(y, 0, 1);
    EXPECT_EQ(s.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(s.values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Structure, SliceOutOfRangeThrows) {
    Tensor x = Tensor::zeros({2, 4});
    EXPECT_THROW(ismrnn::slice_cols(x, 3, 5), ismrnn::ParamError);
    EXPECT_THROW(ismrnn::slice_rows(x, 0, 3), ismrnn::ParamError);
}

TEST(Structure, TransposeRoundtrip) {
    Tensor x = rand_tensor({3, 5}, 40);
    Tensor y = ismrnn::transpose(ismrnn::transpose(x));
    EXPECT_EQ(y.values(), x.values());
    Tensor t = ismrnn::transpose(x);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 5; ++c)
            EXPECT_EQ(t.values()[c * 3 + r], x.values()[r * 5 + c]);
}

TEST(Structure, TransposeInnerMatchesLoop) {
    Tensor x = rand_tensor({2, 3, 4}, 41);
    Tensor y = ismrnn::transpose_inner(x);
    EXPECT_EQ(y.shape(), (Shape{2, 4, 3}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                EXPECT_EQ(y.values()[(b * 4 + j) * 3 + i], x.values()[(b * 3 + i) * 4 + j]);
}

TEST(Structure, Permute102IsSelfInverse) {
    Tensor x = rand_tensor({2, 3, 4}, 42);
    Tensor y = ismrnn::permute102(x);
    EXPECT_EQ(y.shape(), (Shape{3, 2, 4}));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t k = 0; k < 4; ++k)
                EXPECT_EQ(y.values()[(j * 2 + i) * 4 + k], x.values()[(i * 3 + j) * 4 + k]);
    EXPECT_EQ(ismrnn::permute102(y).values(), x.values());
}

TEST(Structure, GatherRowsWithRepeats) {
    Tensor x = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor g = ismrnn::gather_rows(x, {2, 0, 2});
    EXPECT_EQ(g.shape(), (Shape{3, 2}));
    EXPECT_EQ(g.values(), (std::vector<double>{5, 6, 1, 2, 5, 6}));
    EXPECT_THROW(ismrnn::gather_rows(x, {3}), ismrnn::ParamError);
}

// ---- reductions ----

TEST(Reduce, MeanOverAxisOfConstantIsConstant) {
    Tensor x = Tensor::full({2, 3, 4}, 2.5);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        Tensor m = ismrnn::mean_axis(x, axis);
        for (double v : m.values()) EXPECT_DOUBLE_EQ(v, 2.5);
    }
}

TEST(Reduce, MeanAxisMatchesLoop) {
    Tensor x = rand_tensor({2, 3, 4}, 50);
    Tensor m = ismrnn::mean_axis(x, 1);
    EXPECT_EQ(m.shape(), (Shape{2, 4}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t q = 0; q < 4; ++q) {
            double s = 0.0;
            for (std::size_t t = 0; t < 3; ++t) s += x.values()[(b * 3 + t) * 4 + q];
            EXPECT_NEAR(m.values()[b * 4 + q], s / 3.0, 1e-15);
        }
}

TEST(Reduce, SumAndMeanAll) {
    Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(ismrnn::sum_all(x).item(), 10.0);
    EXPECT_DOUBLE_EQ(ismrnn::mean_all(x).item(), 2.5);
}

// ---- tape mechanics ----

TEST(TapeMechanics, NoActiveTapeMeansNothingTracked) {
    Tensor w = rand_tensor({2, 2}, 60);
    w.set_tracked();
    Tensor y = ismrnn::square(w);
    EXPECT_FALSE(y.tracked());
}

TEST(TapeMechanics, ConstantInputsAreNotRecorded) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor a = rand_tensor({2, 2}, 61);
    Tensor b = rand_tensor({2, 2}, 62);
    Tensor c = ismrnn::add(a, b);
    EXPECT_EQ(tape.size(), 0u);
    EXPECT_FALSE(c.tracked());
}

TEST(TapeMechanics, TrackedInputsAreRecorded) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor w = rand_tensor({2, 2}, 63);
    w.set_tracked();
    Tensor y = ismrnn::square(w);
    EXPECT_EQ(tape.size(), 1u);
    EXPECT_TRUE(y.tracked());
}

TEST(TapeMechanics, BackwardTwiceThrows) {
    Tensor w = rand_tensor({2}, 64);
    w.set_tracked();
    Tape tape;
    Tensor loss;
    {
        Tape::Scope scope(tape);
        loss = ismrnn::sum_all(w);
    }
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), ismrnn::StateError);
}

TEST(TapeMechanics, RecordingOnFrozenTapeThrows) {
    Tensor w = rand_tensor({2}, 65);
    w.set_tracked();
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = ismrnn::sum_all(w);
    tape.backward(loss);
    EXPECT_THROW(ismrnn::square(w), ismrnn::StateError);
}

TEST(TapeMechanics, NonScalarLossThrows) {
    Tensor w = rand_tensor({2, 2}, 66);
    w.set_tracked();
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = ismrnn::square(w);
    EXPECT_THROW(tape.backward(y), ismrnn::ContractError);
}

TEST(TapeMechanics, UntrackedLossThrows) {
    Tape tape;
    Tensor loss = Tensor::scalar(1.0);
    EXPECT_THROW(tape.backward(loss), ismrnn::ContractError);
}

TEST(TapeMechanics, GradientsAccumulateUntilZeroed) {
    Tensor w = Tensor::from_values({2}, {1.0, 2.0});
    w.set_tracked();
    for (int pass = 0; pass < 2; ++pass) {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = ismrnn::sum_all(w);
        tape.backward(loss);
    }
    EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(w.grad()[1], 2.0);
    w.zero_grad();
    EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
}

TEST(TapeMechanics, SimpleChainGradientIsExact) {
    Tensor w = Tensor::scalar(3.0);
    w.set_tracked();
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor loss = ismrnn::square(w);
        tape.backward(loss);
    }
    EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

// ---- gradients against finite differences ----

TEST(Gradients, MatmulAllFlagCombos) {
    for (bool ta : {false, true}) {
        for (bool tb : {false, true}) {
            std::vector<Shape> shapes = {ta ? Shape{4, 3} : Shape{3, 4},
                                         tb ? Shape{5, 4} : Shape{4, 5}};
            auto fn = [ta, tb](const std::vector<Tensor>& p) {
                return ismrnn::mean_all(ismrnn::square(ismrnn::matmul(p[0], p[1], ta, tb)));
            };
            expect_gradients_match(shapes, fn, random_theta(32, 70 + 2 * ta + tb));
        }
    }
}

TEST(Gradients, BinaryOpsAllBroadcastCases) {
    struct Case {
        Shape a, b;
    };
    for (const Case& c : {Case{{3, 4}, {3, 4}}, Case{{3, 4}, {4}}, Case{{3, 4}, {1, 4}},
                          Case{{3, 4}, {3, 1}}, Case{{3, 4}, {1}}, Case{{1}, {3, 4}}}) {
        std::vector<Shape> shapes = {c.a, c.b};
        std::size_t n = ismrnn::shape_size(c.a) + ismrnn::shape_size(c.b);
        auto add_fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::add(p[0], p[1])));
        };
        auto sub_fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::sub(p[0], p[1])));
        };
        auto mul_fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::mul(p[0], p[1])));
        };
        auto div_fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(
                ismrnn::square(ismrnn::div(p[0], ismrnn::add_const(ismrnn::square(p[1]), 2.0))));
        };
        expect_gradients_match(shapes, add_fn, random_theta(n, 80));
        expect_gradients_match(shapes, sub_fn, random_theta(n, 81));
        expect_gradients_match(shapes, mul_fn, random_theta(n, 82));
        expect_gradients_match(shapes, div_fn, random_theta(n, 83));
    }
}

TEST(Gradients, UnaryFunctions) {
    std::vector<Shape> shapes = {{2, 5}};
    auto check = [&](auto op, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
        auto fn = [op](const std::vector<Tensor>& p) { return ismrnn::mean_all(op(p[0])); };
        expect_gradients_match(shapes, fn, random_theta(10, seed, lo, hi));
    };
    check([](const Tensor& t) { return ismrnn::sigmoid(t); }, 90);
    check([](const Tensor& t) { return ismrnn::tanh(t); }, 91);
    check([](const Tensor& t) { return ismrnn::silu(t); }, 92);
    check([](const Tensor& t) { return ismrnn::softplus(t); }, 93);
    check([](const Tensor& t) { return ismrnn::exp(t); }, 94);
    check([](const Tensor& t) { return ismrnn::sqrt(t); }, 95, 0.5, 2.0);
    check([](const Tensor& t) { return ismrnn::abs(t); }, 96, 0.2, 1.0);
    check([](const Tensor& t) { return ismrnn::square(t); }, 97);
    check([](const Tensor& t) { return ismrnn::neg(t); }, 98);
    check([](const Tensor& t) { return ismrnn::scale(t, -2.5); }, 99);
    check([](const Tensor& t) { return ismrnn::add_const(t, 3.0); }, 100);
    check([](const Tensor& t) { return ismrnn::rsub_const(1.0, t); }, 101);
}

TEST(Gradients, StructureOps) {
    {
        std::vector<Shape> shapes = {{2, 3}, {2, 2}};
        auto fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::concat_cols({p[0], p[1]})));
        };
        expect_gradients_match(shapes, fn, random_theta(10, 110));
    }
    {
        std::vector<Shape> shapes = {{1, 3}, {2, 3}};
        auto fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::concat_rows({p[0], p[1]})));
        };
        expect_gradients_match(shapes, fn, random_theta(9, 111));
    }
    {
        std::vector<Shape> shapes = {{3, 4}};
        auto fn = [](const std::vector<Tensor>& p) {
            Tensor a = ismrnn::slice_cols(p[0], 1, 3);
            Tensor b = ismrnn::slice_rows(p[0], 0, 2);
            return ismrnn::add(ismrnn::mean_all(ismrnn::square(a)),
                               ismrnn::mean_all(ismrnn::square(b)));
        };
        expect_gradients_match(shapes, fn, random_theta(12, 112));
    }
    {
        std::vector<Shape> shapes = {{3, 4}};
        auto fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::transpose(p[0])));
        };
        expect_gradients_match(shapes, fn, random_theta(12, 113));
    }
    {
        std::vector<Shape> shapes = {{2, 3, 4}};
        auto fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::transpose_inner(p[0])));
        };
        expect_gradients_match(shapes, fn, random_theta(24, 114));
    }
    {
        std::vector<Shape> shapes = {{2, 3, 4}};
        auto fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::permute102(p[0])));
        };
        expect_gradients_match(shapes, fn, random_theta(24, 115));
    }
    {
        std::vector<Shape> shapes = {{4, 3}};
        auto fn = [](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(
                ismrnn::square(ismrnn::gather_rows(p[0], {0, 2, 2, 3})));
        };
        expect_gradients_match(shapes, fn, random_theta(12, 116));
    }
    {
        std::vector<Shape> shapes = {{2, 6}};
        auto fn = [](const std::vector<Tensor>& p) {
            Tensor r = ismrnn::reshape(p[0], {3, 4});
            return ismrnn::mean_all(ismrnn::square(ismrnn::matmul(r, ismrnn::transpose(r))));
        };
        expect_gradients_match(shapes, fn, random_theta(12, 117));
    }
}

TEST(Gradients, Reductions) {
    for (std::size_t axis = 0; axis < 3; ++axis) {
        std::vector<Shape> shapes = {{2, 3, 4}};
        auto fn = [axis](const std::vector<Tensor>& p) {
            return ismrnn::mean_all(ismrnn::square(ismrnn::mean_axis(p[0], axis)));
        };
        expect_gradients_match(shapes, fn, random_theta(24, 120 + axis));
    }
    {
        std::vector<Shape> shapes = {{3, 3}};
        auto fn = [](const std::vector<Tensor>& p) {
            return ismrnn::sum_all(ismrnn::square(p[0]));
        };
        expect_gradients_match(shapes, fn, random_theta(9, 123));
    }
}

TEST(Gradients, CausalConv) {
    std::vector<Shape> shapes = {{2, 5, 3}, {3, 4}, {3}};
    auto fn = [](const std::vector<Tensor>& p) {
        return ismrnn::mean_all(
            ismrnn::square(ismrnn::causal_depthwise_conv(p[0], p[1], p[2])));
    };
    expect_gradients_match(shapes, fn, random_theta(30 + 12 + 3, 130));
}

TEST(Gradients, DropoutWithFixedMask) {
    std::vector<Shape> shapes = {{4, 4}};
    auto fn = [](const std::vector<Tensor>& p) {
        RngStream rng(777, "dropout-grad");
        return ismrnn::mean_all(ismrnn::square(ismrnn::dropout(p[0], 0.4, true, rng)));
    };
    expect_gradients_match(shapes, fn, random_theta(16, 131));
}

TEST(Gradients, ScanTime) {
    const std::size_t T = 3, R = 2, K = 3, H = 2;
    std::vector<Shape> shapes = {{T, R, K}, {K, H}, {H, H}};
    auto fn = [&](const std::vector<Tensor>& p) {
        Tensor h0 = Tensor::zeros({R, H});
        Tensor h = ismrnn::scan_time(p[0], h0, [&](const Tensor& x, const Tensor& h) {
            return ismrnn::tanh(ismrnn::add(ismrnn::matmul(x, p[1]), ismrnn::matmul(h, p[2])));
        });
        return ismrnn::mean_all(ismrnn::square(h));
    };
    expect_gradients_match(shapes, fn, random_theta(T * R * K + K * H + H * H, 132));
}

// ---- dropout semantics ----

TEST(Dropout, EvalModeReturnsSameHandle) {
    RngStream rng(1, "d");
    Tensor x = rand_tensor({4, 4}, 140);
    Tensor y = ismrnn::dropout(x, 0.5, false, rng);
    EXPECT_EQ(x.node().get(), y.node().get());
    EXPECT_EQ(rng.counter(), 0u);
}

TEST(Dropout, RateZeroIsIdentity) {
    RngStream rng(1, "d");
    Tensor x = rand_tensor({4, 4}, 141);
    Tensor y = ismrnn::dropout(x, 0.0, true, rng);
    EXPECT_EQ(x.node().get(), y.node().get());
}

TEST(Dropout, TrainModeZerosAndRescales) {
    RngStream rng(2, "d");
    Tensor x = Tensor::full({100, 100}, 1.0);
    const double rate = 0.3;
    Tensor y = ismrnn::dropout(x, rate, true, rng);
    std::size_t zeros = 0;
    for (double v : y.values()) {
        if (v == 0.0) {
            ++zeros;
        } else {
            EXPECT_DOUBLE_EQ(v, 1.0 / (1.0 - rate));
        }
    }
    double frac = static_cast<double>(zeros) / 10000.0;
    EXPECT_NEAR(frac, rate, 0.02);
}

TEST(Dropout, SameStreamGivesSameMask) {
    Tensor x = rand_tensor({8, 8}, 142);
    RngStream r1(9, "mask");
    RngStream r2(9, "mask");
    Tensor y1 = ismrnn::dropout(x, 0.5, true, r1);
    Tensor y2 = ismrnn::dropout(x, 0.5, true, r2);
    EXPECT_EQ(y1.values(), y2.values());
}

TEST(Dropout, InvalidRateThrows) {
    RngStream rng(1, "d");
    Tensor x = Tensor::zeros({2});
    EXPECT_THROW(ismrnn::dropout(x, 1.0, true, rng), ismrnn::ParamError);
    EXPECT_THROW(ismrnn::dropout(x, 1.5, true, rng), ismrnn::ParamError);
    EXPECT_THROW(ismrnn::dropout(x, -0.1, true, rng), ismrnn::ParamError);
}

// ---- causal conv semantics ----

TEST(CausalConv, MatchesNaiveOracle) {
    const std::size_t B = 2, L = 6, E = 3, k = 4;
    Tensor x = rand_tensor({B, L, E}, 150);
    Tensor w = rand_tensor({E, k}, 151);
    Tensor b = rand_tensor({E}, 152);
    Tensor y = ismrnn::causal_depthwise_conv(x, w, b);
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t e = 0; e < E; ++e) {
                double acc = b.values()[e];
                for (std::size_t i = 0; i < k; ++i) {
                    double xv = 0.0;
                    if (t >= i) xv = x.values()[(bb * L + t - i) * E + e];
                    acc += w.values()[e * k + i] * xv;
                }
                EXPECT_NEAR(y.values()[(bb * L + t) * E + e], acc, 1e-12);
            }
}

TEST(CausalConv, FutureInputsDoNotAffectPastOutputs) {
    const std::size_t B = 1, L = 8, E = 2, k = 4;
    Tensor w = rand_tensor({E, k}, 153);
    Tensor b = rand_tensor({E}, 154);
    Tensor x1 = rand_tensor({B, L, E}, 155);
    Tensor x2 = Tensor::from_values({B, L, E}, x1.values());
    const std::size_t t0 = 5;
    for (std::size_t t = t0; t < L; ++t)
        for (std::size_t e = 0; e < E; ++e) x2.values()[t * E + e] += 100.0;
    Tensor y1 = ismrnn::causal_depthwise_conv(x1, w, b);
    Tensor y2 = ismrnn::causal_depthwise_conv(x2, w, b);
    for (std::size_t t = 0; t < t0; ++t)
        for (std::size_t e = 0; e < E; ++e)
            EXPECT_EQ(y1.values()[t * E + e], y2.values()[t * E + e]);
}

TEST(CausalConv, WorksWithoutBias) {
    Tensor x = rand_tensor({1, 4, 2}, 156);
    Tensor w = rand_tensor({2, 3}, 157);
    Tensor y = ismrnn::causal_depthwise_conv(x, w, Tensor());
    EXPECT_DOUBLE_EQ(y.values()[0], w.values()[0] * x.values()[0]);
}

// ---- scan ----

TEST(Scan, MatchesManualUnroll) {
    const std::size_t T = 4, R = 2, K = 3;
    Tensor xs = rand_tensor({T, R, K}, 160);
    Tensor h0 = Tensor::zeros({R, K});
    Tensor h = ismrnn::scan_time(xs, h0, [](const Tensor& x, const Tensor& h) {
        return ismrnn::add(ismrnn::scale(h, 0.5), x);
    });
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < K; ++c) {
            double acc = 0.0;
            for (std::size_t t = 0; t < T; ++t)
                acc = 0.5 * acc + xs.values()[(t * R + r) * K + c];
            EXPECT_NEAR(h.values()[r * K + c], acc, 1e-15);
        }
}
