#include <doctest.h>

#include "fsdenoise/error.hpp"
#include "fsdenoise/tensor.hpp"
#include "support.hpp"

using fsd::nn::Tensor;
namespace nn = fsd::nn;

namespace {

Tensor random_tensor(nn::Shape shape, uint64_t seed, bool grad = true, double lo = -1.0, double hi = 1.0) {
    const auto n = static_cast<size_t>(nn::numel(shape));
    return Tensor::from(std::move(shape), testing::uniform_values(n, seed, lo, hi), grad);
}

void require_close_gradients(const testing::GradCheck& g) {
    INFO("worst relative error " << g.worst << ", passed " << g.passed << "/" << g.total);
    CHECK(g.fraction() >= 0.99);
}

} // namespace

TEST_CASE("conv output size arithmetic") {
    CHECK(nn::conv_output_size(256, {4, 2, 1}) == 128);
    CHECK(nn::conv_output_size(32, {4, 1, 1}) == 31);
    CHECK(nn::conv_transpose_output_size(2, {4, 2, 1}) == 4);
}

TEST_CASE("conv2d matches a direct convolution") {
    const Tensor x = random_tensor({2, 3, 6, 5}, 1, false);
    const Tensor w = random_tensor({4, 3, 4, 4}, 2, false);
    const Tensor b = random_tensor({4}, 3, false);
    const nn::ConvGeometry g{4, 2, 1};
    const Tensor y = nn::conv2d(x, w, b, g);
    REQUIRE(y.shape() == nn::Shape{2, 4, 3, 2});
    auto at = [](const Tensor& t, int64_t n, int64_t c, int64_t h, int64_t ww) {
        const auto& s = t.shape();
        return t.data()[static_cast<size_t>(((n * s[1] + c) * s[2] + h) * s[3] + ww)];
    };
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t o = 0; o < 4; ++o)
            for (int64_t i = 0; i < 3; ++i)
                for (int64_t j = 0; j < 2; ++j) {
                    double acc = b.data()[static_cast<size_t>(o)];
                    for (int64_t c = 0; c < 3; ++c)
                        for (int64_t ki = 0; ki < 4; ++ki)
                            for (int64_t kj = 0; kj < 4; ++kj) {
                                const int64_t r = i * 2 - 1 + ki, q = j * 2 - 1 + kj;
                                if (r < 0 || r >= 6 || q < 0 || q >= 5) continue;
                                acc += at(w, o, c, ki, kj) * at(x, n, c, r, q);
                            }
                    CHECK(at(y, n, o, i, j) == doctest::Approx(acc).epsilon(1e-12));
                }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    // <conv(x), y> == <x, convT(y)> with shared weights.
    const nn::ConvGeometry g{4, 2, 1};
    const Tensor x = random_tensor({1, 2, 8, 8}, 4, false);
    const Tensor w = random_tensor({3, 2, 4, 4}, 5, false);
    const Tensor y = random_tensor({1, 3, 4, 4}, 6, false);
    const Tensor cx = nn::conv2d(x, w, Tensor(), g);
    const Tensor ty = nn::conv_transpose2d(y, w, Tensor(), g);
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
    for (int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * ty.data()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("finite-difference gradients of every op") {
    SUBCASE("conv2d stride 2") {
        require_close_gradients(testing::check_op(
            [](const auto& in) { return nn::conv2d(in[0], in[1], in[2], {4, 2, 1}); },
            {random_tensor({2, 2, 8, 8}, 10), random_tensor({3, 2, 4, 4}, 11), random_tensor({3}, 12)}));
    }
    SUBCASE("conv2d stride 1") {
        require_close_gradients(testing::check_op(
            [](const auto& in) { return nn::conv2d(in[0], in[1], in[2], {4, 1, 1}); },
            {random_tensor({1, 2, 7, 7}, 13), random_tensor({2, 2, 4, 4}, 14), random_tensor({2}, 15)}));
    }
    SUBCASE("conv_transpose2d") {
        require_close_gradients(testing::check_op(
            [](const auto& in) { return nn::conv_transpose2d(in[0], in[1], in[2], {4, 2, 1}); },
            {random_tensor({2, 3, 4, 4}, 16), random_tensor({3, 2, 4, 4}, 17), random_tensor({2}, 18)}));
    }
    SUBCASE("instance_norm") {
        require_close_gradients(
            testing::check_op([](const auto& in) { return nn::instance_norm(in[0]); }, {random_tensor({2, 3, 4, 4}, 19)}));
    }
    SUBCASE("activations") {
        require_close_gradients(testing::check_op([](const auto& in) { return nn::leaky_relu(in[0], 0.2); },
                                                  {random_tensor({2, 2, 4, 4}, 20)}));
        require_close_gradients(
            testing::check_op([](const auto& in) { return nn::relu(in[0]); }, {random_tensor({2, 2, 4, 4}, 21)}));
        require_close_gradients(
            testing::check_op([](const auto& in) { return nn::tanh_unit(in[0]); }, {random_tensor({2, 2, 4, 4}, 22)}));
    }
    SUBCASE("dropout with a fixed mask") {
        require_close_gradients(testing::check_op(
            [](const auto& in) {
                fsd::Rng rng = fsd::make_rng(5);
                return nn::dropout(in[0], 0.5, rng);
            },
            {random_tensor({2, 2, 4, 4}, 23)}));
    }
    SUBCASE("structural ops") {
        require_close_gradients(testing::check_op([](const auto& in) { return nn::concat_channels(in[0], in[1]); },
                                                  {random_tensor({2, 2, 3, 3}, 24), random_tensor({2, 1, 3, 3}, 25)}));
        require_close_gradients(testing::check_op([](const auto& in) { return nn::concat_batch(in[0], in[1]); },
                                                  {random_tensor({1, 2, 3, 3}, 26), random_tensor({2, 2, 3, 3}, 27)}));
        require_close_gradients(testing::check_op([](const auto& in) { return nn::slice_batch(in[0], 1, 3); },
                                                  {random_tensor({4, 2, 3, 3}, 28)}));
        require_close_gradients(testing::check_op([](const auto& in) { return nn::global_avg_pool(in[0]); },
                                                  {random_tensor({2, 3, 4, 4}, 29)}));
    }
    SUBCASE("linear and row normalisation") {
        require_close_gradients(
            testing::check_op([](const auto& in) { return nn::linear(in[0], in[1], in[2]); },
                              {random_tensor({3, 5}, 30), random_tensor({4, 5}, 31), random_tensor({4}, 32)}));
        require_close_gradients(testing::check_op([](const auto& in) { return nn::l2_normalize_rows(in[0]); },
                                                  {random_tensor({3, 6}, 33)}));
    }
    SUBCASE("weighted_sum of external scalars") {
        require_close_gradients(testing::check_op(
            [](const auto& in) {
                double s0 = 0, s1 = 0;
                std::vector<double> g0(in[0].numel()), g1(in[0].numel());
                for (int64_t i = 0; i < in[0].numel(); ++i) {
                    const double v = in[0].data()[i];
                    s0 += v * v;
                    g0[i] = 2 * v;
                    s1 += 3 * v;
                    g1[i] = 3;
                }
                return nn::weighted_sum({nn::external_scalar(s0, {in[0]}, {g0}), nn::external_scalar(s1, {in[0]}, {g1})},
                                        {0.5, 2.0});
            },
            {random_tensor({2, 3}, 34)}));
    }
}

TEST_CASE("gradients accumulate across uses of a shared input") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    const Tensor y = nn::concat_batch(x, x);
    nn::external_scalar(0.0, {y}, {{1, 1, 1, 1}}).backward();
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("no graph under NoGradGuard") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    {
        nn::NoGradGuard guard;
        CHECK_FALSE(nn::relu(x).requires_grad());
    }
    CHECK(nn::relu(x).requires_grad());
}

TEST_CASE("instance norm output has zero mean and unit variance per plane") {
    const Tensor y = nn::instance_norm(random_tensor({2, 3, 8, 8}, 40, false));
    for (int64_t p = 0; p < 6; ++p) {
        double m = 0, v = 0;
        for (int64_t i = 0; i < 64; ++i) m += y.data()[p * 64 + i];
        m /= 64;
        for (int64_t i = 0; i < 64; ++i) v += (y.data()[p * 64 + i] - m) * (y.data()[p * 64 + i] - m);
        v /= 64;
        CHECK(std::abs(m) < 1e-12);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("shape errors") {
    CHECK_THROWS_AS(nn::concat_channels(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3})), fsd::Error);
    CHECK_THROWS_AS(Tensor::zeros({2}).backward(), fsd::Error);
}
