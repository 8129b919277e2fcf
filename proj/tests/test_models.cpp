#include <doctest.h>

#include <cmath>
#include <set>

#include "fsdenoise/error.hpp"
#include "fsdenoise/models.hpp"
#include "support.hpp"

using fsd::nn::Tensor;
namespace M = fsd::models;

namespace {

// Closed-form parameter count of the U-Net: 4x4 kernels everywhere, biases
// only on the outermost and innermost down convs and the outermost up conv.
int64_t unet_parameter_oracle(const M::GeneratorConfig& c) {
    const int n = c.n_down;
    std::vector<int64_t> ch(n);
    for (int i = 0; i < n; ++i) ch[i] = std::min<int64_t>(int64_t(c.base_channels) << i, c.max_channels);
    const int64_t skip = c.use_skips ? 2 : 1;
    int64_t total = 16 * c.in_channels * ch[0] + ch[0];
    for (int i = 1; i < n - 1; ++i) total += 16 * ch[i - 1] * ch[i];
    total += 16 * ch[n - 2] * ch[n - 1] + ch[n - 1];
    total += 16 * ch[n - 1] * ch[n - 2];
    for (int i = n - 2; i >= 1; --i) total += 16 * skip * ch[i] * ch[i - 1];
    total += 16 * skip * ch[0] * c.out_channels + c.out_channels;
    return total;
}

M::GeneratorConfig small_generator() {
    M::GeneratorConfig g;
    g.n_down = g.n_up = 5;
    g.base_channels = 8;
    g.max_channels = 32;
    g.input_size = 32;
    return g;
}

} // namespace

TEST_CASE("default U-Net traces seven halvings") {
    fsd::Rng rng = fsd::make_rng(0);
    const M::Generator g(M::GeneratorConfig{}, rng);
    CHECK(g.trace_encoder(256) == std::vector<int64_t>{256, 128, 64, 32, 16, 8, 4, 2});
    CHECK(g.parameter_count() == unet_parameter_oracle(M::GeneratorConfig{}));
    CHECK(g.parameter_count() == 41815617);
}

TEST_CASE("parameter count without skips") {
    M::GeneratorConfig c;
    c.use_skips = false;
    fsd::Rng rng = fsd::make_rng(0);
    const M::Generator g(c, rng);
    CHECK(g.parameter_count() == unet_parameter_oracle(c));
    CHECK(g.parameter_count() == 30673473);
}

TEST_CASE("small generator forward shapes and range") {
    fsd::Rng rng = fsd::make_rng(1);
    const M::Generator g(small_generator(), rng);
    const Tensor x = Tensor::from({2, 1, 32, 32}, testing::uniform_values(2 * 32 * 32, 2));
    fsd::Rng drop = fsd::make_rng(3);
    const auto out = g.forward(x, M::Mode::Train, &drop);
    CHECK(out.image.shape() == x.shape());
    CHECK(out.bottleneck.shape() == fsd::nn::Shape{2, 32, 1, 1});
    REQUIRE(out.encoder_shapes.size() == 5);
    CHECK(out.encoder_shapes[0] == fsd::nn::Shape{2, 8, 16, 16});
    for (double v : out.image.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("eval mode is deterministic; train mode uses dropout") {
    fsd::Rng rng = fsd::make_rng(1);
    const M::Generator g(small_generator(), rng);
    const Tensor x = Tensor::from({1, 1, 32, 32}, testing::uniform_values(32 * 32, 4));
    const auto a = g.forward(x, M::Mode::Eval).image;
    const auto b = g.forward(x, M::Mode::Eval).image;
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    fsd::Rng r1 = fsd::make_rng(10), r2 = fsd::make_rng(11);
    const auto t1 = g.forward(x, M::Mode::Train, &r1).image;
    const auto t2 = g.forward(x, M::Mode::Train, &r2).image;
    CHECK_FALSE(std::equal(t1.data().begin(), t1.data().end(), t2.data().begin()));
    CHECK_THROWS_AS(g.forward(x, M::Mode::Train, nullptr), fsd::Error);
}

TEST_CASE("generator rejects inputs of the wrong size") {
    fsd::Rng rng = fsd::make_rng(1);
    const M::Generator g(small_generator(), rng);
    CHECK_THROWS_AS(g.forward(Tensor::zeros({1, 1, 24, 24}), M::Mode::Eval), fsd::Error);
    M::GeneratorConfig bad = small_generator();
    bad.input_size = 48;
    CHECK_THROWS_AS(bad.validate(), fsd::Error);
}

TEST_CASE("discriminator stride arithmetic") {
    fsd::Rng rng = fsd::make_rng(2);
    const M::Discriminator d(M::DiscriminatorConfig{}, rng);
    CHECK(d.receptive_field() == 70);
    CHECK(d.total_stride() == 8);
    CHECK(d.effective_padding() == 23);
    CHECK(d.output_size(256) == 30);
    CHECK(d.parameter_count() == 2762817);
    const Tensor x = Tensor::zeros({1, 1, 256, 256});
    const Tensor logits = d.forward(x, x);
    CHECK(logits.shape() == fsd::nn::Shape{1, 1, 30, 30});
}

TEST_CASE("discriminator output shifts with an 8-pixel input shift") {
    M::DiscriminatorConfig cfg;
    cfg.base_channels = 8;
    fsd::Rng rng = fsd::make_rng(3);
    const M::Discriminator d(cfg, rng);
    const int64_t n = 256;
    auto blob = [&](int64_t cy, int64_t cx) {
        std::vector<double> v(n * n, 0.0);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < n; ++c)
                v[r * n + c] = std::exp(-((r - cy) * (r - cy) + (c - cx) * (c - cx)) / 18.0);
        return Tensor::from({1, 1, n, n}, v);
    };
    const Tensor a = blob(120, 120), b = blob(128, 128);
    const Tensor la = d.forward(a, a), lb = d.forward(b, b);
    const int64_t s = d.output_size(n);
    // Instance norm sees the same per-channel statistics for both inputs: the
    // blob response is translated inside a constant background and never
    // reaches the zero-padding bands. Cell r covers input rows [8r-23, 8r+46].
    int64_t checked = 0;
    for (int64_t r = 9; r <= 18; ++r)
        for (int64_t c = 9; c <= 18; ++c) {
            CHECK(std::abs(la.data()[r * s + c] - lb.data()[(r + 1) * s + (c + 1)]) < 1e-9);
            ++checked;
        }
    CHECK(checked > 0);
}

TEST_CASE("projection head rows are unit norm") {
    M::ProjectionHeadConfig cfg{32, 16, 8};
    fsd::Rng rng = fsd::make_rng(4);
    const M::ProjectionHead head(cfg, rng);
    const Tensor feats = Tensor::from({6, 32, 1, 1}, testing::uniform_values(6 * 32, 5, -2, 2));
    const Tensor z = head.forward(feats);
    REQUIRE(z.shape() == fsd::nn::Shape{6, 8});
    for (int r = 0; r < 6; ++r) {
        double n = 0;
        for (int k = 0; k < 8; ++k) n += z.data()[r * 8 + k] * z.data()[r * 8 + k];
        CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS(head.forward(Tensor::zeros({2, 31})), fsd::Error);
}

TEST_CASE("initialisation statistics") {
    fsd::Rng rng = fsd::make_rng(7);
    const M::Generator g(M::GeneratorConfig{}, rng);
    for (const auto& p : g.parameters()) {
        if (p.name.find("weight") == std::string::npos || p.tensor.numel() < 100000) continue;
        double m = 0, v = 0;
        for (double x : p.tensor.data()) m += x;
        m /= p.tensor.numel();
        for (double x : p.tensor.data()) v += (x - m) * (x - m);
        v /= p.tensor.numel();
        CHECK(std::abs(m) < 1e-3);
        CHECK(std::sqrt(v) == doctest::Approx(M::kInitStddev).epsilon(0.02));
    }
    for (const auto& p : g.parameters()) {
        if (p.name.find("bias") != std::string::npos) {
            for (double x : p.tensor.data()) CHECK(x == 0.0);
        }
    }
}

TEST_CASE("parameter names are unique and hierarchical") {
    fsd::Rng rng = fsd::make_rng(0);
    const M::Generator g(small_generator(), rng);
    std::set<std::string> names;
    for (const auto& p : g.parameters()) {
        CHECK(p.name.rfind("generator.block", 0) == 0);
        CHECK(names.insert(p.name).second);
    }
}
