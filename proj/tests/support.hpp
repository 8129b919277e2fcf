#pragma once

// Shared helpers for the unit tests: deterministic inputs, central-difference
// gradient checks and a brute-force SSIM reference.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fsdenoise/image.hpp"
#include "fsdenoise/random.hpp"
#include "fsdenoise/tensor.hpp"

namespace testing {

namespace fs = std::filesystem;

// 32-bit LCG in [0, 1); the same sequence is easy to produce in any language.
inline std::vector<double> lcg(uint32_t seed, size_t n) {
    std::vector<double> out(n);
    uint32_t v = seed;
    for (auto& x : out) {
        v = 1664525u * v + 1013904223u;
        x = static_cast<double>(v) / 4294967296.0;
    }
    return out;
}

inline std::vector<double> uniform_values(size_t n, uint64_t seed, double lo = 0.0, double hi = 1.0) {
    fsd::Rng rng = fsd::make_rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) {
        x = fsd::uniform(rng, lo, hi);
    }
    return v;
}

inline fsd::Image random_image(int64_t rows, int64_t cols, uint64_t seed) {
    return fsd::Image(rows, cols, uniform_values(static_cast<size_t>(rows * cols), seed));
}

struct GradCheck {
    size_t total = 0;
    size_t passed = 0;
    double worst = 0.0;

    double fraction() const { return total == 0 ? 1.0 : static_cast<double>(passed) / static_cast<double>(total); }
};

inline double relative_error(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
    return std::abs(analytic - numeric) / scale;
}

// Central differences of f around x compared with `analytic`.
inline GradCheck check_gradient(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                const std::vector<double>& analytic, double step = 1e-4, double tol = 1e-3) {
    GradCheck r;
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double up = f(x);
        x[i] = orig - step;
        const double down = f(x);
        x[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double err = relative_error(analytic[i], numeric);
        r.worst = std::max(r.worst, err);
        ++r.total;
        if (err < tol) {
            ++r.passed;
        }
    }
    return r;
}

// Gradient check of a tensor op: loss = sum(op(inputs) * r) for a fixed random r.
inline GradCheck check_op(const std::function<fsd::nn::Tensor(const std::vector<fsd::nn::Tensor>&)>& op,
                          std::vector<fsd::nn::Tensor> inputs, uint64_t seed = 99) {
    using fsd::nn::Tensor;
    const Tensor out0 = op(inputs);
    const std::vector<double> r = uniform_values(static_cast<size_t>(out0.numel()), seed, -1.0, 1.0);
    auto contract = [&](const Tensor& t) {
        double s = 0.0;
        for (int64_t i = 0; i < t.numel(); ++i) {
            s += t.data()[static_cast<size_t>(i)] * r[static_cast<size_t>(i)];
        }
        return s;
    };
    const Tensor loss = fsd::nn::external_scalar(contract(out0), {out0}, {r});
    loss.backward();

    GradCheck total;
    for (auto& in : inputs) {
        if (!in.requires_grad()) {
            continue;
        }
        const std::vector<double> analytic(in.grad().begin(), in.grad().end());
        std::vector<double> x0(in.data().begin(), in.data().end());
        auto f = [&](const std::vector<double>& x) {
            fsd::nn::NoGradGuard guard;
            std::copy(x.begin(), x.end(), in.mutable_data().begin());
            const double v = contract(op(inputs));
            std::copy(x0.begin(), x0.end(), in.mutable_data().begin());
            return v;
        };
        const GradCheck g = check_gradient(f, x0, analytic);
        total.total += g.total;
        total.passed += g.passed;
        total.worst = std::max(total.worst, g.worst);
    }
    return total;
}

// Direct evaluation of l * c * s with C3 = C2 / 2 over every fully contained
// Gaussian window (population statistics), averaged.
inline double brute_force_ssim(const fsd::Image& x, const fsd::Image& y, int win = 11, double sigma = 1.5,
                               double range = 1.0) {
    std::vector<double> g1(static_cast<size_t>(win));
    double sum = 0.0;
    const int half = win / 2;
    for (int i = 0; i < win; ++i) {
        g1[static_cast<size_t>(i)] = std::exp(-0.5 * (i - half) * (i - half) / (sigma * sigma));
        sum += g1[static_cast<size_t>(i)];
    }
    for (auto& v : g1) {
        v /= sum;
    }
    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);
    const double c3 = c2 / 2.0;
    double total = 0.0;
    int64_t count = 0;
    for (int64_t r0 = 0; r0 + win <= x.rows; ++r0) {
        for (int64_t c0 = 0; c0 + win <= x.cols; ++c0) {
            double mx = 0, my = 0;
            for (int i = 0; i < win; ++i) {
                for (int j = 0; j < win; ++j) {
                    const double w = g1[static_cast<size_t>(i)] * g1[static_cast<size_t>(j)];
                    mx += w * x(r0 + i, c0 + j);
                    my += w * y(r0 + i, c0 + j);
                }
            }
            double vx = 0, vy = 0, cxy = 0;
            for (int i = 0; i < win; ++i) {
                for (int j = 0; j < win; ++j) {
                    const double w = g1[static_cast<size_t>(i)] * g1[static_cast<size_t>(j)];
                    const double dx = x(r0 + i, c0 + j) - mx, dy = y(r0 + i, c0 + j) - my;
                    vx += w * dx * dx;
                    vy += w * dy * dy;
                    cxy += w * dx * dy;
                }
            }
            const double sx = std::sqrt(vx), sy = std::sqrt(vy);
            const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
            const double c = (2 * sx * sy + c2) / (vx + vy + c2);
            const double s = (cxy + c3) / (sx * sy + c3);
            total += l * c * s;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// Fresh empty directory under the system temp dir.
inline fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("fsdenoise_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace testing
