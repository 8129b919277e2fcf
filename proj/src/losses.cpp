#include "fsdenoise/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fsdenoise/error.hpp"

namespace fsd::losses {

namespace {

void check_same_size(std::span<const double> a, std::span<const double> b, const char* what) {
    if (a.size() != b.size()) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + std::to_string(a.size()) + " vs " +
                                                  std::to_string(b.size()) + " elements");
    }
}

void check_same_shape(const ImageBatchView& x, const ImageBatchView& y, const char* what) {
    if (x.batch != y.batch || x.height != y.height || x.width != y.width ||
        x.data.size() != static_cast<size_t>(x.batch * x.plane()) || y.data.size() != x.data.size()) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": image batch shapes differ");
    }
}

// log(1 + exp(v)) without overflow.
double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

double sigmoid(double v) {
    if (v >= 0.0) {
        return 1.0 / (1.0 + std::exp(-v));
    }
    const double e = std::exp(v);
    return e / (1.0 + e);
}

double mean_softplus(std::span<const double> v, double sign) {
    double acc = 0.0;
    for (double x : v) {
        acc += softplus(sign * x);
    }
    return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

// Separable kernel used for SSIM local statistics: weight(r, c) = rows[r] * cols[c].
struct SeparableKernel {
    std::vector<double> rows;
    std::vector<double> cols;
};

SeparableKernel make_kernel(const SSIMParams& p, int64_t height, int64_t width) {
    if (p.mode == SsimWindow::Global) {
        return {std::vector<double>(static_cast<size_t>(height), 1.0 / static_cast<double>(height)),
                std::vector<double>(static_cast<size_t>(width), 1.0 / static_cast<double>(width))};
    }
    if (p.window_size > height || p.window_size > width) {
        throw Error(ErrorCode::WindowTooLarge, "SSIM window " + std::to_string(p.window_size) + " exceeds image " +
                                                   std::to_string(height) + "x" + std::to_string(width));
    }
    std::vector<double> g(static_cast<size_t>(p.window_size));
    const int half = p.window_size / 2;
    double sum = 0.0;
    for (int i = 0; i < p.window_size; ++i) {
        const double d = i - half;
        g[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * p.sigma * p.sigma));
        sum += g[static_cast<size_t>(i)];
    }
    for (double& v : g) {
        v /= sum;
    }
    return {g, g};
}

// Valid-mode separable correlation: out[r][c] = sum_ij k.rows[i] k.cols[j] in[r+i][c+j].
std::vector<double> filter_valid(const double* in, int64_t h, int64_t w, const SeparableKernel& k) {
    const auto kh = static_cast<int64_t>(k.rows.size()), kw = static_cast<int64_t>(k.cols.size());
    const int64_t oh = h - kh + 1, ow = w - kw + 1;
    std::vector<double> tmp(static_cast<size_t>(h * ow), 0.0);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int64_t j = 0; j < kw; ++j) {
                acc += k.cols[static_cast<size_t>(j)] * in[r * w + c + j];
            }
            tmp[static_cast<size_t>(r * ow + c)] = acc;
        }
    }
    std::vector<double> out(static_cast<size_t>(oh * ow), 0.0);
    for (int64_t r = 0; r < oh; ++r) {
        for (int64_t i = 0; i < kh; ++i) {
            const double wi = k.rows[static_cast<size_t>(i)];
            const double* src = tmp.data() + (r + i) * ow;
            double* dst = out.data() + r * ow;
            for (int64_t c = 0; c < ow; ++c) {
                dst[c] += wi * src[c];
            }
        }
    }
    return out;
}

// Adjoint of filter_valid: scatters an (h-kh+1) x (w-kw+1) map back to h x w.
std::vector<double> filter_adjoint(const std::vector<double>& in, int64_t h, int64_t w, const SeparableKernel& k) {
    const auto kh = static_cast<int64_t>(k.rows.size()), kw = static_cast<int64_t>(k.cols.size());
    const int64_t oh = h - kh + 1, ow = w - kw + 1;
    std::vector<double> tmp(static_cast<size_t>(h * ow), 0.0);
    for (int64_t r = 0; r < oh; ++r) {
        for (int64_t i = 0; i < kh; ++i) {
            const double wi = k.rows[static_cast<size_t>(i)];
            for (int64_t c = 0; c < ow; ++c) {
                tmp[static_cast<size_t>((r + i) * ow + c)] += wi * in[static_cast<size_t>(r * ow + c)];
            }
        }
    }
    std::vector<double> out(static_cast<size_t>(h * w), 0.0);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < ow; ++c) {
            const double v = tmp[static_cast<size_t>(r * ow + c)];
            for (int64_t j = 0; j < kw; ++j) {
                out[static_cast<size_t>(r * w + c + j)] += k.cols[static_cast<size_t>(j)] * v;
            }
        }
    }
    return out;
}

// Mean SSIM of one image pair; optionally the gradient with respect to x.
double ssim_single(const double* x, const double* y, int64_t h, int64_t w, const SSIMParams& p,
                   const SeparableKernel& k, double* grad_x) {
    const int64_t n = h * w;
    std::vector<double> xx(static_cast<size_t>(n)), yy(static_cast<size_t>(n)), xy(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        xx[static_cast<size_t>(i)] = x[i] * x[i];
        yy[static_cast<size_t>(i)] = y[i] * y[i];
        xy[static_cast<size_t>(i)] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k);
    const auto my = filter_valid(y, h, w, k);
    const auto exx = filter_valid(xx.data(), h, w, k);
    const auto eyy = filter_valid(yy.data(), h, w, k);
    const auto exy = filter_valid(xy.data(), h, w, k);
    const double c1 = p.c1(), c2 = p.c2();
    const size_t positions = mx.size();

    std::vector<double> da, db, dc;
    if (grad_x != nullptr) {
        da.resize(positions);
        db.resize(positions);
        dc.resize(positions);
    }
    double total = 0.0;
    for (size_t i = 0; i < positions; ++i) {
        const double ux = mx[i], uy = my[i];
        const double vx = exx[i] - ux * ux, vy = eyy[i] - uy * uy, cxy = exy[i] - ux * uy;
        const double a1 = 2.0 * ux * uy + c1, a2 = 2.0 * cxy + c2;
        const double b1 = ux * ux + uy * uy + c1, b2 = vx + vy + c2;
        const double s = (a1 * a2) / (b1 * b2);
        total += s;
        if (grad_x != nullptr) {
            // S as a function of (mu_x, E[x^2], E[xy]) with mu_y, E[y^2] fixed.
            da[i] = s * (2.0 * uy / a1 - 2.0 * ux / b1 - 2.0 * uy / a2 + 2.0 * ux / b2);
            db[i] = -s / b2;
            dc[i] = 2.0 * s / a2;
        }
    }
    const double inv = 1.0 / static_cast<double>(positions);
    if (grad_x != nullptr) {
        const auto ga = filter_adjoint(da, h, w, k);
        const auto gb = filter_adjoint(db, h, w, k);
        const auto gc = filter_adjoint(dc, h, w, k);
        for (int64_t i = 0; i < n; ++i) {
            const auto u = static_cast<size_t>(i);
            grad_x[i] = inv * (ga[u] + 2.0 * x[i] * gb[u] + y[i] * gc[u]);
        }
    }
    return total * inv;
}

double ssim_batch(const ImageBatchView& x, const ImageBatchView& y, const SSIMParams& params, std::vector<double>* grad) {
    params.validate();
    check_same_shape(x, y, "ssim");
    const SeparableKernel k = make_kernel(params, x.height, x.width);
    if (grad != nullptr) {
        grad->assign(x.data.size(), 0.0);
    }
    double total = 0.0;
    const double inv_b = 1.0 / static_cast<double>(x.batch);
    for (int64_t b = 0; b < x.batch; ++b) {
        const int64_t off = b * x.plane();
        double* g = grad != nullptr ? grad->data() + off : nullptr;
        total += ssim_single(x.data.data() + off, y.data.data() + off, x.height, x.width, params, k, g);
        if (g != nullptr) {
            std::for_each(g, g + x.plane(), [inv_b](double& v) { v *= inv_b; });
        }
    }
    return total * inv_b;
}

double tv_batch(const ImageBatchView& y, std::vector<double>* grad) {
    if (y.data.size() != static_cast<size_t>(y.batch * y.plane()) || y.batch <= 0) {
        throw Error(ErrorCode::ShapeMismatch, "tv_loss: data size does not match batch shape");
    }
    if (grad != nullptr) {
        grad->assign(y.data.size(), 0.0);
    }
    const double scale = 1.0 / (static_cast<double>(y.plane()) * static_cast<double>(y.batch));
    const auto sgn = [](double v) { return (v > 0.0) - (v < 0.0); };
    double total = 0.0;
    for (int64_t b = 0; b < y.batch; ++b) {
        const double* img = y.data.data() + b * y.plane();
        double* g = grad != nullptr ? grad->data() + b * y.plane() : nullptr;
        for (int64_t r = 0; r < y.height; ++r) {
            for (int64_t c = 0; c < y.width; ++c) {
                const int64_t i = r * y.width + c;
                if (r + 1 < y.height) {
                    const double d = img[i + y.width] - img[i];
                    total += std::abs(d);
                    if (g != nullptr) {
                        g[i + y.width] += scale * sgn(d);
                        g[i] -= scale * sgn(d);
                    }
                }
                if (c + 1 < y.width) {
                    const double d = img[i + 1] - img[i];
                    total += std::abs(d);
                    if (g != nullptr) {
                        g[i + 1] += scale * sgn(d);
                        g[i] -= scale * sgn(d);
                    }
                }
            }
        }
    }
    return total * scale;
}

void check_pairing(int64_t rows, std::span<const int64_t> pair_index) {
    if (rows < 4) {
        throw Error(ErrorCode::BatchTooSmall, "NT-Xent needs at least 4 embeddings, got " + std::to_string(rows));
    }
    if (static_cast<int64_t>(pair_index.size()) != rows) {
        throw Error(ErrorCode::ShapeMismatch, "pair_index length differs from embedding count");
    }
    for (int64_t i = 0; i < rows; ++i) {
        const int64_t j = pair_index[static_cast<size_t>(i)];
        if (j < 0 || j >= rows || j == i || pair_index[static_cast<size_t>(j)] != i) {
            throw Error(ErrorCode::ShapeMismatch, "pair_index is not a fixed-point-free involution at row " +
                                                      std::to_string(i));
        }
    }
}

double ntxent_impl(std::span<const double> z, int64_t rows, int64_t dim, std::span<const int64_t> pair_index,
                   double tau, std::vector<double>* grad) {
    if (!(tau > 0.0)) {
        throw Error(ErrorCode::InvalidConfig, "NT-Xent temperature must be positive");
    }
    if (static_cast<int64_t>(z.size()) != rows * dim) {
        throw Error(ErrorCode::ShapeMismatch, "embedding buffer does not match rows x dim");
    }
    check_pairing(rows, pair_index);
    const auto R = static_cast<size_t>(rows);
    const auto D = static_cast<size_t>(dim);
    std::vector<double> norms(R);
    for (size_t i = 0; i < R; ++i) {
        double sq = 0.0;
        for (size_t d = 0; d < D; ++d) {
            sq += z[i * D + d] * z[i * D + d];
        }
        norms[i] = std::sqrt(sq);
        if (std::abs(norms[i] - 1.0) > kUnitNormTolerance) {
            throw Error(ErrorCode::NonUnitNorm, "embedding row " + std::to_string(i) + " has norm " +
                                                    std::to_string(norms[i]));
        }
    }
    std::vector<double> sim(R * R);
    for (size_t i = 0; i < R; ++i) {
        for (size_t j = 0; j < R; ++j) {
            double dot = 0.0;
            for (size_t d = 0; d < D; ++d) {
                dot += z[i * D + d] * z[j * D + d];
            }
            sim[i * R + j] = dot / (norms[i] * norms[j]);
        }
    }
    // dL/dsim[i][j] from anchor i's term only.
    std::vector<double> dsim(grad != nullptr ? R * R : 0, 0.0);
    double total = 0.0;
    for (size_t i = 0; i < R; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < R; ++k) {
            if (k != i) {
                mx = std::max(mx, sim[i * R + k] / tau);
            }
        }
        double denom = 0.0;
        for (size_t k = 0; k < R; ++k) {
            if (k != i) {
                denom += std::exp(sim[i * R + k] / tau - mx);
            }
        }
        const auto pos = static_cast<size_t>(pair_index[i]);
        total += -(sim[i * R + pos] / tau - mx) + std::log(denom);
        if (grad != nullptr) {
            for (size_t k = 0; k < R; ++k) {
                if (k == i) {
                    continue;
                }
                const double soft = std::exp(sim[i * R + k] / tau - mx) / denom;
                dsim[i * R + k] = (soft - (k == pos ? 1.0 : 0.0)) / (tau * static_cast<double>(R));
            }
        }
    }
    if (grad != nullptr) {
        grad->assign(z.size(), 0.0);
        for (size_t i = 0; i < R; ++i) {
            for (size_t j = 0; j < R; ++j) {
                if (i == j) {
                    continue;
                }
                const double g = dsim[i * R + j] + dsim[j * R + i];
                const double inv_ij = 1.0 / (norms[i] * norms[j]);
                const double self_term = sim[i * R + j] / (norms[i] * norms[i]);
                for (size_t d = 0; d < D; ++d) {
                    (*grad)[i * D + d] += g * (z[j * D + d] * inv_ij - self_term * z[i * D + d]);
                }
            }
        }
    }
    return total / static_cast<double>(R);
}

} // namespace

void LossWeights::validate() const {
    const double all[] = {lambda_gan, lambda_l1, lambda_ssim, lambda_tv, lambda_cl};
    for (double v : all) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw Error(ErrorCode::InvalidConfig, "loss weights must be finite and non-negative");
        }
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw Error(ErrorCode::InvalidConfig, "temperature tau must be positive");
    }
}

void SSIMParams::validate() const {
    if (mode == SsimWindow::Gaussian && (window_size < 1 || window_size % 2 == 0 || !(sigma > 0.0))) {
        throw Error(ErrorCode::InvalidConfig, "SSIM window must be odd and sigma positive");
    }
    if (!(c1() > 0.0) || !(c2() > 0.0)) {
        throw Error(ErrorCode::InvalidConfig, "SSIM stabilising constants must be positive");
    }
}

double adversarial_loss(std::span<const double> real_logits, std::span<const double> fake_logits,
                        AdversarialSide side) {
    if (side == AdversarialSide::Generator) {
        return mean_softplus(fake_logits, -1.0);
    }
    return mean_softplus(real_logits, -1.0) + mean_softplus(fake_logits, 1.0);
}

AdversarialGrad adversarial_loss_grad(std::span<const double> real_logits, std::span<const double> fake_logits,
                                      AdversarialSide side) {
    AdversarialGrad out;
    out.value = adversarial_loss(real_logits, fake_logits, side);
    // d softplus(-v)/dv = -s(-v) = s(v) - 1 ; d softplus(v)/dv = s(v)
    const double inv_fake = 1.0 / static_cast<double>(std::max<size_t>(fake_logits.size(), 1));
    out.d_fake.resize(fake_logits.size());
    for (size_t i = 0; i < fake_logits.size(); ++i) {
        const double s = sigmoid(fake_logits[i]);
        out.d_fake[i] = (side == AdversarialSide::Generator ? s - 1.0 : s) * inv_fake;
    }
    if (side == AdversarialSide::Discriminator) {
        const double inv_real = 1.0 / static_cast<double>(std::max<size_t>(real_logits.size(), 1));
        out.d_real.resize(real_logits.size());
        for (size_t i = 0; i < real_logits.size(); ++i) {
            out.d_real[i] = (sigmoid(real_logits[i]) - 1.0) * inv_real;
        }
    }
    return out;
}

double l1_loss(std::span<const double> generated, std::span<const double> target) {
    check_same_size(generated, target, "l1_loss");
    double acc = 0.0;
    for (size_t i = 0; i < generated.size(); ++i) {
        acc += std::abs(generated[i] - target[i]);
    }
    return generated.empty() ? 0.0 : acc / static_cast<double>(generated.size());
}

ValueGrad l1_loss_grad(std::span<const double> generated, std::span<const double> target) {
    ValueGrad out;
    out.value = l1_loss(generated, target);
    out.grad.resize(generated.size());
    const double inv = 1.0 / static_cast<double>(std::max<size_t>(generated.size(), 1));
    for (size_t i = 0; i < generated.size(); ++i) {
        const double d = generated[i] - target[i];
        out.grad[i] = ((d > 0.0) - (d < 0.0)) * inv;
    }
    return out;
}

std::vector<double> gaussian_window(int window_size, double sigma) {
    SSIMParams p;
    p.window_size = window_size;
    p.sigma = sigma;
    const auto k = make_kernel(p, window_size, window_size);
    std::vector<double> w(static_cast<size_t>(window_size * window_size));
    for (int r = 0; r < window_size; ++r) {
        for (int c = 0; c < window_size; ++c) {
            w[static_cast<size_t>(r * window_size + c)] = k.rows[static_cast<size_t>(r)] * k.cols[static_cast<size_t>(c)];
        }
    }
    return w;
}

double ssim_index(const ImageBatchView& x, const ImageBatchView& y, const SSIMParams& params) {
    return ssim_batch(x, y, params, nullptr);
}

ValueGrad ssim_index_grad(const ImageBatchView& x, const ImageBatchView& y, const SSIMParams& params) {
    ValueGrad out;
    out.value = ssim_batch(x, y, params, &out.grad);
    return out;
}

double dssim_loss(const ImageBatchView& generated, const ImageBatchView& target, const SSIMParams& params) {
    return (1.0 - ssim_index(generated, target, params)) / 2.0;
}

ValueGrad dssim_loss_grad(const ImageBatchView& generated, const ImageBatchView& target, const SSIMParams& params) {
    ValueGrad out = ssim_index_grad(generated, target, params);
    out.value = (1.0 - out.value) / 2.0;
    for (double& g : out.grad) {
        g *= -0.5;
    }
    return out;
}

double tv_loss(const ImageBatchView& y) { return tv_batch(y, nullptr); }

ValueGrad tv_loss_grad(const ImageBatchView& y) {
    ValueGrad out;
    out.value = tv_batch(y, &out.grad);
    return out;
}

double ntxent_loss(std::span<const double> embeddings, int64_t rows, int64_t dim, std::span<const int64_t> pair_index,
                   double tau) {
    return ntxent_impl(embeddings, rows, dim, pair_index, tau, nullptr);
}

ValueGrad ntxent_loss_grad(std::span<const double> embeddings, int64_t rows, int64_t dim,
                           std::span<const int64_t> pair_index, double tau) {
    ValueGrad out;
    out.value = ntxent_impl(embeddings, rows, dim, pair_index, tau, &out.grad);
    return out;
}

std::vector<int64_t> halves_pairing(int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(2 * n));
    for (int64_t i = 0; i < n; ++i) {
        idx[static_cast<size_t>(i)] = i + n;
        idx[static_cast<size_t>(i + n)] = i;
    }
    return idx;
}

CompositeLoss composite_loss(const LossTerms& terms, const LossWeights& weights) {
    const std::pair<const char*, double> named[] = {
        {"L_GAN", terms.gan}, {"L_L1", terms.l1}, {"L_SSIM", terms.ssim}, {"L_TV", terms.tv}, {"L_CL", terms.cl}};
    for (const auto& [name, v] : named) {
        if (!std::isfinite(v)) {
            throw Error(ErrorCode::NonFiniteTerm, std::string(name) + " = " + std::to_string(v));
        }
    }
    CompositeLoss out;
    out.raw = terms;
    out.weighted = {weights.lambda_gan * terms.gan, weights.lambda_l1 * terms.l1, weights.lambda_ssim * terms.ssim,
                    weights.lambda_tv * terms.tv, weights.lambda_cl * terms.cl};
    out.total = out.weighted.gan + out.weighted.l1 + out.weighted.ssim + out.weighted.tv + out.weighted.cl;
    return out;
}

} // namespace fsd::losses
