#include "fsdenoise/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Dense>

#include "fsdenoise/error.hpp"

namespace fsd::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw Error(ErrorCode::ShapeMismatch, msg);
    }
}

// Unfolds src [C, H, W] into cols [C*k*k, Ho*Wo].
void im2col(const double* src, int64_t channels, int64_t h, int64_t w, const ConvGeometry& g,
            int64_t ho, int64_t wo, double* cols) {
    const int64_t k = g.kernel;
    for (int64_t c = 0; c < channels; ++c) {
        const double* plane = src + c * h * w;
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                double* row = cols + ((c * k + ki) * k + kj) * ho * wo;
                for (int64_t oh = 0; oh < ho; ++oh) {
                    const int64_t ih = oh * g.stride - g.padding + ki;
                    double* out = row + oh * wo;
                    if (ih < 0 || ih >= h) {
                        std::fill(out, out + wo, 0.0);
                        continue;
                    }
                    const double* in_row = plane + ih * w;
                    for (int64_t ow = 0; ow < wo; ++ow) {
                        const int64_t iw = ow * g.stride - g.padding + kj;
                        out[ow] = (iw >= 0 && iw < w) ? in_row[iw] : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates cols [C*k*k, Ho*Wo] into dst [C, H, W].
void col2im(const double* cols, int64_t channels, int64_t h, int64_t w, const ConvGeometry& g,
            int64_t ho, int64_t wo, double* dst) {
    const int64_t k = g.kernel;
    for (int64_t c = 0; c < channels; ++c) {
        double* plane = dst + c * h * w;
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                const double* row = cols + ((c * k + ki) * k + kj) * ho * wo;
                for (int64_t oh = 0; oh < ho; ++oh) {
                    const int64_t ih = oh * g.stride - g.padding + ki;
                    if (ih < 0 || ih >= h) {
                        continue;
                    }
                    double* out_row = plane + ih * w;
                    const double* in = row + oh * wo;
                    for (int64_t ow = 0; ow < wo; ++ow) {
                        const int64_t iw = ow * g.stride - g.padding + kj;
                        if (iw >= 0 && iw < w) {
                            out_row[iw] += in[ow];
                        }
                    }
                }
            }
        }
    }
}

thread_local bool g_grad_enabled = true;

} // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) {
        grad.assign(value.size(), 0.0);
    }
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value.assign(static_cast<size_t>(nn::numel(shape)), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    require(nn::numel(shape) == static_cast<int64_t>(values.size()),
            "value count does not match shape " + shape_string(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::item() const {
    require(node_->value.size() == 1, "item() on non-scalar tensor " + shape_string(node_->shape));
    return node_->value[0];
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
}

void Tensor::backward() const {
    require(node_->value.size() == 1, "backward() requires a scalar root");
    if (!node_->requires_grad) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(n);
        stack.pop_back();
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) {
            n->backward(*n);
        }
    }
}

Tensor make_result(Shape shape, std::vector<Tensor> inputs) {
    auto n = std::make_shared<Node>();
    n->value.assign(static_cast<size_t>(nn::numel(shape)), 0.0);
    n->shape = std::move(shape);
    for (const Tensor& in : inputs) {
        if (g_grad_enabled && in.defined() && in.requires_grad()) {
            n->requires_grad = true;
        }
    }
    if (n->requires_grad) {
        for (Tensor& in : inputs) {
            if (in.defined()) {
                n->inputs.push_back(in.node_ptr());
            }
        }
    }
    return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------

int64_t conv_output_size(int64_t input, const ConvGeometry& g) {
    return (input + 2 * g.padding - g.kernel) / g.stride + 1;
}

int64_t conv_transpose_output_size(int64_t input, const ConvGeometry& g) {
    return (input - 1) * g.stride - 2 * g.padding + g.kernel;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
    require(x.rank() == 4 && weight.rank() == 4, "conv2d expects rank-4 input and weight");
    const int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t cout = weight.dim(0), k = g.kernel;
    require(weight.dim(1) == cin && weight.dim(2) == k && weight.dim(3) == k,
            "conv2d weight " + shape_string(weight.shape()) + " incompatible with input " + shape_string(x.shape()));
    require(!bias.defined() || bias.numel() == cout, "conv2d bias size mismatch");
    const int64_t ho = conv_output_size(h, g), wo = conv_output_size(w, g);
    require(ho > 0 && wo > 0, "conv2d input " + shape_string(x.shape()) + " too small for kernel");

    Tensor out = make_result({batch, cout, ho, wo}, {x, weight, bias});
    const int64_t ckk = cin * k * k, hw = ho * wo;
    std::vector<double> cols(static_cast<size_t>(ckk * hw));
    ConstMapMatrix wmat(weight.data().data(), cout, ckk);
    for (int64_t b = 0; b < batch; ++b) {
        im2col(x.data().data() + b * cin * h * w, cin, h, w, g, ho, wo, cols.data());
        MapMatrix o(out.mutable_data().data() + b * cout * hw, cout, hw);
        o.noalias() = wmat * ConstMapMatrix(cols.data(), ckk, hw);
        if (bias.defined()) {
            for (int64_t c = 0; c < cout; ++c) {
                o.row(c).array() += bias.data()[static_cast<size_t>(c)];
            }
        }
    }

    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto wn = weight.node_ptr();
        auto bn = bias.defined() ? bias.node_ptr() : nullptr;
        out.node().backward = [=](Node& self) {
            std::vector<double> cols_buf(static_cast<size_t>(ckk * hw));
            std::vector<double> dcols(static_cast<size_t>(ckk * hw));
            ConstMapMatrix wm(wn->value.data(), cout, ckk);
            for (int64_t b = 0; b < batch; ++b) {
                ConstMapMatrix dout(self.grad.data() + b * cout * hw, cout, hw);
                if (wn->requires_grad) {
                    im2col(xn->value.data() + b * cin * h * w, cin, h, w, g, ho, wo, cols_buf.data());
                    MapMatrix dw(wn->grad_buffer().data(), cout, ckk);
                    dw.noalias() += dout * ConstMapMatrix(cols_buf.data(), ckk, hw).transpose();
                }
                if (xn->requires_grad) {
                    MapMatrix dc(dcols.data(), ckk, hw);
                    dc.noalias() = wm.transpose() * dout;
                    col2im(dcols.data(), cin, h, w, g, ho, wo, xn->grad_buffer().data() + b * cin * h * w);
                }
                if (bn && bn->requires_grad) {
                    auto& db = bn->grad_buffer();
                    for (int64_t c = 0; c < cout; ++c) {
                        db[static_cast<size_t>(c)] += dout.row(c).sum();
                    }
                }
            }
        };
    }
    return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
    require(x.rank() == 4 && weight.rank() == 4, "conv_transpose2d expects rank-4 input and weight");
    const int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t cout = weight.dim(1), k = g.kernel;
    require(weight.dim(0) == cin && weight.dim(2) == k && weight.dim(3) == k,
            "conv_transpose2d weight " + shape_string(weight.shape()) + " incompatible with input " +
                shape_string(x.shape()));
    require(!bias.defined() || bias.numel() == cout, "conv_transpose2d bias size mismatch");
    const int64_t ho = conv_transpose_output_size(h, g), wo = conv_transpose_output_size(w, g);
    // The transposed convolution is the adjoint of a convolution mapping
    // [cout, ho, wo] -> [cin, h, w]; that forward map must land on (h, w).
    require(conv_output_size(ho, g) == h && conv_output_size(wo, g) == w, "conv_transpose2d geometry mismatch");

    Tensor out = make_result({batch, cout, ho, wo}, {x, weight, bias});
    const int64_t ckk = cout * k * k, hw = h * w, ohw = ho * wo;
    std::vector<double> cols(static_cast<size_t>(ckk * hw));
    ConstMapMatrix wmat(weight.data().data(), cin, ckk);
    for (int64_t b = 0; b < batch; ++b) {
        MapMatrix c(cols.data(), ckk, hw);
        c.noalias() = wmat.transpose() * ConstMapMatrix(x.data().data() + b * cin * hw, cin, hw);
        double* o = out.mutable_data().data() + b * cout * ohw;
        col2im(cols.data(), cout, ho, wo, g, h, w, o);
        if (bias.defined()) {
            for (int64_t ch = 0; ch < cout; ++ch) {
                const double bv = bias.data()[static_cast<size_t>(ch)];
                std::for_each(o + ch * ohw, o + (ch + 1) * ohw, [bv](double& v) { v += bv; });
            }
        }
    }

    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto wn = weight.node_ptr();
        auto bn = bias.defined() ? bias.node_ptr() : nullptr;
        out.node().backward = [=](Node& self) {
            std::vector<double> dcols(static_cast<size_t>(ckk * hw));
            ConstMapMatrix wm(wn->value.data(), cin, ckk);
            for (int64_t b = 0; b < batch; ++b) {
                const double* dout = self.grad.data() + b * cout * ohw;
                im2col(dout, cout, ho, wo, g, h, w, dcols.data());
                ConstMapMatrix dc(dcols.data(), ckk, hw);
                if (xn->requires_grad) {
                    MapMatrix dx(xn->grad_buffer().data() + b * cin * hw, cin, hw);
                    dx.noalias() += wm * dc;
                }
                if (wn->requires_grad) {
                    MapMatrix dw(wn->grad_buffer().data(), cin, ckk);
                    dw.noalias() += ConstMapMatrix(xn->value.data() + b * cin * hw, cin, hw) * dc.transpose();
                }
                if (bn && bn->requires_grad) {
                    auto& db = bn->grad_buffer();
                    for (int64_t ch = 0; ch < cout; ++ch) {
                        db[static_cast<size_t>(ch)] += std::accumulate(dout + ch * ohw, dout + (ch + 1) * ohw, 0.0);
                    }
                }
            }
        };
    }
    return out;
}

Tensor instance_norm(const Tensor& x, double eps) {
    require(x.rank() == 4, "instance_norm expects rank-4 input");
    const int64_t planes = x.dim(0) * x.dim(1), n = x.dim(2) * x.dim(3);
    Tensor out = make_result(x.shape(), {x});
    std::vector<double> inv_std(static_cast<size_t>(planes));
    for (int64_t p = 0; p < planes; ++p) {
        const double* in = x.data().data() + p * n;
        double* o = out.mutable_data().data() + p * n;
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            mean += in[i];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            var += (in[i] - mean) * (in[i] - mean);
        }
        var /= static_cast<double>(n);
        const double s = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(p)] = s;
        for (int64_t i = 0; i < n; ++i) {
            o[i] = (in[i] - mean) * s;
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr().get();
        out.node().backward = [=, inv_std = std::move(inv_std)](Node& self) {
            auto& dx = xn->grad_buffer();
            for (int64_t p = 0; p < planes; ++p) {
                const double* dy = self.grad.data() + p * n;
                const double* y = on->value.data() + p * n;
                double mean_dy = 0.0, mean_dy_y = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    mean_dy += dy[i];
                    mean_dy_y += dy[i] * y[i];
                }
                mean_dy /= static_cast<double>(n);
                mean_dy_y /= static_cast<double>(n);
                const double s = inv_std[static_cast<size_t>(p)];
                for (int64_t i = 0; i < n; ++i) {
                    dx[static_cast<size_t>(p * n + i)] += s * (dy[i] - mean_dy - y[i] * mean_dy_y);
                }
            }
        };
    }
    return out;
}

namespace {

// Elementwise op whose derivative is expressible from input and output values.
template <typename Forward, typename Derivative>
Tensor elementwise(const Tensor& x, Forward f, Derivative df) {
    Tensor out = make_result(x.shape(), {x});
    const auto in = x.data();
    auto o = out.mutable_data();
    for (size_t i = 0; i < in.size(); ++i) {
        o[i] = f(in[i]);
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr().get();
        out.node().backward = [xn, on, df](Node& self) {
            auto& dx = xn->grad_buffer();
            for (size_t i = 0; i < dx.size(); ++i) {
                dx[i] += self.grad[i] * df(xn->value[i], on->value[i]);
            }
        };
    }
    return out;
}

} // namespace

Tensor leaky_relu(const Tensor& x, double slope) {
    return elementwise(
        x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor relu(const Tensor& x) {
    return elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh_unit(const Tensor& x) {
    // y = (tanh + 1)/2  =>  dy/dx = (1 - tanh^2)/2 = 2 y (1 - y)
    return elementwise(
        x, [](double v) { return 0.5 * (std::tanh(v) + 1.0); }, [](double, double y) { return 2.0 * y * (1.0 - y); });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) {
        return x;
    }
    const double keep = 1.0 - rate;
    std::vector<double> mask(static_cast<size_t>(x.numel()));
    for (double& m : mask) {
        m = bernoulli(rng, keep) ? 1.0 / keep : 0.0;
    }
    Tensor out = make_result(x.shape(), {x});
    auto o = out.mutable_data();
    for (size_t i = 0; i < mask.size(); ++i) {
        o[i] = x.data()[i] * mask[i];
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        out.node().backward = [xn, mask = std::move(mask)](Node& self) {
            auto& dx = xn->grad_buffer();
            for (size_t i = 0; i < dx.size(); ++i) {
                dx[i] += self.grad[i] * mask[i];
            }
        };
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const int64_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor out = make_result({batch, ca + cb, a.dim(2), a.dim(3)}, {a, b});
    auto o = out.mutable_data();
    for (int64_t n = 0; n < batch; ++n) {
        std::copy_n(a.data().data() + n * ca * hw, ca * hw, o.data() + n * (ca + cb) * hw);
        std::copy_n(b.data().data() + n * cb * hw, cb * hw, o.data() + n * (ca + cb) * hw + ca * hw);
    }
    if (out.requires_grad()) {
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        out.node().backward = [=](Node& self) {
            for (int64_t n = 0; n < batch; ++n) {
                const double* g = self.grad.data() + n * (ca + cb) * hw;
                if (an->requires_grad) {
                    double* d = an->grad_buffer().data() + n * ca * hw;
                    for (int64_t i = 0; i < ca * hw; ++i) {
                        d[i] += g[i];
                    }
                }
                if (bn->requires_grad) {
                    double* d = bn->grad_buffer().data() + n * cb * hw;
                    for (int64_t i = 0; i < cb * hw; ++i) {
                        d[i] += g[ca * hw + i];
                    }
                }
            }
        };
    }
    return out;
}

Tensor slice_batch(const Tensor& x, int64_t begin, int64_t end) {
    require(x.rank() >= 1 && 0 <= begin && begin < end && end <= x.dim(0), "slice_batch range out of bounds");
    Shape shape = x.shape();
    shape[0] = end - begin;
    const int64_t stride = x.numel() / x.dim(0);
    Tensor out = make_result(shape, {x});
    std::copy_n(x.data().data() + begin * stride, (end - begin) * stride, out.mutable_data().data());
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        out.node().backward = [=](Node& self) {
            double* d = xn->grad_buffer().data() + begin * stride;
            for (int64_t i = 0; i < (end - begin) * stride; ++i) {
                d[i] += self.grad[static_cast<size_t>(i)];
            }
        };
    }
    return out;
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
    require(a.rank() == b.rank() && std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1),
            "concat_batch shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    Tensor out = make_result(shape, {a, b});
    std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
    std::copy(b.data().begin(), b.data().end(), out.mutable_data().begin() + a.numel());
    if (out.requires_grad()) {
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        const auto na = static_cast<size_t>(a.numel());
        out.node().backward = [=](Node& self) {
            if (an->requires_grad) {
                auto& d = an->grad_buffer();
                for (size_t i = 0; i < d.size(); ++i) {
                    d[i] += self.grad[i];
                }
            }
            if (bn->requires_grad) {
                auto& d = bn->grad_buffer();
                for (size_t i = 0; i < d.size(); ++i) {
                    d[i] += self.grad[na + i];
                }
            }
        };
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() == 4, "global_avg_pool expects rank-4 input");
    const int64_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out = make_result({x.dim(0), x.dim(1)}, {x});
    for (int64_t p = 0; p < planes; ++p) {
        const double* in = x.data().data() + p * hw;
        out.mutable_data()[static_cast<size_t>(p)] = std::accumulate(in, in + hw, 0.0) / static_cast<double>(hw);
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        out.node().backward = [=](Node& self) {
            auto& d = xn->grad_buffer();
            for (int64_t p = 0; p < planes; ++p) {
                const double g = self.grad[static_cast<size_t>(p)] / static_cast<double>(hw);
                for (int64_t i = 0; i < hw; ++i) {
                    d[static_cast<size_t>(p * hw + i)] += g;
                }
            }
        };
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(x.rank() == 2 && weight.rank() == 2 && weight.dim(1) == x.dim(1),
            "linear shape mismatch " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
    const int64_t batch = x.dim(0), in = x.dim(1), outd = weight.dim(0);
    Tensor out = make_result({batch, outd}, {x, weight, bias});
    MapMatrix o(out.mutable_data().data(), batch, outd);
    o.noalias() = ConstMapMatrix(x.data().data(), batch, in) * ConstMapMatrix(weight.data().data(), outd, in).transpose();
    if (bias.defined()) {
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t j = 0; j < outd; ++j) {
                o(b, j) += bias.data()[static_cast<size_t>(j)];
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto wn = weight.node_ptr();
        auto bn = bias.defined() ? bias.node_ptr() : nullptr;
        out.node().backward = [=](Node& self) {
            ConstMapMatrix dout(self.grad.data(), batch, outd);
            if (xn->requires_grad) {
                MapMatrix dx(xn->grad_buffer().data(), batch, in);
                dx.noalias() += dout * ConstMapMatrix(wn->value.data(), outd, in);
            }
            if (wn->requires_grad) {
                MapMatrix dw(wn->grad_buffer().data(), outd, in);
                dw.noalias() += dout.transpose() * ConstMapMatrix(xn->value.data(), batch, in);
            }
            if (bn && bn->requires_grad) {
                auto& db = bn->grad_buffer();
                for (int64_t j = 0; j < outd; ++j) {
                    db[static_cast<size_t>(j)] += dout.col(j).sum();
                }
            }
        };
    }
    return out;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    require(x.rank() == 2, "l2_normalize_rows expects rank-2 input");
    const int64_t rows = x.dim(0), d = x.dim(1);
    Tensor out = make_result(x.shape(), {x});
    std::vector<double> norms(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * d;
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            sq += in[j] * in[j];
        }
        const double nrm = std::max(std::sqrt(sq), eps);
        norms[static_cast<size_t>(r)] = nrm;
        for (int64_t j = 0; j < d; ++j) {
            out.mutable_data()[static_cast<size_t>(r * d + j)] = in[j] / nrm;
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr().get();
        out.node().backward = [=, norms = std::move(norms)](Node& self) {
            auto& dx = xn->grad_buffer();
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * d;
                const double* y = on->value.data() + r * d;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    dot += g[j] * y[j];
                }
                const double inv = 1.0 / norms[static_cast<size_t>(r)];
                for (int64_t j = 0; j < d; ++j) {
                    dx[static_cast<size_t>(r * d + j)] += (g[j] - y[j] * dot) * inv;
                }
            }
        };
    }
    return out;
}

Tensor external_scalar(double value, std::vector<Tensor> inputs, std::vector<std::vector<double>> grads) {
    require(inputs.size() == grads.size(), "external_scalar needs one gradient per input");
    for (size_t i = 0; i < inputs.size(); ++i) {
        require(static_cast<int64_t>(grads[i].size()) == inputs[i].numel(), "external_scalar gradient size mismatch");
    }
    Tensor out = make_result({1}, inputs);
    out.mutable_data()[0] = value;
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<Node>> nodes;
        for (const Tensor& t : inputs) {
            nodes.push_back(t.node_ptr());
        }
        out.node().backward = [nodes = std::move(nodes), grads = std::move(grads)](Node& self) {
            const double up = self.grad[0];
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (!nodes[i]->requires_grad) {
                    continue;
                }
                auto& d = nodes[i]->grad_buffer();
                for (size_t j = 0; j < d.size(); ++j) {
                    d[j] += up * grads[i][j];
                }
            }
        };
    }
    return out;
}

Tensor weighted_sum(const std::vector<Tensor>& terms, const std::vector<double>& weights) {
    require(terms.size() == weights.size(), "weighted_sum needs one weight per term");
    Tensor out = make_result({1}, terms);
    double total = 0.0;
    for (size_t i = 0; i < terms.size(); ++i) {
        total += weights[i] * terms[i].item();
    }
    out.mutable_data()[0] = total;
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<Node>> nodes;
        for (const Tensor& t : terms) {
            nodes.push_back(t.node_ptr());
        }
        out.node().backward = [nodes = std::move(nodes), weights](Node& self) {
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i]->requires_grad) {
                    nodes[i]->grad_buffer()[0] += self.grad[0] * weights[i];
                }
            }
        };
    }
    return out;
}

} // namespace fsd::nn
