#include "fsdenoise/models.hpp"

#include <algorithm>
#include <cmath>

#include "fsdenoise/error.hpp"

namespace fsd::models {

namespace {

constexpr nn::ConvGeometry kDown{4, 2, 1};
constexpr nn::ConvGeometry kUp{4, 2, 1};
constexpr double kLeakySlope = 0.2;

Tensor gaussian_param(nn::Shape shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.mutable_data()) {
        v = normal(rng, 0.0, kInitStddev);
    }
    return t;
}

Tensor uniform_param(nn::Shape shape, double bound, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.mutable_data()) {
        v = uniform(rng, -bound, bound);
    }
    return t;
}

Tensor zero_param(nn::Shape shape) { return Tensor::zeros(std::move(shape), true); }

void invalid(const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); }

} // namespace

int64_t count_parameters(const std::vector<NamedParameter>& params) {
    int64_t n = 0;
    for (const auto& p : params) {
        n += p.tensor.numel();
    }
    return n;
}

// ---------------------------------------------------------------- generator

void GeneratorConfig::validate() const {
    if (n_down != n_up) {
        invalid("generator needs as many upsampling as downsampling blocks");
    }
    if (n_down < 1 || base_channels < 1 || max_channels < base_channels || in_channels < 1 || out_channels < 1) {
        invalid("generator depth and widths must be positive");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        invalid("dropout rate must lie in [0, 1)");
    }
    if (input_size < 1 || input_size % (1 << n_down) != 0) {
        invalid("input size " + std::to_string(input_size) + " is not divisible by 2^" + std::to_string(n_down));
    }
}

int GeneratorConfig::channels_at(int depth) const {
    int64_t c = base_channels;
    for (int i = 0; i < depth && c < max_channels; ++i) {
        c *= 2;
    }
    return static_cast<int>(std::min<int64_t>(c, max_channels));
}

Generator::Generator(GeneratorConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int n = cfg_.n_down;
    blocks_.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Block& b = blocks_[static_cast<size_t>(i)];
        const int inner = cfg_.channels_at(i);
        const int outer_in = i == 0 ? cfg_.in_channels : cfg_.channels_at(i - 1);
        const int outer_out = i == 0 ? cfg_.out_channels : cfg_.channels_at(i - 1);
        const bool innermost = i == n - 1;
        const bool outermost = i == 0;
        const int up_in = (innermost || !cfg_.use_skips) ? inner : 2 * inner;

        b.down_w = gaussian_param({inner, outer_in, kDown.kernel, kDown.kernel}, rng);
        // Convolutions feeding instance normalisation carry no bias: the
        // normalisation removes any per-channel constant.
        if (outermost || innermost) {
            b.down_b = zero_param({inner});
        }
        b.up_w = gaussian_param({up_in, outer_out, kUp.kernel, kUp.kernel}, rng);
        if (outermost) {
            b.up_b = zero_param({outer_out});
        }
    }
}

Tensor Generator::encode(const Tensor& x) const {
    Tensor h = x;
    for (int i = 0; i < cfg_.n_down; ++i) {
        const Block& b = blocks_[static_cast<size_t>(i)];
        if (i == 0) {
            h = nn::conv2d(h, b.down_w, b.down_b, kDown);
        } else {
            h = nn::conv2d(nn::leaky_relu(h, kLeakySlope), b.down_w, b.down_b, kDown);
            if (i != cfg_.n_down - 1) {
                h = nn::instance_norm(h);
            }
        }
    }
    return h;
}

Generator::Output Generator::forward(const Tensor& x, Mode mode, Rng* rng) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
        throw Error(ErrorCode::ShapeMismatch, "generator input must be B x " + std::to_string(cfg_.in_channels) +
                                                  " x H x W, got " + nn::shape_string(x.shape()));
    }
    const int64_t div = int64_t{1} << cfg_.n_down;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
        throw Error(ErrorCode::InvalidConfig, "generator input " + nn::shape_string(x.shape()) +
                                                  " is not divisible by 2^" + std::to_string(cfg_.n_down));
    }
    const int n = cfg_.n_down;
    const bool drop = (mode == Mode::Train || test_time_dropout) && cfg_.dropout_rate > 0.0;
    if (drop && rng == nullptr) {
        throw Error(ErrorCode::InvalidConfig, "dropout requires an RNG");
    }

    std::vector<Tensor> skips(static_cast<size_t>(n));
    Tensor h = x;
    for (int i = 0; i < n; ++i) {
        const Block& b = blocks_[static_cast<size_t>(i)];
        if (i == 0) {
            h = nn::conv2d(h, b.down_w, b.down_b, kDown);
        } else {
            h = nn::conv2d(nn::leaky_relu(h, kLeakySlope), b.down_w, b.down_b, kDown);
            if (i != n - 1) {
                h = nn::instance_norm(h);
            }
        }
        skips[static_cast<size_t>(i)] = h;
    }
    Output out;
    out.bottleneck = h;
    for (const Tensor& s : skips) {
        out.encoder_shapes.push_back(s.shape());
    }

    Tensor u = h;
    for (int i = n - 1; i >= 0; --i) {
        const Block& b = blocks_[static_cast<size_t>(i)];
        if (i != n - 1 && cfg_.use_skips) {
            u = nn::concat_channels(skips[static_cast<size_t>(i)], u);
        }
        u = nn::conv_transpose2d(nn::relu(u), b.up_w, b.up_b, kUp);
        if (i == 0) {
            u = nn::tanh_unit(u);
            break;
        }
        u = nn::instance_norm(u);
        if (drop && cfg_.dropout_blocks.contains(n - 1 - i)) {
            u = nn::dropout(u, cfg_.dropout_rate, *rng);
        }
    }
    out.image = u;
    return out;
}

std::vector<NamedParameter> Generator::parameters() const {
    std::vector<NamedParameter> out;
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const Block& b = blocks_[i];
        const std::string prefix = "generator.block" + std::to_string(i);
        out.push_back({prefix + ".down.weight", b.down_w});
        if (b.down_b.defined()) {
            out.push_back({prefix + ".down.bias", b.down_b});
        }
        out.push_back({prefix + ".up.weight", b.up_w});
        if (b.up_b.defined()) {
            out.push_back({prefix + ".up.bias", b.up_b});
        }
    }
    return out;
}

int64_t Generator::parameter_count() const { return count_parameters(parameters()); }

std::vector<int64_t> Generator::trace_encoder(int64_t input_size) const {
    std::vector<int64_t> sizes{input_size};
    int64_t s = input_size;
    for (int i = 0; i < cfg_.n_down; ++i) {
        s = nn::conv_output_size(s, kDown);
        sizes.push_back(s);
    }
    return sizes;
}

// ------------------------------------------------------------ discriminator

void DiscriminatorConfig::validate() const {
    if (n_layers < 1 || base_channels < 1 || in_channels < 1) {
        invalid("discriminator depth and widths must be positive");
    }
}

Discriminator::Discriminator(DiscriminatorConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int base = cfg_.base_channels;
    specs_.push_back({{4, 2, 1}, cfg_.in_channels, base, false, true});
    int mult = 1;
    for (int l = 1; l < cfg_.n_layers; ++l) {
        const int prev = mult;
        mult = std::min(1 << l, 8);
        specs_.push_back({{4, 2, 1}, base * prev, base * mult, true, true});
    }
    const int prev = mult;
    mult = std::min(1 << cfg_.n_layers, 8);
    specs_.push_back({{4, 1, 1}, base * prev, base * mult, true, true});
    specs_.push_back({{4, 1, 1}, base * mult, 1, false, false});

    for (const LayerSpec& s : specs_) {
        const int64_t k = s.geometry.kernel;
        weights_.push_back(gaussian_param({s.out_channels, s.in_channels, k, k}, rng));
        biases_.push_back(s.norm ? Tensor() : zero_param({s.out_channels}));
    }
}

Tensor Discriminator::forward(const Tensor& condition, const Tensor& candidate) const {
    Tensor h = nn::concat_channels(condition, candidate);
    if (h.dim(1) != cfg_.in_channels) {
        throw Error(ErrorCode::ShapeMismatch, "discriminator expects " + std::to_string(cfg_.in_channels) +
                                                  " input channels, got " + std::to_string(h.dim(1)));
    }
    for (size_t l = 0; l < specs_.size(); ++l) {
        const LayerSpec& s = specs_[l];
        h = nn::conv2d(h, weights_[l], biases_[l], s.geometry);
        if (s.norm) {
            h = nn::instance_norm(h);
        }
        if (s.activation) {
            h = nn::leaky_relu(h, kLeakySlope);
        }
    }
    return h;
}

std::vector<NamedParameter> Discriminator::parameters() const {
    std::vector<NamedParameter> out;
    for (size_t l = 0; l < specs_.size(); ++l) {
        const std::string prefix = "discriminator.layer" + std::to_string(l);
        out.push_back({prefix + ".weight", weights_[l]});
        if (biases_[l].defined()) {
            out.push_back({prefix + ".bias", biases_[l]});
        }
    }
    return out;
}

int64_t Discriminator::parameter_count() const { return count_parameters(parameters()); }

int64_t Discriminator::receptive_field() const {
    int64_t rf = 1;
    for (auto it = specs_.rbegin(); it != specs_.rend(); ++it) {
        rf = (rf - 1) * it->geometry.stride + it->geometry.kernel;
    }
    return rf;
}

int64_t Discriminator::total_stride() const {
    int64_t s = 1;
    for (const LayerSpec& l : specs_) {
        s *= l.geometry.stride;
    }
    return s;
}

int64_t Discriminator::effective_padding() const {
    int64_t pad = 0, jump = 1;
    for (const LayerSpec& l : specs_) {
        pad += l.geometry.padding * jump;
        jump *= l.geometry.stride;
    }
    return pad;
}

int64_t Discriminator::output_size(int64_t input) const {
    return (input + 2 * effective_padding() - receptive_field()) / total_stride() + 1;
}

// ---------------------------------------------------------- projection head

void ProjectionHeadConfig::validate() const {
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) {
        invalid("projection head dimensions must be positive");
    }
}

ProjectionHead::ProjectionHead(ProjectionHeadConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    w1_ = uniform_param({cfg_.hidden_dim, cfg_.input_dim}, 1.0 / std::sqrt(cfg_.input_dim), rng);
    b1_ = zero_param({cfg_.hidden_dim});
    w2_ = uniform_param({cfg_.output_dim, cfg_.hidden_dim}, 1.0 / std::sqrt(cfg_.hidden_dim), rng);
    b2_ = zero_param({cfg_.output_dim});
}

Tensor ProjectionHead::forward(const Tensor& features) const {
    Tensor pooled = features.rank() == 4 ? nn::global_avg_pool(features) : features;
    if (pooled.rank() != 2 || pooled.dim(1) != cfg_.input_dim) {
        throw Error(ErrorCode::ShapeMismatch, "projection head expects " + std::to_string(cfg_.input_dim) +
                                                  " features, got " + nn::shape_string(pooled.shape()));
    }
    Tensor h = nn::relu(nn::linear(pooled, w1_, b1_));
    return nn::l2_normalize_rows(nn::linear(h, w2_, b2_));
}

std::vector<NamedParameter> ProjectionHead::parameters() const {
    return {{"head.fc1.weight", w1_}, {"head.fc1.bias", b1_}, {"head.fc2.weight", w2_}, {"head.fc2.bias", b2_}};
}

} // namespace fsd::models
