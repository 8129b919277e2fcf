#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fsdenoise/random.hpp"
#include "fsdenoise/tensor.hpp"

namespace fsd::models {

using nn::Tensor;

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

// U-Net encoder-decoder. Block i (0 = outermost) halves the spatial size on the
// way down and doubles it on the way up; decoder blocks receive the mirrored
// encoder features by channel concatenation.
struct GeneratorConfig {
    int n_down = 7;
    int n_up = 7;
    int base_channels = 64;
    int max_channels = 512;
    int in_channels = 1;
    int out_channels = 1;
    double dropout_rate = 0.5;
    // Decoder blocks counted from the innermost (0 = innermost).
    std::set<int> dropout_blocks{0, 1, 2};
    int input_size = 256;
    bool use_skips = true;

    void validate() const;
    // Encoder width at depth i.
    int channels_at(int depth) const;
};

struct DiscriminatorConfig {
    int n_layers = 3;
    int base_channels = 64;
    int in_channels = 2; // condition + candidate

    void validate() const;
};

struct ProjectionHeadConfig {
    int input_dim = 512;
    int hidden_dim = 256;
    int output_dim = 128;

    void validate() const;
};

enum class Mode { Train, Eval };

// Weight initialisation: conv weights ~ N(0, 0.02); linear weights ~ U(-1/sqrt(in), 1/sqrt(in)); biases 0.
inline constexpr double kInitStddev = 0.02;

class Generator {
public:
    struct Output {
        Tensor image;      // B x out_channels x H x W, values in [0, 1]
        Tensor bottleneck; // innermost encoder output
        std::vector<nn::Shape> encoder_shapes; // after each encoder block
    };

    Generator(GeneratorConfig cfg, Rng& rng);

    // Dropout is applied in Train mode, or in Eval mode when test_time_dropout is set.
    Output forward(const Tensor& x, Mode mode, Rng* rng = nullptr) const;
    // Encoder half only; returns the bottleneck.
    Tensor encode(const Tensor& x) const;

    const GeneratorConfig& config() const { return cfg_; }
    std::vector<NamedParameter> parameters() const;
    int64_t parameter_count() const;
    // Spatial size after each encoder block for a square input.
    std::vector<int64_t> trace_encoder(int64_t input_size) const;

    bool test_time_dropout = false;

private:
    struct Block {
        Tensor down_w, down_b; // down_b undefined when followed by normalisation
        Tensor up_w, up_b;
    };

    GeneratorConfig cfg_;
    std::vector<Block> blocks_;
};

class Discriminator {
public:
    struct LayerSpec {
        nn::ConvGeometry geometry;
        int in_channels;
        int out_channels;
        bool norm;
        bool activation;
    };

    Discriminator(DiscriminatorConfig cfg, Rng& rng);

    // condition, candidate: B x 1 x H x W  ->  B x 1 x S x S logits.
    Tensor forward(const Tensor& condition, const Tensor& candidate) const;

    const DiscriminatorConfig& config() const { return cfg_; }
    const std::vector<LayerSpec>& layers() const { return specs_; }
    std::vector<NamedParameter> parameters() const;
    int64_t parameter_count() const;

    int64_t receptive_field() const;
    int64_t total_stride() const;
    // Composite zero padding seen at the input: sum_l pad_l * prod_{m<l} stride_m.
    int64_t effective_padding() const;
    // floor((input + 2*effective_padding - receptive_field) / total_stride) + 1
    int64_t output_size(int64_t input) const;

private:
    DiscriminatorConfig cfg_;
    std::vector<LayerSpec> specs_;
    std::vector<Tensor> weights_;
    std::vector<Tensor> biases_;
};

class ProjectionHead {
public:
    ProjectionHead(ProjectionHeadConfig cfg, Rng& rng);

    // features: B x C x h x w (pooled) or B x C -> B x output_dim, unit rows.
    Tensor forward(const Tensor& features) const;

    const ProjectionHeadConfig& config() const { return cfg_; }
    std::vector<NamedParameter> parameters() const;

private:
    ProjectionHeadConfig cfg_;
    Tensor w1_, b1_, w2_, b2_;
};

int64_t count_parameters(const std::vector<NamedParameter>& params);

} // namespace fsd::models
