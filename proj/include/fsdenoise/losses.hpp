#pragma once

// Terms of the generator/discriminator objective. Every function is pure; the
// *_grad variants return the analytic gradient alongside the value so the
// training graph can splice them in as external scalar nodes.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fsd::losses {

// Read-only view of a B x 1 x H x W stack of images.
struct ImageBatchView {
    std::span<const double> data;
    int64_t batch = 1;
    int64_t height = 0;
    int64_t width = 0;

    int64_t plane() const { return height * width; }
};

struct LossWeights {
    double lambda_gan = 1.0;
    double lambda_l1 = 1.0;
    double lambda_ssim = 10.0;
    double lambda_tv = 1e-4;
    double lambda_cl = 1.0;
    double tau = 0.1;

    // Throws InvalidConfig on negative weights or non-positive tau.
    void validate() const;
};

enum class SsimWindow {
    Gaussian, // sliding Gaussian window over all fully-contained positions
    Global,   // single window covering the whole image with uniform weights
};

struct SSIMParams {
    int window_size = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double data_range = 1.0;
    SsimWindow mode = SsimWindow::Gaussian;

    double c1() const { return (k1 * data_range) * (k1 * data_range); }
    double c2() const { return (k2 * data_range) * (k2 * data_range); }
    double c3() const { return c2() / 2.0; }
    void validate() const;
};

struct ValueGrad {
    double value = 0.0;
    std::vector<double> grad;
};

// ---- adversarial -------------------------------------------------------------

enum class AdversarialSide { Generator, Discriminator };

// Discriminator: mean softplus(-real) + mean softplus(fake)
//              = -[mean log s(real) + mean log(1 - s(fake))]
// Generator (non-saturating): mean softplus(-fake) = -mean log s(fake)
// The generator side ignores real_logits.
double adversarial_loss(std::span<const double> real_logits, std::span<const double> fake_logits,
                        AdversarialSide side);

struct AdversarialGrad {
    double value = 0.0;
    std::vector<double> d_real; // empty on the generator side
    std::vector<double> d_fake;
};
AdversarialGrad adversarial_loss_grad(std::span<const double> real_logits, std::span<const double> fake_logits,
                                      AdversarialSide side);

// ---- pixel ---------------------------------------------------------------------

// Mean absolute difference.
double l1_loss(std::span<const double> generated, std::span<const double> target);
ValueGrad l1_loss_grad(std::span<const double> generated, std::span<const double> target);

// ---- structural ------------------------------------------------------------------

// Normalised Gaussian window weights, window_size x window_size, row-major.
std::vector<double> gaussian_window(int window_size, double sigma);

// Mean SSIM over windows and batch members.
double ssim_index(const ImageBatchView& x, const ImageBatchView& y, const SSIMParams& params);
// Gradient with respect to x.
ValueGrad ssim_index_grad(const ImageBatchView& x, const ImageBatchView& y, const SSIMParams& params);

// (1 - SSIM) / 2, gradient with respect to generated.
double dssim_loss(const ImageBatchView& generated, const ImageBatchView& target, const SSIMParams& params);
ValueGrad dssim_loss_grad(const ImageBatchView& generated, const ImageBatchView& target, const SSIMParams& params);

// ---- total variation -----------------------------------------------------------

// Anisotropic TV per image divided by its pixel count, averaged over the batch.
double tv_loss(const ImageBatchView& y);
// Subgradient with sign(0) = 0.
ValueGrad tv_loss_grad(const ImageBatchView& y);

// ---- contrastive -----------------------------------------------------------------

// Rows must have unit norm within this tolerance.
inline constexpr double kUnitNormTolerance = 1e-3;

// NT-Xent over 2N rows of a row-major [rows x dim] embedding matrix with
// cosine similarity. pair_index[i] is the positive partner of row i.
double ntxent_loss(std::span<const double> embeddings, int64_t rows, int64_t dim,
                   std::span<const int64_t> pair_index, double tau);
ValueGrad ntxent_loss_grad(std::span<const double> embeddings, int64_t rows, int64_t dim,
                           std::span<const int64_t> pair_index, double tau);

// Pairing i <-> i + n for a batch laid out as [n base, n augmented].
std::vector<int64_t> halves_pairing(int64_t n);

// ---- composite -------------------------------------------------------------------

struct LossTerms {
    double gan = 0.0;
    double l1 = 0.0;
    double ssim = 0.0;
    double tv = 0.0;
    double cl = 0.0;
};

struct CompositeLoss {
    double total = 0.0;
    LossTerms raw;
    LossTerms weighted;
};

// Throws NonFiniteTerm naming the first non-finite term.
CompositeLoss composite_loss(const LossTerms& terms, const LossWeights& weights);

} // namespace fsd::losses
