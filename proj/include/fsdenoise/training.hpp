#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fsdenoise/data.hpp"
#include "fsdenoise/io.hpp"
#include "fsdenoise/losses.hpp"
#include "fsdenoise/models.hpp"
#include "fsdenoise/random.hpp"

namespace fsd::training {

namespace fs = std::filesystem;

struct AblationFlags {
    bool use_tv = true;
    bool use_ssim = true;
    bool use_cl = true;

    int enabled_count() const { return int(use_tv) + int(use_ssim) + int(use_cl); }
};

struct TrainConfig {
    int batch_size = 32;
    int epochs = 1000;
    int decay_start_epoch = 500;
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    losses::LossWeights weights;
    uint64_t seed = 0;
    AblationFlags ablation;

    models::GeneratorConfig generator;
    models::DiscriminatorConfig discriminator;
    // input_dim is overwritten with the generator bottleneck width.
    models::ProjectionHeadConfig head;
    losses::SSIMParams ssim;
    data::AugmentationChain augmentation;

    // 0 = ceil(n_train / base patches per step), at least 1.
    int steps_per_epoch = 0;

    void validate() const;
    // Base (un-augmented) patches per optimisation batch.
    int base_per_step() const { return ablation.use_cl ? batch_size / 2 : batch_size; }
};

// Stable "key = value" rendering used for manifests, checkpoints and hashing.
std::string to_text(const TrainConfig& cfg);
// Overrides fields of `base` from keys present in `section`.
TrainConfig apply_overrides(TrainConfig base, const io::Section& section);
// True for every key that to_text emits.
bool is_config_key(const std::string& key);

// ---- optimiser -------------------------------------------------------------------

class Adam {
public:
    Adam() = default;
    Adam(std::vector<models::NamedParameter> params, double beta1, double beta2, double eps);

    void zero_grad();
    void step(double lr);

    const std::vector<models::NamedParameter>& parameters() const { return params_; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    int64_t steps() const { return t_; }
    void set_steps(int64_t t) { t_ = t; }

    struct Snapshot {
        std::vector<std::vector<double>> values, m, v;
        int64_t t = 0;
    };
    Snapshot snapshot() const;
    void restore(const Snapshot& s);

private:
    std::vector<models::NamedParameter> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
    double beta1_ = 0.5, beta2_ = 0.999, eps_ = 1e-8;
};

// ---- state -------------------------------------------------------------------------

struct TrainState {
    TrainConfig config;
    models::Generator generator;
    models::Discriminator discriminator;
    models::ProjectionHead head;
    Adam opt_generator;     // generator + projection head
    Adam opt_discriminator;
    int64_t epoch = 0;
    int64_t global_step = 0;
    Rng rng;

    explicit TrainState(const TrainConfig& cfg);
    TrainState(TrainState&&) noexcept = default;
    TrainState& operator=(TrainState&&) noexcept = default;
    TrainState(const TrainState&) = delete;
    TrainState& operator=(const TrainState&) = delete;

    // Independent deep copy (via the checkpoint encoding).
    TrainState clone() const;
};

TrainState init_state(const TrainConfig& cfg);

// ---- checkpoints ------------------------------------------------------------------------
//
// Binary container, little-endian:
//   8 bytes magic "FSDCKPT1"
//   uint64 header length, header bytes ("key = value" text: configs, seed,
//          epoch, step, optimiser step counts, RNG state)
//   uint64 array count, then per array:
//     uint64 name length, name bytes, uint64 rank, rank x int64 dims,
//     numel x float64 values
// Parameter names are hierarchical ("generator.block3.up.weight"); optimiser
// moments are stored as "adam.<g|d>.<m|v>.<parameter name>".
inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'D', 'C', 'K', 'P', 'T', '1'};

std::string encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(const std::string& bytes);
void save_checkpoint(const TrainState& state, const fs::path& path);
TrainState load_checkpoint(const fs::path& path);

// ---- training -----------------------------------------------------------------------------

struct Batch {
    nn::Tensor noisy;   // N x 1 x P x P
    nn::Tensor clean;   // N x 1 x P x P
    nn::Tensor partner; // N x 1 x P x P contrastive views of noisy; undefined without CL
};

Batch make_batch(const data::DenoisingDataset& ds, const std::vector<int64_t>& pair_indices, const TrainConfig& cfg,
                 Rng& rng);

struct StepBreakdown {
    int64_t iteration = 0;
    double gan_g = 0.0;
    double gan_d = 0.0;
    double l1 = 0.0;
    double ssim = 0.0;
    double tv = 0.0;
    double cl = 0.0;
    double total = 0.0; // weighted generator objective
    // Euclidean norm of the projection-head gradient (0 without CL); not in the CSV.
    double head_grad_norm = 0.0;
};

inline constexpr const char* kLossCsvHeader = "iteration,L_GAN_G,L_GAN_D,L_L1,L_SSIM,L_TV,L_CL,total";
std::string loss_csv_row(const StepBreakdown& b);

// Loss implementations used by train_step; replaceable for testing.
struct LossBackend {
    std::function<losses::AdversarialGrad(std::span<const double>, std::span<const double>, losses::AdversarialSide)>
        adversarial;
    std::function<losses::ValueGrad(std::span<const double>, std::span<const double>)> l1;
    std::function<losses::ValueGrad(const losses::ImageBatchView&, const losses::ImageBatchView&,
                                    const losses::SSIMParams&)>
        dssim;
    std::function<losses::ValueGrad(const losses::ImageBatchView&)> tv;
    std::function<losses::ValueGrad(std::span<const double>, int64_t, int64_t, std::span<const int64_t>, double)>
        ntxent;

    static const LossBackend& standard();
};

// 1 - max(0, epoch - decay_start) / (epochs - decay_start), times the base rate.
double lr_schedule(int64_t epoch, const TrainConfig& cfg);

struct GeneratorForward {
    nn::Tensor fake;       // generated images for the base patches
    nn::Tensor embeddings; // projection-head output for [base, partner]; undefined without CL
};

// Generator (and head) forward pass in training mode.
GeneratorForward generator_forward(TrainState& state, const Batch& batch);
// One discriminator update on (x, clean) vs (x, fake.detach()). Returns L_GAN_D.
double discriminator_step(TrainState& state, const Batch& batch, const nn::Tensor& fake, double lr,
                          const LossBackend& backend = LossBackend::standard());
// One generator (+head) update on the weighted objective.
StepBreakdown generator_step(TrainState& state, const Batch& batch, const GeneratorForward& fwd, double lr,
                             const LossBackend& backend = LossBackend::standard());

// Discriminator update then generator update. Throws NonFiniteLoss naming the
// offending term; on throw the state is as before the call.
StepBreakdown train_step(TrainState& state, const Batch& batch, double lr,
                         const LossBackend& backend = LossBackend::standard());

struct FitOptions {
    fs::path loss_csv;        // appended to; header written when the file is new
    fs::path checkpoint_dir;  // empty = no checkpoints
    int checkpoint_every = 0; // epochs; 0 = only at the end
    std::function<void(const StepBreakdown&)> on_step;
    // Return false to stop after this epoch.
    std::function<bool(const TrainState&)> on_epoch_end;
    const LossBackend* backend = nullptr;
};

// Runs from state.epoch to cfg.epochs. Without `resume` a fresh state is built
// from cfg.
TrainState fit(const data::DenoisingDataset& dataset, const TrainConfig& cfg, const FitOptions& options = {},
               std::optional<TrainState> resume = std::nullopt);

} // namespace fsd::training
