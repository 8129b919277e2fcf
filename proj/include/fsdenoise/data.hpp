#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fsdenoise/image.hpp"
#include "fsdenoise/random.hpp"

namespace fsd::data {

namespace fs = std::filesystem;

// One noisy acquisition series of a static sample.
struct ImageStack {
    std::vector<Image> frames;
    std::string name;
    std::pair<double, double> pixel_range{0.0, 0.0};

    // Throws MixedShapes / NonImageData on invariant violations.
    void validate() const;
    int64_t rows() const { return frames.empty() ? 0 : frames.front().rows; }
    int64_t cols() const { return frames.empty() ? 0 : frames.front().cols; }
};

enum class StackFormat { TiffStack, DirectoryOfImages, RawArrayFile };

std::string to_string(StackFormat f);
StackFormat parse_stack_format(const std::string& s);
// Directory -> DirectoryOfImages, .tif/.tiff/.png -> TiffStack, otherwise RawArrayFile.
StackFormat detect_format(const fs::path& path);

ImageStack load_stack(const fs::path& path, StackFormat format);
ImageStack make_stack(std::vector<Image> frames, std::string name);

// Per-pixel arithmetic mean over all frames in raw units.
Image synthesize_ground_truth(const ImageStack& stack);

// ---- normalisation -------------------------------------------------------------

struct NormalizationRecord {
    double low_pct = 0.1;
    double high_pct = 99.9;
    double low_value = 0.0;
    double high_value = 1.0;
};

// Linear-interpolated percentile (same convention as numpy's default).
double percentile(std::vector<double> values, double pct);

// clip((arr - p_low) / (p_high - p_low), 0, 1) with percentiles of arr.
std::pair<Image, NormalizationRecord> normalize(const Image& arr, double low_pct, double high_pct);
// Applies an existing record; clip = false keeps out-of-range values.
Image apply_normalization(const Image& arr, const NormalizationRecord& rec, bool clip = true);
Image denormalize(const Image& arr, const NormalizationRecord& rec);
// Percentiles pooled over every frame of the stack (deterministically
// subsampled to at most max_samples values).
NormalizationRecord stack_normalization(const ImageStack& stack, double low_pct, double high_pct,
                                        int64_t max_samples = 4'000'000);

// ---- dataset ---------------------------------------------------------------------

enum class Split { Train, Test };

struct DenoisingPair {
    Image noisy;
    std::shared_ptr<const Image> clean;
    int64_t image_id = 0; // frame index in the source stack
    Split split = Split::Train;
};

struct DatasetOptions {
    int64_t patch_size = 256;
    double test_fraction = 0.1;
    uint64_t seed = 0;
    double low_pct = 0.1;
    double high_pct = 99.9;
};

// Immutable after construction; sampling takes an explicit RNG.
struct DenoisingDataset {
    std::string name;
    std::vector<DenoisingPair> pairs;
    NormalizationRecord normalization;
    int64_t patch_size = 256;
    std::vector<int64_t> train_indices; // sorted, into pairs
    std::vector<int64_t> test_indices;  // sorted, into pairs
    uint64_t split_seed = 0;
    double test_fraction = 0.1;
    std::string source_path;
    StackFormat source_format = StackFormat::TiffStack;

    int64_t n_train() const { return static_cast<int64_t>(train_indices.size()); }
    int64_t n_test() const { return static_cast<int64_t>(test_indices.size()); }
};

// Pairs every frame with the shared ground truth, both normalised with the
// stack record; the split is a seeded shuffle of frame indices.
DenoisingDataset build_dataset(const ImageStack& stack, const Image& gt, const DatasetOptions& opts);
// Seeded split of frame indices: first round(n * test_fraction) of the shuffle are test.
std::pair<std::vector<int64_t>, std::vector<int64_t>> split_indices(int64_t n, double test_fraction, uint64_t seed);

// Random patch_size crop of one pair; noisy and clean share coordinates.
std::pair<Image, Image> sample_crop(const DenoisingDataset& ds, int64_t pair_index, Rng& rng);

// ---- few-shot ---------------------------------------------------------------------

struct FewShotSpec {
    std::optional<int64_t> n_samples; // nullopt = ALL
    uint64_t seed = 0;

    std::string label() const; // "all" or the count
    static FewShotSpec parse(const std::string& label, uint64_t seed);
};

// Seeded partial Fisher-Yates over the sorted training indices; test set untouched.
DenoisingDataset few_shot_subset(const DenoisingDataset& ds, const FewShotSpec& spec);
// Index selection used by few_shot_subset.
std::vector<int64_t> few_shot_indices(const std::vector<int64_t>& train, int64_t n, uint64_t seed);

// ---- contrastive augmentation ---------------------------------------------------------

struct AugmentationChain {
    double p_flip_horizontal = 0.5;
    double p_flip_vertical = 0.5;
    double p_rotate90 = 0.5; // one, two or three quarter turns; square patches only
    double p_intensity = 1.0;
    double intensity_low = 0.9;
    double intensity_high = 1.1;
    double p_noise = 1.0;
    double noise_sigma = 0.02;
    bool clip_unit = true;

    static AugmentationChain identity();
    static AugmentationChain flips_only();
};

Image augment_view(const Image& patch, const AugmentationChain& chain, Rng& rng);
std::pair<Image, Image> contrastive_augment(const Image& patch, uint64_t seed,
                                            const AugmentationChain& chain = AugmentationChain{});

// ---- manifest ----------------------------------------------------------------------------

// Plain-text key/value record that rebuilds a dataset bit-for-bit.
std::string manifest_text(const DenoisingDataset& ds);
void write_manifest(const DenoisingDataset& ds, const fs::path& path);
DenoisingDataset load_from_manifest(const fs::path& path);

// ---- synthetic data ------------------------------------------------------------------------

// Piecewise-constant images of random rectangles and ellipses with additive
// Gaussian noise; each pair carries its own clean image. For tests and the
// desk-scale preset only.
struct SyntheticOptions {
    int64_t count = 16;
    int64_t size = 96;
    double noise_sigma = 0.1;
    int64_t patch_size = 64;
    double test_fraction = 0.25;
    uint64_t seed = 0;
};

Image synthetic_shapes_image(int64_t size, Rng& rng);
DenoisingDataset make_synthetic_dataset(const SyntheticOptions& opts);
// A single shapes scene observed n_frames times with independent noise.
ImageStack make_synthetic_stack(int64_t n_frames, int64_t size, double noise_sigma, uint64_t seed);

} // namespace fsd::data
