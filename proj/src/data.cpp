#include "fsdenoise/data.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fsdenoise/error.hpp"
#include "fsdenoise/io.hpp"

namespace fsd::data {

namespace {

std::string join_indices(const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + std::to_string(v[i]);
    }
    return s;
}

std::vector<int64_t> parse_indices(const std::string& s) {
    std::vector<int64_t> out;
    for (const auto& item : io::split_list(s)) {
        out.push_back(io::parse_int(item, "index list"));
    }
    return out;
}

} // namespace

// ------------------------------------------------------------------- stacks

void ImageStack::validate() const {
    if (frames.size() < 2) {
        throw Error(ErrorCode::NonImageData, "stack '" + name + "' needs at least 2 frames, has " +
                                                 std::to_string(frames.size()));
    }
    for (size_t i = 0; i < frames.size(); ++i) {
        if (!frames[i].same_shape(frames[0])) {
            throw Error(ErrorCode::MixedShapes, "frame " + std::to_string(i) + " is " + std::to_string(frames[i].rows) +
                                                    "x" + std::to_string(frames[i].cols) + ", frame 0 is " +
                                                    std::to_string(frames[0].rows) + "x" +
                                                    std::to_string(frames[0].cols));
        }
        for (double v : frames[i].px) {
            if (!std::isfinite(v) || v < 0.0) {
                throw Error(ErrorCode::NonImageData, "frame " + std::to_string(i) + " has a negative or non-finite value");
            }
        }
    }
}

std::string to_string(StackFormat f) {
    switch (f) {
    case StackFormat::TiffStack: return "tiff-stack";
    case StackFormat::DirectoryOfImages: return "directory-of-images";
    case StackFormat::RawArrayFile: return "raw-array-file";
    }
    return "unknown";
}

StackFormat parse_stack_format(const std::string& s) {
    if (s == "tiff-stack") return StackFormat::TiffStack;
    if (s == "directory-of-images") return StackFormat::DirectoryOfImages;
    if (s == "raw-array-file") return StackFormat::RawArrayFile;
    throw Error(ErrorCode::InvalidConfig, "unknown stack format '" + s + "'");
}

StackFormat detect_format(const fs::path& path) {
    if (fs::is_directory(path)) {
        return StackFormat::DirectoryOfImages;
    }
    return io::is_image_file(path) ? StackFormat::TiffStack : StackFormat::RawArrayFile;
}

ImageStack make_stack(std::vector<Image> frames, std::string name) {
    ImageStack s;
    s.frames = std::move(frames);
    s.name = std::move(name);
    s.validate();
    double lo = s.frames[0].px[0], hi = lo;
    for (const Image& f : s.frames) {
        const auto [mn, mx] = std::minmax_element(f.px.begin(), f.px.end());
        lo = std::min(lo, *mn);
        hi = std::max(hi, *mx);
    }
    s.pixel_range = {lo, hi};
    return s;
}

ImageStack load_stack(const fs::path& path, StackFormat format) {
    if (!fs::exists(path)) {
        throw Error(ErrorCode::MissingFile, path.string());
    }
    std::vector<Image> frames;
    switch (format) {
    case StackFormat::TiffStack:
        frames = io::read_image_pages(path);
        break;
    case StackFormat::DirectoryOfImages: {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.is_regular_file() && io::is_image_file(entry.path())) {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) {
            throw Error(ErrorCode::NonImageData, "no PNG/TIFF frames in " + path.string());
        }
        for (const auto& f : files) {
            auto pages = io::read_image_pages(f);
            for (auto& p : pages) {
                frames.push_back(std::move(p));
            }
        }
        break;
    }
    case StackFormat::RawArrayFile:
        frames = io::read_raw_array(path);
        break;
    }
    return make_stack(std::move(frames), path.stem().string());
}

Image synthesize_ground_truth(const ImageStack& stack) {
    stack.validate();
    Image gt(stack.rows(), stack.cols(), 0.0);
    for (const Image& f : stack.frames) {
        for (size_t i = 0; i < gt.px.size(); ++i) {
            gt.px[i] += f.px[i];
        }
    }
    const auto n = static_cast<double>(stack.frames.size());
    for (double& v : gt.px) {
        v /= n;
    }
    return gt;
}

// ------------------------------------------------------------ normalisation

double percentile(std::vector<double> values, double pct) {
    if (values.empty()) {
        throw Error(ErrorCode::DegenerateRange, "percentile of empty array");
    }
    const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double vlo = values[lo];
    double vhi = vlo;
    if (hi != lo) {
        vhi = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
    }
    return vlo + (pos - static_cast<double>(lo)) * (vhi - vlo);
}

namespace {

NormalizationRecord make_record(const std::vector<double>& values, double low_pct, double high_pct) {
    if (!(low_pct < high_pct)) {
        throw Error(ErrorCode::InvalidConfig, "low percentile must be below high percentile");
    }
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw Error(ErrorCode::NonImageData, "cannot normalise non-finite values");
        }
    }
    NormalizationRecord rec{low_pct, high_pct, percentile(values, low_pct), percentile(values, high_pct)};
    if (!(rec.high_value > rec.low_value)) {
        throw Error(ErrorCode::DegenerateRange, "percentiles coincide at " + std::to_string(rec.low_value));
    }
    return rec;
}

} // namespace

std::pair<Image, NormalizationRecord> normalize(const Image& arr, double low_pct, double high_pct) {
    const NormalizationRecord rec = make_record(arr.px, low_pct, high_pct);
    return {apply_normalization(arr, rec), rec};
}

Image apply_normalization(const Image& arr, const NormalizationRecord& rec, bool clip) {
    Image out(arr.rows, arr.cols);
    const double span = rec.high_value - rec.low_value;
    for (size_t i = 0; i < arr.px.size(); ++i) {
        const double v = (arr.px[i] - rec.low_value) / span;
        out.px[i] = clip ? std::clamp(v, 0.0, 1.0) : v;
    }
    return out;
}

Image denormalize(const Image& arr, const NormalizationRecord& rec) {
    Image out(arr.rows, arr.cols);
    const double span = rec.high_value - rec.low_value;
    for (size_t i = 0; i < arr.px.size(); ++i) {
        out.px[i] = arr.px[i] * span + rec.low_value;
    }
    return out;
}

NormalizationRecord stack_normalization(const ImageStack& stack, double low_pct, double high_pct,
                                        int64_t max_samples) {
    stack.validate();
    const int64_t total = static_cast<int64_t>(stack.frames.size()) * stack.rows() * stack.cols();
    const int64_t stride = std::max<int64_t>(1, (total + max_samples - 1) / max_samples);
    std::vector<double> pooled;
    pooled.reserve(static_cast<size_t>(total / stride + 1));
    int64_t k = 0;
    for (const Image& f : stack.frames) {
        for (double v : f.px) {
            if (k++ % stride == 0) {
                pooled.push_back(v);
            }
        }
    }
    return make_record(pooled, low_pct, high_pct);
}

// ------------------------------------------------------------------ dataset

std::pair<std::vector<int64_t>, std::vector<int64_t>> split_indices(int64_t n, double test_fraction, uint64_t seed) {
    if (test_fraction < 0.0 || test_fraction >= 1.0) {
        throw Error(ErrorCode::InvalidConfig, "test fraction must lie in [0, 1)");
    }
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        order[static_cast<size_t>(i)] = i;
    }
    Rng rng = make_rng(seed);
    shuffle(order, rng);
    const auto n_test = std::min<int64_t>(std::llround(static_cast<double>(n) * test_fraction), n - 1);
    std::vector<int64_t> test(order.begin(), order.begin() + n_test);
    std::vector<int64_t> train(order.begin() + n_test, order.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    return {train, test};
}

DenoisingDataset build_dataset(const ImageStack& stack, const Image& gt, const DatasetOptions& opts) {
    stack.validate();
    if (!gt.same_shape(stack.frames[0])) {
        throw Error(ErrorCode::MixedShapes, "ground truth shape differs from stack frames");
    }
    if (opts.patch_size < 1 || opts.patch_size > std::min(stack.rows(), stack.cols())) {
        throw Error(ErrorCode::PatchTooLarge, "patch " + std::to_string(opts.patch_size) + " exceeds frame " +
                                                  std::to_string(stack.rows()) + "x" + std::to_string(stack.cols()));
    }
    DenoisingDataset ds;
    ds.name = stack.name;
    ds.patch_size = opts.patch_size;
    ds.split_seed = opts.seed;
    ds.test_fraction = opts.test_fraction;
    ds.normalization = stack_normalization(stack, opts.low_pct, opts.high_pct);
    const auto clean = std::make_shared<const Image>(apply_normalization(gt, ds.normalization));
    auto [train, test] = split_indices(static_cast<int64_t>(stack.frames.size()), opts.test_fraction, opts.seed);
    ds.train_indices = std::move(train);
    ds.test_indices = std::move(test);
    ds.pairs.reserve(stack.frames.size());
    for (size_t i = 0; i < stack.frames.size(); ++i) {
        ds.pairs.push_back({apply_normalization(stack.frames[i], ds.normalization), clean, static_cast<int64_t>(i),
                            Split::Train});
    }
    for (int64_t t : ds.test_indices) {
        ds.pairs[static_cast<size_t>(t)].split = Split::Test;
    }
    return ds;
}

std::pair<Image, Image> sample_crop(const DenoisingDataset& ds, int64_t pair_index, Rng& rng) {
    const DenoisingPair& p = ds.pairs.at(static_cast<size_t>(pair_index));
    const int64_t s = ds.patch_size;
    if (s > p.noisy.rows || s > p.noisy.cols) {
        throw Error(ErrorCode::PatchTooLarge, "patch larger than frame");
    }
    const auto r0 = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(p.noisy.rows - s + 1)));
    const auto c0 = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(p.noisy.cols - s + 1)));
    return {crop(p.noisy, r0, r0 + s, c0, c0 + s), crop(*p.clean, r0, r0 + s, c0, c0 + s)};
}

// ------------------------------------------------------------------ few-shot

std::string FewShotSpec::label() const { return n_samples ? std::to_string(*n_samples) : "all"; }

FewShotSpec FewShotSpec::parse(const std::string& label, uint64_t seed) {
    const std::string t = io::trim(label);
    if (t == "all" || t == "ALL") {
        return {std::nullopt, seed};
    }
    const int64_t n = io::parse_int(t, "few-shot size");
    if (n < 1) {
        throw Error(ErrorCode::InvalidConfig, "few-shot size must be positive");
    }
    return {n, seed};
}

std::vector<int64_t> few_shot_indices(const std::vector<int64_t>& train, int64_t n, uint64_t seed) {
    if (n > static_cast<int64_t>(train.size())) {
        throw Error(ErrorCode::SubsetTooLarge, "requested " + std::to_string(n) + " samples from " +
                                                   std::to_string(train.size()) + " training pairs");
    }
    std::vector<int64_t> pool = train;
    Rng rng = make_rng(seed);
    for (int64_t i = 0; i < n; ++i) {
        const auto j = i + static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(pool.size()) - i));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(n));
    std::sort(pool.begin(), pool.end());
    return pool;
}

DenoisingDataset few_shot_subset(const DenoisingDataset& ds, const FewShotSpec& spec) {
    if (!spec.n_samples) {
        return ds;
    }
    if (*spec.n_samples < 1) {
        throw Error(ErrorCode::InvalidConfig, "few-shot size must be positive");
    }
    DenoisingDataset out = ds;
    out.train_indices = few_shot_indices(ds.train_indices, *spec.n_samples, spec.seed);
    return out;
}

// -------------------------------------------------------------- augmentation

AugmentationChain AugmentationChain::identity() {
    AugmentationChain c;
    c.p_flip_horizontal = c.p_flip_vertical = c.p_rotate90 = c.p_intensity = c.p_noise = 0.0;
    return c;
}

AugmentationChain AugmentationChain::flips_only() {
    AugmentationChain c = identity();
    c.p_flip_horizontal = c.p_flip_vertical = 0.5;
    return c;
}

Image augment_view(const Image& patch, const AugmentationChain& chain, Rng& rng) {
    Image v = patch;
    // Every draw is consumed regardless of outcome so the stream position does
    // not depend on earlier decisions.
    const bool fh = bernoulli(rng, chain.p_flip_horizontal);
    const bool fv = bernoulli(rng, chain.p_flip_vertical);
    const bool rot = bernoulli(rng, chain.p_rotate90);
    const int turns = 1 + static_cast<int>(uniform_index(rng, 3));
    const bool jitter = bernoulli(rng, chain.p_intensity);
    const double scale = uniform(rng, chain.intensity_low, chain.intensity_high);
    const bool noise = bernoulli(rng, chain.p_noise);
    if (fh) {
        v = flip_horizontal(v);
    }
    if (fv) {
        v = flip_vertical(v);
    }
    if (rot && v.rows == v.cols) {
        v = rotate90(v, turns);
    }
    if (jitter) {
        for (double& x : v.px) {
            x *= scale;
        }
    }
    if (noise) {
        for (double& x : v.px) {
            x += normal(rng, 0.0, chain.noise_sigma);
        }
    }
    if (chain.clip_unit && (jitter || noise)) {
        for (double& x : v.px) {
            x = std::clamp(x, 0.0, 1.0);
        }
    }
    return v;
}

std::pair<Image, Image> contrastive_augment(const Image& patch, uint64_t seed, const AugmentationChain& chain) {
    Rng rng = make_rng(seed);
    Image a = augment_view(patch, chain, rng);
    Image b = augment_view(patch, chain, rng);
    return {std::move(a), std::move(b)};
}

// ------------------------------------------------------------------ manifest

std::string manifest_text(const DenoisingDataset& ds) {
    std::ostringstream os;
    os << "# dataset manifest\n";
    os << "name = " << ds.name << '\n';
    os << "stack_path = " << ds.source_path << '\n';
    os << "stack_format = " << to_string(ds.source_format) << '\n';
    os << "n_frames = " << ds.pairs.size() << '\n';
    os << "patch_size = " << ds.patch_size << '\n';
    os << "low_pct = " << io::format_double(ds.normalization.low_pct) << '\n';
    os << "high_pct = " << io::format_double(ds.normalization.high_pct) << '\n';
    os << "low_value = " << io::format_double(ds.normalization.low_value) << '\n';
    os << "high_value = " << io::format_double(ds.normalization.high_value) << '\n';
    os << "split_seed = " << ds.split_seed << '\n';
    os << "test_fraction = " << io::format_double(ds.test_fraction) << '\n';
    os << "train_indices = " << join_indices(ds.train_indices) << '\n';
    os << "test_indices = " << join_indices(ds.test_indices) << '\n';
    return os.str();
}

void write_manifest(const DenoisingDataset& ds, const fs::path& path) { io::write_text_file(path, manifest_text(ds)); }

DenoisingDataset load_from_manifest(const fs::path& path) {
    const auto sections = io::read_key_value_file(path);
    const io::Section& s = sections.front();
    const fs::path stack_path = s.get("stack_path");
    const StackFormat format = parse_stack_format(s.get("stack_format"));
    const ImageStack stack = load_stack(stack_path, format);
    if (static_cast<int64_t>(stack.frames.size()) != io::parse_int(s.get("n_frames"), "n_frames")) {
        throw Error(ErrorCode::SchemaMismatch, "stack frame count differs from manifest");
    }
    DenoisingDataset ds;
    ds.name = s.get("name");
    ds.source_path = stack_path.string();
    ds.source_format = format;
    ds.patch_size = io::parse_int(s.get("patch_size"), "patch_size");
    ds.normalization = {io::parse_double(s.get("low_pct"), "low_pct"), io::parse_double(s.get("high_pct"), "high_pct"),
                        io::parse_double(s.get("low_value"), "low_value"),
                        io::parse_double(s.get("high_value"), "high_value")};
    ds.split_seed = static_cast<uint64_t>(io::parse_int(s.get("split_seed"), "split_seed"));
    ds.test_fraction = io::parse_double(s.get("test_fraction"), "test_fraction");
    ds.train_indices = parse_indices(s.get("train_indices"));
    ds.test_indices = parse_indices(s.get("test_indices"));
    const auto clean = std::make_shared<const Image>(apply_normalization(synthesize_ground_truth(stack), ds.normalization));
    for (size_t i = 0; i < stack.frames.size(); ++i) {
        ds.pairs.push_back({apply_normalization(stack.frames[i], ds.normalization), clean, static_cast<int64_t>(i),
                            Split::Train});
    }
    for (int64_t t : ds.test_indices) {
        ds.pairs.at(static_cast<size_t>(t)).split = Split::Test;
    }
    return ds;
}

// ------------------------------------------------------------------ synthetic

Image synthetic_shapes_image(int64_t size, Rng& rng) {
    Image img(size, size, uniform(rng, 0.15, 0.3));
    const int shapes = 4 + static_cast<int>(uniform_index(rng, 5));
    for (int s = 0; s < shapes; ++s) {
        const bool ellipse = bernoulli(rng, 0.5);
        const double cy = uniform(rng, 0.0, static_cast<double>(size));
        const double cx = uniform(rng, 0.0, static_cast<double>(size));
        const double ry = uniform(rng, 0.06, 0.25) * static_cast<double>(size);
        const double rx = uniform(rng, 0.06, 0.25) * static_cast<double>(size);
        const double value = uniform(rng, 0.4, 0.85);
        for (int64_t r = 0; r < size; ++r) {
            for (int64_t c = 0; c < size; ++c) {
                const double dy = (static_cast<double>(r) - cy) / ry, dx = (static_cast<double>(c) - cx) / rx;
                const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
                if (inside) {
                    img(r, c) = value;
                }
            }
        }
    }
    return img;
}

DenoisingDataset make_synthetic_dataset(const SyntheticOptions& opts) {
    if (opts.count < 2 || opts.patch_size > opts.size) {
        throw Error(ErrorCode::InvalidConfig, "synthetic dataset needs >= 2 images and patch <= image size");
    }
    Rng rng = make_rng(opts.seed);
    DenoisingDataset ds;
    ds.name = "synthetic-shapes";
    ds.patch_size = opts.patch_size;
    ds.split_seed = opts.seed;
    ds.test_fraction = opts.test_fraction;
    ds.normalization = {0.0, 100.0, 0.0, 1.0};
    ds.source_path = "synthetic:shapes";
    for (int64_t i = 0; i < opts.count; ++i) {
        auto clean = std::make_shared<const Image>(synthetic_shapes_image(opts.size, rng));
        Image noisy = *clean;
        for (double& v : noisy.px) {
            v += normal(rng, 0.0, opts.noise_sigma);
        }
        ds.pairs.push_back({std::move(noisy), clean, i, Split::Train});
    }
    auto [train, test] = split_indices(opts.count, opts.test_fraction, opts.seed);
    ds.train_indices = std::move(train);
    ds.test_indices = std::move(test);
    for (int64_t t : ds.test_indices) {
        ds.pairs[static_cast<size_t>(t)].split = Split::Test;
    }
    return ds;
}

ImageStack make_synthetic_stack(int64_t n_frames, int64_t size, double noise_sigma, uint64_t seed) {
    Rng rng = make_rng(seed);
    const Image clean = synthetic_shapes_image(size, rng);
    std::vector<Image> frames;
    for (int64_t f = 0; f < n_frames; ++f) {
        Image frame = clean;
        for (double& v : frame.px) {
            // Raw acquisitions are non-negative intensities.
            v = std::max(0.0, 1000.0 * (v + normal(rng, 0.0, noise_sigma)));
        }
        frames.push_back(std::move(frame));
    }
    return make_stack(std::move(frames), "synthetic-stack");
}

} // namespace fsd::data
