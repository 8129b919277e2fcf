#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fsdenoise/data.hpp"
#include "fsdenoise/error.hpp"
#include "fsdenoise/io.hpp"
#include "support.hpp"

namespace D = fsd::data;
using fsd::Image;

namespace {

D::ImageStack small_stack(int64_t frames, int64_t rows, int64_t cols, uint64_t seed) {
    std::vector<Image> f;
    for (int64_t i = 0; i < frames; ++i) {
        Image img = testing::random_image(rows, cols, seed + static_cast<uint64_t>(i));
        for (double& v : img.px) v = std::round(v * 4000.0);
        f.push_back(img);
    }
    return D::make_stack(std::move(f), "small");
}

fsd::ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const fsd::Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return fsd::ErrorCode::InvalidConfig;
}

} // namespace

TEST_CASE("ground truth equals brute-force accumulation") {
    const D::ImageStack s = small_stack(7, 9, 11, 1);
    const Image gt = D::synthesize_ground_truth(s);
    for (int64_t r = 0; r < 9; ++r)
        for (int64_t c = 0; c < 11; ++c) {
            double acc = 0.0;
            for (const auto& f : s.frames) acc += f(r, c);
            CHECK(gt(r, c) == acc / 7.0);
        }
}

TEST_CASE("ground truth of a constant stack is that constant") {
    D::ImageStack s = D::make_stack({Image(4, 4, 3.0), Image(4, 4, 3.0), Image(4, 4, 3.0)}, "c");
    CHECK(D::synthesize_ground_truth(s) == Image(4, 4, 3.0));
}

TEST_CASE("stack validation") {
    CHECK(code_of([] { D::make_stack({Image(4, 4), Image(4, 5)}, "mixed").validate(); }) ==
          fsd::ErrorCode::MixedShapes);
    CHECK(code_of([] { D::load_stack("/nonexistent/stack.tif", D::StackFormat::TiffStack); }) ==
          fsd::ErrorCode::MissingFile);
}

TEST_CASE("percentile follows linear interpolation") {
    // numpy.percentile([1, 2, 3, 4, 10], [0.1, 50, 99.9, 25]) =
    //   [1.004, 3.0, 9.976, 2.0]
    const std::vector<double> v{10, 2, 4, 1, 3};
    CHECK(D::percentile(v, 0.1) == doctest::Approx(1.004).epsilon(1e-12));
    CHECK(D::percentile(v, 50) == 3.0);
    CHECK(D::percentile(v, 99.9) == doctest::Approx(9.976).epsilon(1e-12));
    CHECK(D::percentile(v, 25) == 2.0);
}

TEST_CASE("normalize round trip") {
    for (uint64_t s = 0; s < 5; ++s) {
        Image arr = testing::random_image(20, 20, 50 + s);
        for (double& v : arr.px) v = 100.0 + 900.0 * v;
        const auto [norm, rec] = D::normalize(arr, 0.1, 99.9);
        for (double v : norm.px) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        const Image unclipped = D::apply_normalization(arr, rec, false);
        const Image back = D::denormalize(unclipped, rec);
        for (size_t i = 0; i < arr.px.size(); ++i) {
            CHECK(std::abs(back.px[i] - arr.px[i]) <= 1e-6 * std::abs(arr.px[i]));
        }
    }
    CHECK(code_of([] { D::normalize(Image(5, 5, 2.0), 0.1, 99.9); }) == fsd::ErrorCode::DegenerateRange);
}

TEST_CASE("split is seeded, disjoint and covering") {
    const auto [train, test] = D::split_indices(100, 0.1, 42);
    CHECK(test.size() == 10);
    CHECK(train.size() == 90);
    std::set<int64_t> all(train.begin(), train.end());
    for (int64_t t : test) CHECK(all.insert(t).second);
    CHECK(all.size() == 100);
    CHECK(std::is_sorted(train.begin(), train.end()));
    CHECK(D::split_indices(100, 0.1, 42) == std::make_pair(train, test));
    CHECK(D::split_indices(100, 0.1, 43).second != test);
}

TEST_CASE("few-shot subsets match an independent draw from the RNG stream") {
    std::vector<int64_t> train;
    for (int64_t i = 0; i < 90; ++i) train.push_back(3 * i);
    for (uint64_t seed : {0ULL, 1ULL, 17ULL}) {
        // Oracle: partial Fisher-Yates from the front, j uniform in [i, n).
        std::vector<int64_t> pool = train;
        fsd::Rng rng = fsd::make_rng(seed);
        for (size_t i = 0; i < 16; ++i) {
            const size_t j = i + static_cast<size_t>(fsd::uniform_index(rng, pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(16);
        std::sort(pool.begin(), pool.end());
        CHECK(D::few_shot_indices(train, 16, seed) == pool);
    }
    CHECK(D::few_shot_indices(train, 16, 5) == D::few_shot_indices(train, 16, 5));
    CHECK(D::few_shot_indices(train, 16, 5) != D::few_shot_indices(train, 16, 6));
    CHECK(code_of([&] { D::few_shot_indices(train, 91, 0); }) == fsd::ErrorCode::SubsetTooLarge);
}

TEST_CASE("few-shot subset keeps the test split") {
    const D::ImageStack s = small_stack(20, 16, 16, 3);
    D::DatasetOptions opts;
    opts.patch_size = 8;
    opts.test_fraction = 0.2;
    const D::DenoisingDataset ds = D::build_dataset(s, D::synthesize_ground_truth(s), opts);
    const D::DenoisingDataset sub = D::few_shot_subset(ds, D::FewShotSpec::parse("6", 9));
    CHECK(sub.n_train() == 6);
    CHECK(sub.test_indices == ds.test_indices);
    for (int64_t i : sub.train_indices) CHECK(std::binary_search(ds.train_indices.begin(), ds.train_indices.end(), i));
    CHECK(D::few_shot_subset(ds, D::FewShotSpec::parse("all", 9)).train_indices == ds.train_indices);
    CHECK(D::FewShotSpec::parse("all", 0).label() == "all");
    CHECK(D::FewShotSpec::parse("16", 0).label() == "16");
}

TEST_CASE("dataset construction") {
    const D::ImageStack s = small_stack(10, 16, 20, 5);
    D::DatasetOptions opts;
    opts.patch_size = 8;
    const D::DenoisingDataset ds = D::build_dataset(s, D::synthesize_ground_truth(s), opts);
    CHECK(ds.pairs.size() == 10);
    CHECK(ds.n_test() == 1);
    for (const auto& p : ds.pairs) CHECK(p.clean.get() == ds.pairs.front().clean.get());
    opts.patch_size = 17;
    CHECK(code_of([&] { D::build_dataset(s, D::synthesize_ground_truth(s), opts); }) ==
          fsd::ErrorCode::PatchTooLarge);
}

TEST_CASE("crops share coordinates") {
    const D::ImageStack s = small_stack(4, 16, 16, 6);
    D::DatasetOptions opts;
    opts.patch_size = 8;
    opts.test_fraction = 0.25;
    D::DenoisingDataset ds = D::build_dataset(s, D::synthesize_ground_truth(s), opts);
    fsd::Rng a = fsd::make_rng(3), b = fsd::make_rng(3);
    const auto [n1, c1] = D::sample_crop(ds, 0, a);
    const auto [n2, c2] = D::sample_crop(ds, 0, b);
    CHECK(n1 == n2);
    CHECK(c1 == c2);
    CHECK(n1.rows == 8);
    // Locate the crop in the full clean image and confirm the noisy crop comes
    // from the same place.
    bool found = false;
    for (int64_t r = 0; r + 8 <= 16 && !found; ++r)
        for (int64_t c = 0; c + 8 <= 16 && !found; ++c)
            if (fsd::crop(*ds.pairs[0].clean, r, r + 8, c, c + 8) == c1) {
                found = fsd::crop(ds.pairs[0].noisy, r, r + 8, c, c + 8) == n1;
            }
    CHECK(found);
}

TEST_CASE("contrastive augmentation") {
    const Image patch = testing::random_image(8, 8, 9);
    const auto v1 = D::contrastive_augment(patch, 4);
    const auto v2 = D::contrastive_augment(patch, 4);
    CHECK(v1.first == v2.first);
    CHECK(v1.second == v2.second);
    CHECK_FALSE(v1.first == v1.second);
    const auto id = D::contrastive_augment(patch, 4, D::AugmentationChain::identity());
    CHECK(id.first == patch);
    CHECK(id.second == patch);
    // Flips and quarter turns permute pixels.
    const auto fl = D::contrastive_augment(patch, 5, D::AugmentationChain::flips_only());
    auto sorted = [](Image i) {
        std::sort(i.px.begin(), i.px.end());
        return i.px;
    };
    CHECK(sorted(fl.first) == sorted(patch));
    for (double v : v1.first.px) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("geometric helpers") {
    const Image a(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(fsd::flip_horizontal(a).px == std::vector<double>{3, 2, 1, 6, 5, 4});
    CHECK(fsd::flip_vertical(a).px == std::vector<double>{4, 5, 6, 1, 2, 3});
    const Image r = fsd::rotate90(a, 1);
    CHECK(r.rows == 3);
    CHECK(r.px == std::vector<double>{3, 6, 2, 5, 1, 4});
    CHECK(fsd::rotate90(a, 4) == a);
    // numpy.pad([1, 2, 3], 2, mode="reflect") = [3, 2, 1, 2, 3, 2, 1]
    const Image row(1, 3, std::vector<double>{1, 2, 3});
    CHECK(fsd::reflect_pad(row, 0, 0, 2, 2).px == std::vector<double>{3, 2, 1, 2, 3, 2, 1});
    CHECK(code_of([&] { fsd::crop(a, 0, 3, 0, 1); }) == fsd::ErrorCode::CropOutOfBounds);
}

TEST_CASE("manifest rebuilds the dataset bit for bit") {
    const auto dir = testing::temp_dir("manifest");
    const D::ImageStack s = small_stack(6, 12, 12, 11);
    fsd::io::write_raw_array(dir / "stack.fsda", s.frames, fsd::io::RawDtype::F64);
    const D::ImageStack loaded = D::load_stack(dir / "stack.fsda", D::StackFormat::RawArrayFile);
    D::DatasetOptions opts;
    opts.patch_size = 8;
    opts.test_fraction = 0.34;
    opts.seed = 3;
    D::DenoisingDataset ds = D::build_dataset(loaded, D::synthesize_ground_truth(loaded), opts);
    ds.name = "tiny";
    ds.source_path = (dir / "stack.fsda").string();
    ds.source_format = D::StackFormat::RawArrayFile;
    D::write_manifest(ds, dir / "tiny.manifest");
    const D::DenoisingDataset back = D::load_from_manifest(dir / "tiny.manifest");
    CHECK(back.name == "tiny");
    CHECK(back.train_indices == ds.train_indices);
    CHECK(back.test_indices == ds.test_indices);
    CHECK(back.normalization.low_value == ds.normalization.low_value);
    CHECK(back.normalization.high_value == ds.normalization.high_value);
    REQUIRE(back.pairs.size() == ds.pairs.size());
    for (size_t i = 0; i < ds.pairs.size(); ++i) {
        CHECK(back.pairs[i].noisy == ds.pairs[i].noisy);
        CHECK(*back.pairs[i].clean == *ds.pairs[i].clean);
        CHECK(back.pairs[i].split == ds.pairs[i].split);
    }
    CHECK(D::manifest_text(back) == D::manifest_text(ds));
}

TEST_CASE("synthetic data") {
    D::SyntheticOptions o;
    const D::DenoisingDataset a = D::make_synthetic_dataset(o);
    const D::DenoisingDataset b = D::make_synthetic_dataset(o);
    CHECK(a.pairs.size() == 16);
    CHECK(a.n_test() == 4);
    for (size_t i = 0; i < a.pairs.size(); ++i) CHECK(a.pairs[i].noisy == b.pairs[i].noisy);
    // Noise is additive and unclipped, so the residual RMS matches sigma.
    double acc = 0.0;
    int64_t n = 0;
    for (const auto& p : a.pairs)
        for (size_t i = 0; i < p.noisy.px.size(); ++i) {
            const double d = p.noisy.px[i] - p.clean->px[i];
            acc += d * d;
            ++n;
        }
    CHECK(std::sqrt(acc / static_cast<double>(n)) == doctest::Approx(0.1).epsilon(0.05));
}
