#include <doctest.h>

#include <cmath>

#include "fsdenoise/error.hpp"
#include "fsdenoise/metrics.hpp"
#include "support.hpp"

namespace M = fsd::metrics;
using fsd::Image;

TEST_CASE("PSNR closed forms") {
    // 10 log10(255^2 / 1) = 48.1308036...
    Image a(16, 16, 100.0), b(16, 16, 101.0);
    CHECK(M::psnr(a, b, 255.0) == doctest::Approx(48.1308036086791).epsilon(1e-9));
    Image c(10, 10, 0.5), d(10, 10, 0.6);
    CHECK(std::abs(M::psnr(c, d, 1.0) - 20.0) < 1e-3);
    CHECK(std::isinf(M::psnr(c, c)));
    CHECK(M::psnr(c, c) > 0);
    CHECK_THROWS_AS(M::psnr(Image(3, 3), Image(3, 4)), fsd::Error);
}

TEST_CASE("NRMSE closed forms") {
    // Checkerboard reference 0/10; candidate 1/9: RMSE 1, range 10.
    Image ref(4, 4), cand(4, 4);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            const bool hi = (r + c) % 2 == 1;
            ref(r, c) = hi ? 10.0 : 0.0;
            cand(r, c) = hi ? 9.0 : 1.0;
        }
    CHECK(M::nrmse(ref, cand, M::NrmseNorm::Range) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(M::nrmse(ref, cand, M::NrmseNorm::Mean) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(M::nrmse(ref, cand, M::NrmseNorm::Euclidean) == doctest::Approx(1.0 / std::sqrt(50.0)).epsilon(1e-12));
    CHECK(M::nrmse(ref, ref) == 0.0);
    try {
        M::nrmse(Image(3, 3, 2.0), Image(3, 3, 1.0));
        FAIL("expected DegenerateReference");
    } catch (const fsd::Error& e) {
        CHECK(e.code() == fsd::ErrorCode::DegenerateReference);
    }
}

TEST_CASE("SSIM metric agrees with brute force") {
    for (uint64_t s = 0; s < 20; ++s) {
        const Image x = testing::random_image(32, 32, 100 + s);
        Image y = testing::random_image(32, 32, 200 + s);
        for (size_t i = 0; i < y.px.size(); ++i) y.px[i] = 0.7 * x.px[i] + 0.3 * y.px[i];
        CHECK(std::abs(M::ssim_metric(x, y) - testing::brute_force_ssim(x, y)) < 1e-4);
    }
    const Image x = testing::random_image(16, 16, 1);
    CHECK(M::ssim_metric(x, x) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("metrics are symmetric where expected") {
    const Image x = testing::random_image(24, 24, 3), y = testing::random_image(24, 24, 4);
    CHECK(M::psnr(x, y) == M::psnr(y, x));
    CHECK(M::ssim_metric(x, y) == doctest::Approx(M::ssim_metric(y, x)).epsilon(1e-12));
}

TEST_CASE("report CSV round trip and aggregation") {
    M::MetricReport r;
    r.rows.push_back({"ds", "CL", "16", 3, 30.5, 0.8, 0.05});
    r.rows.push_back({"ds", "CL", "16", 1, 31.5, 0.9, 0.03});
    r.rows.push_back({"ds", "baseline", "all", 0, 1.0 / 3.0, 0.1, 0.2});
    r.finalize();
    CHECK(r.rows.front().experiment == "CL");
    CHECK(r.rows.front().image_id == 1);
    REQUIRE(r.aggregates.size() == 2);
    CHECK(r.aggregates[0].count == 2);
    CHECK(r.aggregates[0].psnr == 31.0);
    CHECK(r.aggregates[0].nrmse == doctest::Approx(0.04));
    const std::string text = M::report_csv(r);
    CHECK(text.rfind(M::kReportHeader, 0) == 0);
    M::MetricReport back = M::parse_report_csv(text);
    back.finalize();
    REQUIRE(back.rows.size() == 3);
    CHECK(back.rows[2].psnr == 1.0 / 3.0);
    CHECK(M::report_csv(back) == text);
    try {
        M::parse_report_csv("a,b,c\n1,2,3\n");
        FAIL("expected SchemaMismatch");
    } catch (const fsd::Error& e) {
        CHECK(e.code() == fsd::ErrorCode::SchemaMismatch);
    }
}

TEST_CASE("evaluate scores every test frame") {
    fsd::data::SyntheticOptions o;
    o.count = 8;
    o.size = 32;
    o.patch_size = 32;
    const auto ds = fsd::data::make_synthetic_dataset(o);
    M::EvaluationParams p;
    p.dataset = "syn";
    p.experiment = "oracle";
    // The identity model scores the noisy baseline.
    const M::MetricReport id = M::evaluate([](const Image& f) { return f; }, ds, p);
    REQUIRE(id.rows.size() == static_cast<size_t>(ds.n_test()));
    for (const auto& row : id.rows) {
        const auto& pair = ds.pairs[static_cast<size_t>(row.image_id)];
        CHECK(row.psnr == M::psnr(*pair.clean, pair.noisy));
    }
    fsd::data::DenoisingDataset empty = ds;
    empty.test_indices.clear();
    try {
        M::evaluate([](const Image& f) { return f; }, empty, p);
        FAIL("expected EmptyTestSet");
    } catch (const fsd::Error& e) {
        CHECK(e.code() == fsd::ErrorCode::EmptyTestSet);
    }
}
