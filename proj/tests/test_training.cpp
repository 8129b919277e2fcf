#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "fsdenoise/error.hpp"
#include "fsdenoise/io.hpp"
#include "fsdenoise/training.hpp"
#include "support.hpp"

namespace T = fsd::training;
namespace fs = std::filesystem;

namespace {

T::TrainConfig tiny_config() {
    T::TrainConfig c;
    c.batch_size = 4;
    c.epochs = 4;
    c.decay_start_epoch = 2;
    c.lr = 1e-3;
    c.generator.n_down = c.generator.n_up = 5;
    c.generator.base_channels = 4;
    c.generator.max_channels = 16;
    c.generator.input_size = 32;
    c.discriminator.base_channels = 4;
    c.head.hidden_dim = 8;
    c.head.output_dim = 4;
    return c;
}

const fsd::data::DenoisingDataset& tiny_dataset() {
    static const fsd::data::DenoisingDataset ds = [] {
        fsd::data::SyntheticOptions o;
        o.count = 8;
        o.size = 40;
        o.patch_size = 32;
        return fsd::data::make_synthetic_dataset(o);
    }();
    return ds;
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::istringstream in(fsd::io::read_text_file(p));
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

T::Batch first_batch(const T::TrainState& s, uint64_t seed = 0) {
    fsd::Rng rng = fsd::make_rng(seed);
    const auto& ds = tiny_dataset();
    std::vector<int64_t> idx(ds.train_indices.begin(), ds.train_indices.begin() + s.config.base_per_step());
    return T::make_batch(ds, idx, s.config, rng);
}

std::vector<std::vector<double>> values_of(const std::vector<fsd::models::NamedParameter>& ps) {
    std::vector<std::vector<double>> out;
    for (const auto& p : ps) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

} // namespace

TEST_CASE("learning-rate schedule") {
    T::TrainConfig c;
    CHECK(T::lr_schedule(0, c) == 2e-4);
    CHECK(T::lr_schedule(500, c) == 2e-4);
    CHECK(T::lr_schedule(750, c) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(T::lr_schedule(999, c) == doctest::Approx(2e-4 / 500).epsilon(1e-12));
}

TEST_CASE("config validation and text round trip") {
    T::TrainConfig c = tiny_config();
    c.batch_size = 3;
    CHECK_THROWS_AS(c.validate(), fsd::Error);
    c.ablation.use_cl = false;
    CHECK_NOTHROW(c.validate());
    CHECK(c.base_per_step() == 3);

    T::TrainConfig d = tiny_config();
    d.weights.tau = 0.25;
    d.ablation.use_tv = false;
    d.generator.dropout_blocks.clear();
    const std::string text = T::to_text(d);
    const auto sections = fsd::io::parse_key_value(text);
    const T::TrainConfig back = T::apply_overrides(T::TrainConfig{}, sections.front());
    CHECK(T::to_text(back) == text);
    for (const auto& [k, v] : sections.front().entries) CHECK(T::is_config_key(k));
    CHECK_FALSE(T::is_config_key("bogus"));
}

TEST_CASE("checkpoint round trip is bit-exact") {
    T::TrainState s(tiny_config());
    T::train_step(s, first_batch(s), 1e-3);
    const std::string bytes = T::encode_checkpoint(s);
    const T::TrainState back = T::decode_checkpoint(bytes);
    CHECK(T::encode_checkpoint(back) == bytes);
    CHECK(back.global_step == 1);
    CHECK(back.opt_generator.steps() == 1);
    CHECK(values_of(back.generator.parameters()) == values_of(s.generator.parameters()));
    CHECK(back.opt_discriminator.second_moments() == s.opt_discriminator.second_moments());
    CHECK(back.rng == s.rng);

    auto code = [](const std::string& b) {
        try {
            T::decode_checkpoint(b);
        } catch (const fsd::Error& e) {
            return e.code();
        }
        return fsd::ErrorCode::InvalidConfig;
    };
    CHECK(code("XXXXXXXX" + bytes.substr(8)) == fsd::ErrorCode::CorruptFile);
    CHECK(code(bytes.substr(0, bytes.size() / 2)) == fsd::ErrorCode::CorruptFile);

    const auto dir = testing::temp_dir("ckpt");
    T::save_checkpoint(s, dir / "a.ckpt");
    CHECK(T::encode_checkpoint(T::load_checkpoint(dir / "a.ckpt")) == bytes);
}

TEST_CASE("one step produces gradients for every parameter") {
    T::TrainState s(tiny_config());
    const auto g0 = values_of(s.generator.parameters());
    const auto d0 = values_of(s.discriminator.parameters());
    const auto h0 = values_of(s.head.parameters());
    const T::StepBreakdown b = T::train_step(s, first_batch(s), 1e-3);
    CHECK(b.head_grad_norm > 0.0);
    auto all_moved = [](const std::vector<std::vector<double>>& before,
                        const std::vector<fsd::models::NamedParameter>& after) {
        for (size_t i = 0; i < before.size(); ++i) {
            const auto& now = after[i].tensor.data();
            bool moved = false;
            for (size_t k = 0; k < before[i].size(); ++k) moved = moved || now[k] != before[i][k];
            if (!moved) {
                MESSAGE("unchanged parameter " << after[i].name);
                return false;
            }
        }
        return true;
    };
    CHECK(all_moved(g0, s.generator.parameters()));
    CHECK(all_moved(d0, s.discriminator.parameters()));
    CHECK(all_moved(h0, s.head.parameters()));
    for (double v : {b.gan_g, b.gan_d, b.l1, b.ssim, b.tv, b.cl, b.total}) CHECK(std::isfinite(v));
}

TEST_CASE("discriminator and generator updates are decoupled") {
    T::TrainState s(tiny_config());
    const T::Batch batch = first_batch(s);
    const auto fwd = T::generator_forward(s, batch);
    const auto g0 = values_of(s.generator.parameters());
    const auto h0 = values_of(s.head.parameters());
    T::discriminator_step(s, batch, fwd.fake, 1e-3);
    CHECK(values_of(s.generator.parameters()) == g0);
    CHECK(values_of(s.head.parameters()) == h0);
    const auto d1 = values_of(s.discriminator.parameters());
    T::generator_step(s, batch, fwd, 1e-3);
    CHECK(values_of(s.discriminator.parameters()) == d1);
    CHECK(values_of(s.generator.parameters()) != g0);
    for (const auto& p : s.discriminator.parameters())
        for (double g : p.tensor.grad()) CHECK(g == 0.0);
}

TEST_CASE("disabled terms contribute zero") {
    T::TrainConfig c = tiny_config();
    c.ablation = {false, false, false};
    T::TrainState s(c);
    const T::Batch batch = first_batch(s);
    CHECK_FALSE(batch.partner.defined());
    CHECK(batch.noisy.dim(0) == 4);
    const T::StepBreakdown b = T::train_step(s, batch, 1e-3);
    CHECK(b.ssim == 0.0);
    CHECK(b.tv == 0.0);
    CHECK(b.cl == 0.0);
    CHECK(b.head_grad_norm == 0.0);
    CHECK(b.total == doctest::Approx(b.gan_g + b.l1).epsilon(1e-12));
}

TEST_CASE("a non-finite term aborts the step and leaves the state untouched") {
    T::TrainState s(tiny_config());
    T::train_step(s, first_batch(s), 1e-3);
    const std::string before = T::encode_checkpoint(s);
    T::LossBackend poisoned = T::LossBackend::standard();
    poisoned.dssim = [](const fsd::losses::ImageBatchView& a, const fsd::losses::ImageBatchView&,
                        const fsd::losses::SSIMParams&) {
        return fsd::losses::ValueGrad{std::nan(""), std::vector<double>(a.data.size(), 0.0)};
    };
    try {
        T::train_step(s, first_batch(s, 1), 1e-3, poisoned);
        FAIL("expected NonFiniteLoss");
    } catch (const fsd::Error& e) {
        CHECK(e.code() == fsd::ErrorCode::NonFiniteLoss);
        CHECK(std::string(e.what()).find("L_SSIM") != std::string::npos);
        CHECK(fsd::exit_code_for(e.code()) == 4);
    }
    CHECK(T::encode_checkpoint(s) == before);
}

TEST_CASE("divergence during fit writes the last good checkpoint") {
    const auto dir = testing::temp_dir("diverge");
    T::LossBackend poisoned = T::LossBackend::standard();
    int calls = 0;
    poisoned.tv = [&](const fsd::losses::ImageBatchView& v) {
        auto r = fsd::losses::tv_loss_grad(v);
        if (++calls == 3) r.value = INFINITY;
        return r;
    };
    T::FitOptions opts;
    opts.checkpoint_dir = dir;
    opts.backend = &poisoned;
    CHECK_THROWS_AS(T::fit(tiny_dataset(), tiny_config(), opts), fsd::Error);
    const T::TrainState last = T::load_checkpoint(dir / "last_good.ckpt");
    CHECK(last.global_step == 2);
}

TEST_CASE("fit is deterministic for a fixed seed") {
    const auto dir = testing::temp_dir("determinism");
    T::FitOptions a, b;
    a.loss_csv = dir / "a.csv";
    b.loss_csv = dir / "b.csv";
    const T::TrainState sa = T::fit(tiny_dataset(), tiny_config(), a);
    const T::TrainState sb = T::fit(tiny_dataset(), tiny_config(), b);
    const auto la = lines_of(a.loss_csv), lb = lines_of(b.loss_csv);
    REQUIRE(la.size() == 1 + 4 * 3);
    CHECK(la.front() == T::kLossCsvHeader);
    for (size_t i = 0; i < 11; ++i) CHECK(la[i] == lb[i]);
    CHECK(T::encode_checkpoint(sa) == T::encode_checkpoint(sb));

    T::TrainConfig other = tiny_config();
    other.seed = 1;
    T::FitOptions c;
    c.loss_csv = dir / "c.csv";
    T::fit(tiny_dataset(), other, c);
    CHECK(lines_of(c.loss_csv)[1] != la[1]);
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
    const auto dir = testing::temp_dir("resume");
    T::FitOptions full;
    full.loss_csv = dir / "full.csv";
    const T::TrainState straight = T::fit(tiny_dataset(), tiny_config(), full);

    T::FitOptions first;
    first.loss_csv = dir / "split.csv";
    first.checkpoint_dir = dir / "ckpt";
    first.checkpoint_every = 1;
    first.on_epoch_end = [](const T::TrainState& s) { return s.epoch < 2; };
    T::fit(tiny_dataset(), tiny_config(), first);
    REQUIRE(fs::exists(dir / "ckpt" / "epoch_000002.ckpt"));

    T::FitOptions second;
    second.loss_csv = dir / "split.csv";
    const T::TrainState resumed =
        T::fit(tiny_dataset(), tiny_config(), second, T::load_checkpoint(dir / "ckpt" / "epoch_000002.ckpt"));
    CHECK(resumed.epoch == 4);
    CHECK(T::encode_checkpoint(resumed) == T::encode_checkpoint(straight));
    CHECK(lines_of(dir / "split.csv") == lines_of(full.loss_csv));
}

TEST_CASE("small subsets are recycled to fill a batch") {
    const auto sub = fsd::data::few_shot_subset(tiny_dataset(), fsd::data::FewShotSpec::parse("3", 0));
    T::TrainConfig c = tiny_config();
    c.batch_size = 16;
    c.epochs = 2;
    c.decay_start_epoch = 2;
    int steps = 0;
    T::FitOptions opts;
    opts.on_step = [&](const T::StepBreakdown& b) {
        ++steps;
        CHECK(std::isfinite(b.total));
    };
    const T::TrainState s = T::fit(sub, c, opts);
    CHECK(steps == 2);
    CHECK(s.global_step == 2);

    c.steps_per_epoch = 5;
    steps = 0;
    T::fit(sub, c, opts);
    CHECK(steps == 10);
}

TEST_CASE("a small generator step lowers the generator objective") {
    int failures = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        T::TrainConfig c = tiny_config();
        c.seed = seed;
        c.generator.dropout_rate = 0.0;
        T::TrainState s(c);
        const T::Batch batch = first_batch(s, seed);
        const auto before = T::generator_step(s, batch, T::generator_forward(s, batch), 1e-5);
        const auto after = T::generator_step(s, batch, T::generator_forward(s, batch), 1e-5);
        if (!(after.total < before.total)) ++failures;
    }
    CHECK(failures <= 2);
}
