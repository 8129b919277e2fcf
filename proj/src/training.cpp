#include "fsdenoise/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "fsdenoise/error.hpp"

namespace fsd::training {

using nn::Tensor;

namespace {

void invalid(const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); }

std::string fmt(double v) { return io::format_double(v); }
std::string fmt_bool(bool b) { return b ? "true" : "false"; }

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

losses::ImageBatchView view_of(const Tensor& t) {
    return {t.data(), t.dim(0), t.dim(2), t.dim(3)};
}

[[noreturn]] void diverged(const std::string& term, double value, int64_t iteration) {
    throw Error(ErrorCode::NonFiniteLoss,
                term + " = " + fmt(value) + " at iteration " + std::to_string(iteration));
}

} // namespace

// ---- config ------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size < 1) {
        invalid("batch_size must be positive");
    }
    if (ablation.use_cl && base_per_step() < 2) {
        throw Error(ErrorCode::BatchTooSmall,
                    "contrastive training needs batch_size >= 4, got " + std::to_string(batch_size));
    }
    if (epochs < 1) {
        invalid("epochs must be positive");
    }
    if (decay_start_epoch < 0 || decay_start_epoch > epochs) {
        invalid("decay_start_epoch must lie in [0, epochs]");
    }
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        invalid("lr must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        invalid("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) {
        invalid("adam_eps must be positive");
    }
    if (steps_per_epoch < 0) {
        invalid("steps_per_epoch must be non-negative");
    }
    weights.validate();
    generator.validate();
    discriminator.validate();
    ssim.validate();
    models::ProjectionHeadConfig h = head;
    h.input_dim = generator.channels_at(generator.n_down - 1);
    h.validate();
}

std::string to_text(const TrainConfig& c) {
    std::ostringstream os;
    auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << "\n"; };
    kv("batch_size", std::to_string(c.batch_size));
    kv("epochs", std::to_string(c.epochs));
    kv("decay_start_epoch", std::to_string(c.decay_start_epoch));
    kv("lr", fmt(c.lr));
    kv("beta1", fmt(c.beta1));
    kv("beta2", fmt(c.beta2));
    kv("adam_eps", fmt(c.adam_eps));
    kv("lambda_gan", fmt(c.weights.lambda_gan));
    kv("lambda_l1", fmt(c.weights.lambda_l1));
    kv("lambda_ssim", fmt(c.weights.lambda_ssim));
    kv("lambda_tv", fmt(c.weights.lambda_tv));
    kv("lambda_cl", fmt(c.weights.lambda_cl));
    kv("tau", fmt(c.weights.tau));
    kv("seed", std::to_string(c.seed));
    kv("use_tv", fmt_bool(c.ablation.use_tv));
    kv("use_ssim", fmt_bool(c.ablation.use_ssim));
    kv("use_cl", fmt_bool(c.ablation.use_cl));
    kv("steps_per_epoch", std::to_string(c.steps_per_epoch));

    const auto& g = c.generator;
    kv("generator.n_down", std::to_string(g.n_down));
    kv("generator.n_up", std::to_string(g.n_up));
    kv("generator.base_channels", std::to_string(g.base_channels));
    kv("generator.max_channels", std::to_string(g.max_channels));
    kv("generator.in_channels", std::to_string(g.in_channels));
    kv("generator.out_channels", std::to_string(g.out_channels));
    kv("generator.dropout_rate", fmt(g.dropout_rate));
    std::string blocks;
    for (int b : g.dropout_blocks) {
        blocks += (blocks.empty() ? "" : ",") + std::to_string(b);
    }
    kv("generator.dropout_blocks", blocks.empty() ? "none" : blocks);
    kv("generator.input_size", std::to_string(g.input_size));
    kv("generator.use_skips", fmt_bool(g.use_skips));

    kv("discriminator.n_layers", std::to_string(c.discriminator.n_layers));
    kv("discriminator.base_channels", std::to_string(c.discriminator.base_channels));
    kv("head.hidden_dim", std::to_string(c.head.hidden_dim));
    kv("head.output_dim", std::to_string(c.head.output_dim));

    kv("ssim.window_size", std::to_string(c.ssim.window_size));
    kv("ssim.sigma", fmt(c.ssim.sigma));
    kv("ssim.k1", fmt(c.ssim.k1));
    kv("ssim.k2", fmt(c.ssim.k2));
    kv("ssim.data_range", fmt(c.ssim.data_range));
    kv("ssim.mode", c.ssim.mode == losses::SsimWindow::Gaussian ? "gaussian" : "global");

    const auto& a = c.augmentation;
    kv("aug.p_flip_horizontal", fmt(a.p_flip_horizontal));
    kv("aug.p_flip_vertical", fmt(a.p_flip_vertical));
    kv("aug.p_rotate90", fmt(a.p_rotate90));
    kv("aug.p_intensity", fmt(a.p_intensity));
    kv("aug.intensity_low", fmt(a.intensity_low));
    kv("aug.intensity_high", fmt(a.intensity_high));
    kv("aug.p_noise", fmt(a.p_noise));
    kv("aug.noise_sigma", fmt(a.noise_sigma));
    kv("aug.clip_unit", fmt_bool(a.clip_unit));
    return os.str();
}

bool is_config_key(const std::string& key) {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> out;
        const auto sections = io::parse_key_value(to_text(TrainConfig{}));
        for (const auto& [k, v] : sections.front().entries) {
            out.push_back(k);
        }
        return out;
    }();
    return std::find(keys.begin(), keys.end(), key) != keys.end();
}

TrainConfig apply_overrides(TrainConfig c, const io::Section& s) {
    auto i32 = [&](const char* k, int& dst) {
        if (s.has(k)) {
            dst = static_cast<int>(io::parse_int(s.get(k), k));
        }
    };
    auto f64 = [&](const char* k, double& dst) {
        if (s.has(k)) {
            dst = io::parse_double(s.get(k), k);
        }
    };
    auto flag = [&](const char* k, bool& dst) {
        if (s.has(k)) {
            dst = io::parse_bool(s.get(k), k);
        }
    };
    i32("batch_size", c.batch_size);
    i32("epochs", c.epochs);
    i32("decay_start_epoch", c.decay_start_epoch);
    f64("lr", c.lr);
    f64("beta1", c.beta1);
    f64("beta2", c.beta2);
    f64("adam_eps", c.adam_eps);
    f64("lambda_gan", c.weights.lambda_gan);
    f64("lambda_l1", c.weights.lambda_l1);
    f64("lambda_ssim", c.weights.lambda_ssim);
    f64("lambda_tv", c.weights.lambda_tv);
    f64("lambda_cl", c.weights.lambda_cl);
    f64("tau", c.weights.tau);
    if (s.has("seed")) {
        c.seed = static_cast<uint64_t>(std::stoull(s.get("seed")));
    }
    flag("use_tv", c.ablation.use_tv);
    flag("use_ssim", c.ablation.use_ssim);
    flag("use_cl", c.ablation.use_cl);
    i32("steps_per_epoch", c.steps_per_epoch);

    auto& g = c.generator;
    i32("generator.n_down", g.n_down);
    i32("generator.n_up", g.n_up);
    i32("generator.base_channels", g.base_channels);
    i32("generator.max_channels", g.max_channels);
    i32("generator.in_channels", g.in_channels);
    i32("generator.out_channels", g.out_channels);
    f64("generator.dropout_rate", g.dropout_rate);
    if (s.has("generator.dropout_blocks")) {
        g.dropout_blocks.clear();
        const std::string v = s.get("generator.dropout_blocks");
        if (v != "none") {
            for (const auto& item : io::split_list(v)) {
                g.dropout_blocks.insert(static_cast<int>(io::parse_int(item, "generator.dropout_blocks")));
            }
        }
    }
    i32("generator.input_size", g.input_size);
    flag("generator.use_skips", g.use_skips);

    i32("discriminator.n_layers", c.discriminator.n_layers);
    i32("discriminator.base_channels", c.discriminator.base_channels);
    i32("head.hidden_dim", c.head.hidden_dim);
    i32("head.output_dim", c.head.output_dim);

    i32("ssim.window_size", c.ssim.window_size);
    f64("ssim.sigma", c.ssim.sigma);
    f64("ssim.k1", c.ssim.k1);
    f64("ssim.k2", c.ssim.k2);
    f64("ssim.data_range", c.ssim.data_range);
    if (s.has("ssim.mode")) {
        const std::string m = s.get("ssim.mode");
        if (m == "gaussian") {
            c.ssim.mode = losses::SsimWindow::Gaussian;
        } else if (m == "global") {
            c.ssim.mode = losses::SsimWindow::Global;
        } else {
            invalid("unknown ssim.mode '" + m + "'");
        }
    }

    auto& a = c.augmentation;
    f64("aug.p_flip_horizontal", a.p_flip_horizontal);
    f64("aug.p_flip_vertical", a.p_flip_vertical);
    f64("aug.p_rotate90", a.p_rotate90);
    f64("aug.p_intensity", a.p_intensity);
    f64("aug.intensity_low", a.intensity_low);
    f64("aug.intensity_high", a.intensity_high);
    f64("aug.p_noise", a.p_noise);
    f64("aug.noise_sigma", a.noise_sigma);
    flag("aug.clip_unit", a.clip_unit);
    return c;
}

// ---- Adam ----------------------------------------------------------------------------

Adam::Adam(std::vector<models::NamedParameter> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) {
        p.tensor.zero_grad();
    }
}

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const double step_size = lr / bc1;
    const double sqrt_bc2 = std::sqrt(bc2);
    for (size_t k = 0; k < params_.size(); ++k) {
        auto g = params_[k].tensor.grad();
        if (g.empty()) {
            continue;
        }
        auto w = params_[k].tensor.mutable_data();
        auto& m = m_[k];
        auto& v = v_[k];
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_bc2 + eps_);
        }
    }
}

Adam::Snapshot Adam::snapshot() const {
    Snapshot s;
    for (const auto& p : params_) {
        s.values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    }
    s.m = m_;
    s.v = v_;
    s.t = t_;
    return s;
}

void Adam::restore(const Snapshot& s) {
    for (size_t k = 0; k < params_.size(); ++k) {
        auto w = params_[k].tensor.mutable_data();
        std::copy(s.values[k].begin(), s.values[k].end(), w.begin());
    }
    m_ = s.m;
    v_ = s.v;
    t_ = s.t;
}

// ---- state ------------------------------------------------------------------------------

namespace {

models::ProjectionHeadConfig head_config(const TrainConfig& cfg) {
    models::ProjectionHeadConfig h = cfg.head;
    h.input_dim = cfg.generator.channels_at(cfg.generator.n_down - 1);
    return h;
}

template <typename Model, typename Config>
Model build(const Config& c, uint64_t seed, uint64_t stream) {
    Rng rng = make_rng(seed, stream);
    return Model(c, rng);
}

std::vector<models::NamedParameter> concat(std::vector<models::NamedParameter> a,
                                           const std::vector<models::NamedParameter>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

} // namespace

TrainState::TrainState(const TrainConfig& cfg)
    : config(cfg),
      generator(build<models::Generator>(cfg.generator, cfg.seed, 1)),
      discriminator(build<models::Discriminator>(cfg.discriminator, cfg.seed, 2)),
      head(build<models::ProjectionHead>(head_config(cfg), cfg.seed, 3)),
      rng(make_rng(cfg.seed, 4)) {
    config.head = head_config(cfg);
    opt_generator = Adam(concat(generator.parameters(), head.parameters()), cfg.beta1, cfg.beta2, cfg.adam_eps);
    opt_discriminator = Adam(discriminator.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps);
}

TrainState TrainState::clone() const { return decode_checkpoint(encode_checkpoint(*this)); }

TrainState init_state(const TrainConfig& cfg) {
    cfg.validate();
    return TrainState(cfg);
}

// ---- checkpoints --------------------------------------------------------------------------

namespace {

void put_u64(std::string& out, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    }
    out.append(b, 8);
}

void put_f64(std::string& out, double v) {
    uint64_t bits = 0;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

void put_str(std::string& out, const std::string& s) {
    put_u64(out, s.size());
    out += s;
}

struct Reader {
    const std::string& bytes;
    size_t pos = 0;

    void need(size_t n) {
        if (pos + n > bytes.size()) {
            throw Error(ErrorCode::CorruptFile, "checkpoint truncated");
        }
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v = 0.0;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const uint64_t n = u64();
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

struct Array {
    nn::Shape shape;
    std::vector<double> values;
};

void put_array(std::string& out, const std::string& name, const nn::Shape& shape, std::span<const double> values) {
    put_str(out, name);
    put_u64(out, shape.size());
    for (int64_t d : shape) {
        put_u64(out, static_cast<uint64_t>(d));
    }
    for (double v : values) {
        put_f64(out, v);
    }
}

void put_moments(std::string& out, const std::string& prefix, const Adam& opt) {
    const auto& params = opt.parameters();
    for (size_t k = 0; k < params.size(); ++k) {
        put_array(out, prefix + ".m." + params[k].name, params[k].tensor.shape(), opt.first_moments()[k]);
        put_array(out, prefix + ".v." + params[k].name, params[k].tensor.shape(), opt.second_moments()[k]);
    }
}

const Array& find(const std::map<std::string, Array>& arrays, const std::string& name, const nn::Shape& shape) {
    auto it = arrays.find(name);
    if (it == arrays.end()) {
        throw Error(ErrorCode::SchemaMismatch, "checkpoint has no array '" + name + "'");
    }
    if (it->second.shape != shape) {
        throw Error(ErrorCode::SchemaMismatch, "array '" + name + "' has shape " + nn::shape_string(it->second.shape) +
                                                   ", expected " + nn::shape_string(shape));
    }
    return it->second;
}

void load_moments(const std::map<std::string, Array>& arrays, const std::string& prefix, Adam& opt) {
    const auto& params = opt.parameters();
    for (size_t k = 0; k < params.size(); ++k) {
        opt.first_moments()[k] = find(arrays, prefix + ".m." + params[k].name, params[k].tensor.shape()).values;
        opt.second_moments()[k] = find(arrays, prefix + ".v." + params[k].name, params[k].tensor.shape()).values;
    }
}

} // namespace

std::string encode_checkpoint(const TrainState& state) {
    std::string header = to_text(state.config);
    header += "epoch = " + std::to_string(state.epoch) + "\n";
    header += "global_step = " + std::to_string(state.global_step) + "\n";
    header += "adam.g.steps = " + std::to_string(state.opt_generator.steps()) + "\n";
    header += "adam.d.steps = " + std::to_string(state.opt_discriminator.steps()) + "\n";
    header += "rng = " + serialize_rng(state.rng) + "\n";

    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    put_str(out, header);
    const auto g = state.opt_generator.parameters();
    const auto d = state.opt_discriminator.parameters();
    put_u64(out, 3 * (g.size() + d.size()));
    for (const auto* group : {&g, &d}) {
        for (const auto& p : *group) {
            put_array(out, p.name, p.tensor.shape(), p.tensor.data());
        }
    }
    put_moments(out, "adam.g", state.opt_generator);
    put_moments(out, "adam.d", state.opt_discriminator);
    return out;
}

TrainState decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < sizeof(kCheckpointMagic) ||
        std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw Error(ErrorCode::CorruptFile, "not a checkpoint (bad magic)");
    }
    Reader r{bytes, sizeof(kCheckpointMagic)};
    const auto sections = io::parse_key_value(r.str());
    const io::Section& h = sections.front();
    TrainConfig cfg = apply_overrides(TrainConfig{}, h);

    std::map<std::string, Array> arrays;
    const uint64_t count = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = r.str();
        Array a;
        const uint64_t rank = r.u64();
        if (rank > 8) {
            throw Error(ErrorCode::CorruptFile, "implausible rank for array '" + name + "'");
        }
        for (uint64_t k = 0; k < rank; ++k) {
            a.shape.push_back(static_cast<int64_t>(r.u64()));
        }
        const int64_t n = nn::numel(a.shape);
        r.need(static_cast<size_t>(n) * 8);
        a.values.resize(n);
        for (auto& v : a.values) {
            v = r.f64();
        }
        arrays.emplace(std::move(name), std::move(a));
    }

    TrainState state(cfg);
    for (auto* opt : {&state.opt_generator, &state.opt_discriminator}) {
        for (const auto& p : opt->parameters()) {
            const Array& a = find(arrays, p.name, p.tensor.shape());
            Tensor t = p.tensor;
            std::copy(a.values.begin(), a.values.end(), t.mutable_data().begin());
        }
    }
    load_moments(arrays, "adam.g", state.opt_generator);
    load_moments(arrays, "adam.d", state.opt_discriminator);
    state.opt_generator.set_steps(io::parse_int(h.get("adam.g.steps"), "adam.g.steps"));
    state.opt_discriminator.set_steps(io::parse_int(h.get("adam.d.steps"), "adam.d.steps"));
    state.epoch = io::parse_int(h.get("epoch"), "epoch");
    state.global_step = io::parse_int(h.get("global_step"), "global_step");
    state.rng = deserialize_rng(h.get("rng"));
    return state;
}

void save_checkpoint(const TrainState& state, const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw Error(ErrorCode::MissingFile, "cannot write " + tmp.string());
        }
        const std::string bytes = encode_checkpoint(state);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    fs::rename(tmp, path);
}

TrainState load_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error(ErrorCode::MissingFile, "cannot open checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return decode_checkpoint(ss.str());
}

// ---- training step --------------------------------------------------------------------------

Batch make_batch(const data::DenoisingDataset& ds, const std::vector<int64_t>& pair_indices, const TrainConfig& cfg,
                 Rng& rng) {
    const int64_t n = static_cast<int64_t>(pair_indices.size());
    const int64_t p = ds.patch_size;
    std::vector<double> noisy, clean, partner;
    noisy.reserve(n * p * p);
    clean.reserve(n * p * p);
    for (int64_t idx : pair_indices) {
        auto [x, y] = data::sample_crop(ds, idx, rng);
        noisy.insert(noisy.end(), x.px.begin(), x.px.end());
        clean.insert(clean.end(), y.px.begin(), y.px.end());
        if (cfg.ablation.use_cl) {
            const uint64_t view_seed = rng();
            Image v = data::contrastive_augment(x, view_seed, cfg.augmentation).first;
            partner.insert(partner.end(), v.px.begin(), v.px.end());
        }
    }
    Batch b;
    b.noisy = Tensor::from({n, 1, p, p}, std::move(noisy));
    b.clean = Tensor::from({n, 1, p, p}, std::move(clean));
    if (cfg.ablation.use_cl) {
        b.partner = Tensor::from({n, 1, p, p}, std::move(partner));
    }
    return b;
}

std::string loss_csv_row(const StepBreakdown& b) {
    return std::to_string(b.iteration) + "," + fmt(b.gan_g) + "," + fmt(b.gan_d) + "," + fmt(b.l1) + "," +
           fmt(b.ssim) + "," + fmt(b.tv) + "," + fmt(b.cl) + "," + fmt(b.total);
}

const LossBackend& LossBackend::standard() {
    static const LossBackend backend{
        [](std::span<const double> r, std::span<const double> f, losses::AdversarialSide s) {
            return losses::adversarial_loss_grad(r, f, s);
        },
        [](std::span<const double> g, std::span<const double> t) { return losses::l1_loss_grad(g, t); },
        [](const losses::ImageBatchView& g, const losses::ImageBatchView& t, const losses::SSIMParams& p) {
            return losses::dssim_loss_grad(g, t, p);
        },
        [](const losses::ImageBatchView& y) { return losses::tv_loss_grad(y); },
        [](std::span<const double> e, int64_t rows, int64_t dim, std::span<const int64_t> pairs, double tau) {
            return losses::ntxent_loss_grad(e, rows, dim, pairs, tau);
        },
    };
    return backend;
}

double lr_schedule(int64_t epoch, const TrainConfig& cfg) {
    if (cfg.epochs <= cfg.decay_start_epoch) {
        return cfg.lr;
    }
    const double decay = static_cast<double>(std::max<int64_t>(0, epoch - cfg.decay_start_epoch)) /
                         static_cast<double>(cfg.epochs - cfg.decay_start_epoch);
    return cfg.lr * std::max(0.0, 1.0 - decay);
}

GeneratorForward generator_forward(TrainState& state, const Batch& batch) {
    GeneratorForward out;
    const int64_t n = batch.noisy.dim(0);
    if (state.config.ablation.use_cl) {
        const Tensor both = nn::concat_batch(batch.noisy, batch.partner);
        auto g = state.generator.forward(both, models::Mode::Train, &state.rng);
        out.fake = nn::slice_batch(g.image, 0, n);
        out.embeddings = state.head.forward(g.bottleneck);
    } else {
        out.fake = state.generator.forward(batch.noisy, models::Mode::Train, &state.rng).image;
    }
    return out;
}

double discriminator_step(TrainState& state, const Batch& batch, const Tensor& fake, double lr,
                          const LossBackend& backend) {
    state.opt_discriminator.zero_grad();
    const Tensor real_logits = state.discriminator.forward(batch.noisy, batch.clean);
    const Tensor fake_logits = state.discriminator.forward(batch.noisy, fake.detach());
    auto adv = backend.adversarial(real_logits.data(), fake_logits.data(), losses::AdversarialSide::Discriminator);
    if (!std::isfinite(adv.value)) {
        diverged("L_GAN_D", adv.value, state.global_step + 1);
    }
    Tensor loss = nn::external_scalar(adv.value, {real_logits, fake_logits}, {adv.d_real, adv.d_fake});
    loss.backward();
    for (const auto& p : state.opt_discriminator.parameters()) {
        if (!all_finite(p.tensor.grad())) {
            diverged("L_GAN_D gradient", NAN, state.global_step + 1);
        }
    }
    state.opt_discriminator.step(lr);
    state.opt_discriminator.zero_grad();
    return adv.value;
}

StepBreakdown generator_step(TrainState& state, const Batch& batch, const GeneratorForward& fwd, double lr,
                             const LossBackend& backend) {
    const TrainConfig& cfg = state.config;
    const int64_t iteration = state.global_step + 1;
    state.opt_generator.zero_grad();

    StepBreakdown b;
    b.iteration = iteration;
    std::vector<Tensor> terms;
    std::vector<double> weights;
    auto add = [&](const char* name, double& slot, double value, double weight, std::vector<Tensor> inputs,
                   std::vector<std::vector<double>> grads) {
        if (!std::isfinite(value)) {
            diverged(name, value, iteration);
        }
        slot = value;
        terms.push_back(nn::external_scalar(value, std::move(inputs), std::move(grads)));
        weights.push_back(weight);
    };

    const Tensor fake_logits = state.discriminator.forward(batch.noisy, fwd.fake);
    {
        auto adv = backend.adversarial({}, fake_logits.data(), losses::AdversarialSide::Generator);
        add("L_GAN_G", b.gan_g, adv.value, cfg.weights.lambda_gan, {fake_logits}, {std::move(adv.d_fake)});
    }
    {
        auto l1 = backend.l1(fwd.fake.data(), batch.clean.data());
        add("L_L1", b.l1, l1.value, cfg.weights.lambda_l1, {fwd.fake}, {std::move(l1.grad)});
    }
    if (cfg.ablation.use_ssim) {
        auto s = backend.dssim(view_of(fwd.fake), view_of(batch.clean), cfg.ssim);
        add("L_SSIM", b.ssim, s.value, cfg.weights.lambda_ssim, {fwd.fake}, {std::move(s.grad)});
    }
    if (cfg.ablation.use_tv) {
        auto t = backend.tv(view_of(fwd.fake));
        add("L_TV", b.tv, t.value, cfg.weights.lambda_tv, {fwd.fake}, {std::move(t.grad)});
    }
    if (cfg.ablation.use_cl) {
        const int64_t rows = fwd.embeddings.dim(0);
        const auto pairs = losses::halves_pairing(rows / 2);
        auto c = backend.ntxent(fwd.embeddings.data(), rows, fwd.embeddings.dim(1), pairs, cfg.weights.tau);
        add("L_CL", b.cl, c.value, cfg.weights.lambda_cl, {fwd.embeddings}, {std::move(c.grad)});
    }

    Tensor total = nn::weighted_sum(terms, weights);
    b.total = total.item();
    if (!std::isfinite(b.total)) {
        diverged("total", b.total, iteration);
    }
    total.backward();
    for (const auto& p : state.opt_generator.parameters()) {
        if (!all_finite(p.tensor.grad())) {
            diverged("generator gradient (" + p.name + ")", NAN, iteration);
        }
    }
    double head_sq = 0.0;
    for (const auto& p : state.head.parameters()) {
        for (double g : p.tensor.grad()) {
            head_sq += g * g;
        }
    }
    b.head_grad_norm = std::sqrt(head_sq);
    state.opt_generator.step(lr);
    state.opt_generator.zero_grad();
    // The generator backward pass also reaches the discriminator weights.
    state.opt_discriminator.zero_grad();
    return b;
}

StepBreakdown train_step(TrainState& state, const Batch& batch, double lr, const LossBackend& backend) {
    const auto g_snap = state.opt_generator.snapshot();
    const auto d_snap = state.opt_discriminator.snapshot();
    const Rng rng_snap = state.rng;
    try {
        const GeneratorForward fwd = generator_forward(state, batch);
        const double gan_d = discriminator_step(state, batch, fwd.fake, lr, backend);
        StepBreakdown b = generator_step(state, batch, fwd, lr, backend);
        b.gan_d = gan_d;
        ++state.global_step;
        return b;
    } catch (...) {
        state.opt_generator.restore(g_snap);
        state.opt_discriminator.restore(d_snap);
        state.opt_generator.zero_grad();
        state.opt_discriminator.zero_grad();
        state.rng = rng_snap;
        throw;
    }
}

// ---- fit ----------------------------------------------------------------------------------

namespace {

int64_t steps_per_epoch(const TrainConfig& cfg, int64_t n_train) {
    if (cfg.steps_per_epoch > 0) {
        return cfg.steps_per_epoch;
    }
    const int64_t base = cfg.base_per_step();
    return std::max<int64_t>(1, (n_train + base - 1) / base);
}

// Indices for one epoch: shuffled passes over the training set, concatenated
// until `count` are available (small subsets are recycled).
std::vector<int64_t> epoch_order(const std::vector<int64_t>& train, int64_t count, Rng& rng) {
    std::vector<int64_t> order;
    order.reserve(count);
    while (static_cast<int64_t>(order.size()) < count) {
        std::vector<int64_t> pass = train;
        shuffle(pass, rng);
        order.insert(order.end(), pass.begin(), pass.end());
    }
    order.resize(count);
    return order;
}

fs::path epoch_checkpoint(const fs::path& dir, int64_t epoch) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%06lld.ckpt", static_cast<long long>(epoch));
    return dir / name;
}

} // namespace

TrainState fit(const data::DenoisingDataset& dataset, const TrainConfig& cfg, const FitOptions& options,
               std::optional<TrainState> resume) {
    cfg.validate();
    if (dataset.n_train() == 0) {
        throw Error(ErrorCode::InvalidConfig, "dataset '" + dataset.name + "' has no training pairs");
    }
    TrainState state = resume ? std::move(*resume) : TrainState(cfg);
    if (resume) {
        state.config.epochs = cfg.epochs;
        state.config.decay_start_epoch = cfg.decay_start_epoch;
    }
    const LossBackend& backend = options.backend ? *options.backend : LossBackend::standard();
    const TrainConfig& c = state.config;
    const int64_t steps = steps_per_epoch(c, dataset.n_train());
    const int64_t base = c.base_per_step();

    std::ofstream csv;
    if (!options.loss_csv.empty()) {
        if (options.loss_csv.has_parent_path()) {
            fs::create_directories(options.loss_csv.parent_path());
        }
        const bool fresh = !fs::exists(options.loss_csv) || fs::file_size(options.loss_csv) == 0;
        csv.open(options.loss_csv, std::ios::app);
        if (!csv) {
            throw Error(ErrorCode::MissingFile, "cannot write " + options.loss_csv.string());
        }
        if (fresh) {
            csv << kLossCsvHeader << "\n";
        }
    }

    while (state.epoch < c.epochs) {
        const double lr = lr_schedule(state.epoch, c);
        const auto order = epoch_order(dataset.train_indices, steps * base, state.rng);
        for (int64_t s = 0; s < steps; ++s) {
            const std::vector<int64_t> idx(order.begin() + s * base, order.begin() + (s + 1) * base);
            const Batch batch = make_batch(dataset, idx, c, state.rng);
            StepBreakdown b;
            try {
                b = train_step(state, batch, lr, backend);
            } catch (const Error& e) {
                if (e.code() == ErrorCode::NonFiniteLoss && !options.checkpoint_dir.empty()) {
                    save_checkpoint(state, options.checkpoint_dir / "last_good.ckpt");
                }
                throw;
            }
            if (csv.is_open()) {
                csv << loss_csv_row(b) << "\n";
            }
            if (options.on_step) {
                options.on_step(b);
            }
        }
        ++state.epoch;
        if (csv.is_open()) {
            csv.flush();
        }
        if (!options.checkpoint_dir.empty() && options.checkpoint_every > 0 &&
            state.epoch % options.checkpoint_every == 0) {
            save_checkpoint(state, epoch_checkpoint(options.checkpoint_dir, state.epoch));
        }
        if (options.on_epoch_end && !options.on_epoch_end(state)) {
            break;
        }
    }
    if (!options.checkpoint_dir.empty()) {
        save_checkpoint(state, options.checkpoint_dir / "final.ckpt");
    }
    return state;
}

} // namespace fsd::training
