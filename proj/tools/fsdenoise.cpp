// Command-line driver: ingest, train, eval, denoise, plan, table.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fsdenoise/data.hpp"
#include "fsdenoise/error.hpp"
#include "fsdenoise/harness.hpp"
#include "fsdenoise/inference.hpp"
#include "fsdenoise/io.hpp"
#include "fsdenoise/metrics.hpp"
#include "fsdenoise/training.hpp"

namespace fs = std::filesystem;
using namespace fsd;

namespace {

// TrainConfig fields exposed as flags; collected into a key/value section.
struct ConfigFlags {
    std::optional<int> batch_size, epochs, decay_start, steps_per_epoch;
    std::optional<double> lr, lambda_gan, lambda_l1, lambda_ssim, lambda_tv, lambda_cl, tau;
    std::optional<bool> use_tv, use_ssim, use_cl;
    std::vector<std::string> sets;

    void attach(CLI::App* app) {
        app->add_option("--batch-size", batch_size, "Patches per optimisation step");
        app->add_option("--epochs", epochs, "Training epochs");
        app->add_option("--decay-start", decay_start, "Epoch at which linear LR decay begins");
        app->add_option("--steps-per-epoch", steps_per_epoch, "Optimiser steps per epoch (0 = one pass)");
        app->add_option("--lr", lr, "Adam learning rate");
        app->add_option("--lambda-gan", lambda_gan);
        app->add_option("--lambda-l1", lambda_l1);
        app->add_option("--lambda-ssim", lambda_ssim);
        app->add_option("--lambda-tv", lambda_tv);
        app->add_option("--lambda-cl", lambda_cl);
        app->add_option("--tau", tau, "Contrastive temperature");
        app->add_option("--use-tv", use_tv, "Enable the total-variation term");
        app->add_option("--use-ssim", use_ssim, "Enable the structural term");
        app->add_option("--use-cl", use_cl, "Enable the contrastive term");
        app->add_option("--set", sets, "Any configuration key as key=value (repeatable)");
    }

    io::Section section(std::optional<uint64_t> seed) const {
        io::Section s;
        auto put = [&](const char* k, const auto& v) {
            if (v) {
                if constexpr (std::is_same_v<std::decay_t<decltype(*v)>, double>) {
                    s.entries.emplace_back(k, io::format_double(*v));
                } else if constexpr (std::is_same_v<std::decay_t<decltype(*v)>, bool>) {
                    s.entries.emplace_back(k, *v ? "true" : "false");
                } else {
                    s.entries.emplace_back(k, std::to_string(*v));
                }
            }
        };
        put("batch_size", batch_size);
        put("epochs", epochs);
        put("decay_start_epoch", decay_start);
        put("steps_per_epoch", steps_per_epoch);
        put("lr", lr);
        put("lambda_gan", lambda_gan);
        put("lambda_l1", lambda_l1);
        put("lambda_ssim", lambda_ssim);
        put("lambda_tv", lambda_tv);
        put("lambda_cl", lambda_cl);
        put("tau", tau);
        put("use_tv", use_tv);
        put("use_ssim", use_ssim);
        put("use_cl", use_cl);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw Error(ErrorCode::InvalidConfig, "--set expects key=value, got '" + kv + "'");
            }
            const std::string key = io::trim(kv.substr(0, eq));
            if (!training::is_config_key(key)) {
                throw Error(ErrorCode::InvalidConfig, "unknown configuration key '" + key + "'");
            }
            s.entries.emplace_back(key, io::trim(kv.substr(eq + 1)));
        }
        if (seed) {
            s.entries.emplace_back("seed", std::to_string(*seed));
        }
        return s;
    }
};

struct TilingFlags {
    int64_t tile = 0;
    int64_t overlap = 32;
    std::string blend = "linear-ramp";

    void attach(CLI::App* app) {
        app->add_option("--tile", tile, "Tile size (0 = generator input size)");
        app->add_option("--overlap", overlap, "Tile overlap in pixels");
        app->add_option("--blend", blend, "linear-ramp or uniform-average");
    }

    inference::TilingSpec spec(const models::Generator& g) const {
        inference::TilingSpec t{tile == 0 ? g.config().input_size : tile, overlap, inference::parse_blend(blend)};
        t.validate();
        return t;
    }
};

// "synthetic", a dataset named in the plan, or a manifest path.
data::DenoisingDataset resolve_dataset(const std::string& arg, const std::optional<harness::ExperimentPlan>& plan,
                                       uint64_t seed) {
    if (arg == "synthetic") {
        data::SyntheticOptions o;
        o.seed = seed;
        return data::make_synthetic_dataset(o);
    }
    if (plan) {
        for (const auto& d : plan->datasets) {
            if (d.name == arg) {
                return harness::load_dataset(d);
            }
        }
    }
    return data::load_from_manifest(arg);
}

std::vector<int64_t> parse_box(const std::string& s) {
    std::vector<int64_t> v;
    for (const auto& item : io::split_list(s)) {
        v.push_back(io::parse_int(item, "crop box"));
    }
    if (v.size() != 4) {
        throw Error(ErrorCode::InvalidConfig, "crop box must be row0,row1,col0,col1");
    }
    return v;
}

std::string frame_name(const std::string& prefix, size_t i, const std::string& ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "_%04zu", i);
    return prefix + buf + ext;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot microscopy denoising with a conditional GAN"};
    app.require_subcommand(1);

    std::optional<uint64_t> seed;
    std::string config_path;
    app.add_option("--seed", seed, "Random seed")->configurable(false);
    app.add_option("--config", config_path, "Plan file supplying [train] defaults, datasets and experiments");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Load a stack, synthesise ground truth, write a dataset manifest");
    std::string in_path, in_format = "auto", out_manifest, ds_name;
    int64_t patch_size = 256, synthetic_frames = 0, synthetic_size = 128;
    double test_fraction = 0.1, low_pct = 0.1, high_pct = 99.9, synthetic_sigma = 0.1;
    ingest->add_option("--input", in_path, "TIFF stack, directory of images or raw array file");
    ingest->add_option("--format", in_format, "auto, tiff-stack, directory-of-images or raw-array-file");
    ingest->add_option("--output", out_manifest, "Manifest path")->required();
    ingest->add_option("--name", ds_name, "Dataset name (default: input stem)");
    ingest->add_option("--patch-size", patch_size);
    ingest->add_option("--test-fraction", test_fraction);
    ingest->add_option("--low-pct", low_pct);
    ingest->add_option("--high-pct", high_pct);
    ingest->add_option("--synthetic-frames", synthetic_frames,
                       "Instead of --input, write a synthetic stack of this many frames next to the manifest");
    ingest->add_option("--synthetic-size", synthetic_size);
    ingest->add_option("--synthetic-sigma", synthetic_sigma);

    // train
    auto* train = app.add_subcommand("train", "Train one cell");
    std::string train_dataset = "synthetic", experiment, few_shot = "all", out_dir, resume_path;
    int checkpoint_every = 0;
    ConfigFlags train_flags;
    train->add_option("--dataset", train_dataset, "Manifest path, plan dataset name or 'synthetic'");
    train->add_option("--experiment", experiment, "Experiment section of the plan to apply");
    train->add_option("--few-shot", few_shot, "'all' or a training-set size");
    train->add_option("--out", out_dir, "Output directory")->required();
    train->add_option("--resume", resume_path, "Checkpoint to resume from");
    train->add_option("--checkpoint-every", checkpoint_every, "Epochs between checkpoints (0 = final only)");
    train_flags.attach(train);

    // eval
    auto* eval = app.add_subcommand("eval", "Score a checkpoint on the test split");
    std::string eval_ckpt, eval_dataset = "synthetic", eval_out, eval_experiment = "model", eval_n = "all";
    std::string nrmse_norm = "range";
    bool eval_noisy = false;
    TilingFlags eval_tiling;
    eval->add_option("--checkpoint", eval_ckpt, "Trained checkpoint");
    eval->add_option("--dataset", eval_dataset, "Manifest path, plan dataset name or 'synthetic'");
    eval->add_option("--out", eval_out, "Per-image report CSV (aggregate written alongside)");
    eval->add_option("--experiment", eval_experiment, "Experiment label in the report");
    eval->add_option("--n-samples", eval_n, "Few-shot label in the report");
    eval->add_option("--nrmse-norm", nrmse_norm, "range, mean or euclidean");
    eval->add_flag("--noisy-baseline", eval_noisy, "Score the noisy input itself instead of a model");
    eval_tiling.attach(eval);

    // denoise
    auto* denoise = app.add_subcommand("denoise", "Denoise a frame or stack");
    std::string dn_ckpt, dn_input, dn_dataset, dn_out, dn_norm, dn_crop;
    int64_t dn_frame = -1;
    bool dn_raw = false;
    TilingFlags dn_tiling;
    denoise->add_option("--checkpoint", dn_ckpt)->required();
    denoise->add_option("--input", dn_input, "Image, TIFF stack or raw array file");
    denoise->add_option("--dataset", dn_dataset, "Take the frame from a dataset instead of --input");
    denoise->add_option("--frame", dn_frame, "Frame index within --dataset");
    denoise->add_option("--out", dn_out, "Output directory")->required();
    denoise->add_option("--normalization", dn_norm, "Manifest whose normalisation record applies to --input");
    denoise->add_flag("--raw", dn_raw, "Also write raw-unit 16-bit TIFFs");
    denoise->add_option("--crop", dn_crop, "row0,row1,col0,col1: export noisy/denoised/gt PNG crops (--dataset)");
    dn_tiling.attach(denoise);

    // plan
    auto* plan_cmd = app.add_subcommand("plan", "Run every cell of a plan");
    std::string plan_out;
    bool dry_run = false;
    ConfigFlags plan_flags;
    plan_cmd->add_option("--output", plan_out, "Override the plan's output_dir");
    plan_cmd->add_flag("--dry-run", dry_run, "List cells without running them");
    plan_flags.attach(plan_cmd);

    // table
    auto* table = app.add_subcommand("table", "Aggregate report CSVs into a table");
    std::vector<std::string> table_inputs;
    std::string table_out;
    table->add_option("inputs", table_inputs, "Report CSVs or directories containing report.csv")->required();
    table->add_option("--output", table_out, "Directory for aggregate.csv and table.txt");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        std::optional<harness::ExperimentPlan> plan;
        if (!config_path.empty()) {
            plan = harness::load_plan(config_path);
        }
        const uint64_t base_seed = seed.value_or(0);

        if (*ingest) {
            data::ImageStack stack;
            fs::path source;
            data::StackFormat format;
            if (synthetic_frames > 0) {
                source = fs::path(out_manifest).replace_extension(".fsda");
                stack = data::make_synthetic_stack(synthetic_frames, synthetic_size, synthetic_sigma, base_seed);
                io::write_raw_array(source, stack.frames, io::RawDtype::F32);
                format = data::StackFormat::RawArrayFile;
                stack = data::load_stack(source, format);
            } else {
                if (in_path.empty()) {
                    throw Error(ErrorCode::InvalidConfig, "ingest needs --input or --synthetic-frames");
                }
                source = in_path;
                format = in_format == "auto" ? data::detect_format(source) : data::parse_stack_format(in_format);
                stack = data::load_stack(source, format);
            }
            const Image gt = data::synthesize_ground_truth(stack);
            data::DatasetOptions opts{patch_size, test_fraction, base_seed, low_pct, high_pct};
            data::DenoisingDataset ds = data::build_dataset(stack, gt, opts);
            ds.name = ds_name.empty() ? source.stem().string() : ds_name;
            ds.source_path = fs::absolute(source).string();
            ds.source_format = format;
            data::write_manifest(ds, out_manifest);
            std::cout << "dataset " << ds.name << ": " << ds.pairs.size() << " frames " << stack.rows() << "x"
                      << stack.cols() << ", train " << ds.n_train() << ", test " << ds.n_test()
                      << ", normalisation [" << io::format_double(ds.normalization.low_value) << ", "
                      << io::format_double(ds.normalization.high_value) << "]\n";
            return 0;
        }

        if (*train) {
            training::TrainConfig cfg;
            if (plan) {
                cfg = training::apply_overrides(cfg, plan->train);
                if (!experiment.empty()) {
                    cfg = training::apply_overrides(cfg, harness::find_experiment(*plan, experiment).overrides);
                }
            }
            cfg = training::apply_overrides(cfg, train_flags.section(seed));
            const data::DenoisingDataset full = resolve_dataset(train_dataset, plan, base_seed);
            const data::DenoisingDataset ds =
                data::few_shot_subset(full, data::FewShotSpec::parse(few_shot, cfg.seed));
            std::optional<training::TrainState> resume;
            if (!resume_path.empty()) {
                resume = training::load_checkpoint(resume_path);
            }
            training::FitOptions fit;
            fit.loss_csv = fs::path(out_dir) / "losses.csv";
            fit.checkpoint_dir = fs::path(out_dir) / "checkpoints";
            fit.checkpoint_every = checkpoint_every;
            training::StepBreakdown last;
            fit.on_step = [&](const training::StepBreakdown& b) { last = b; };
            fit.on_epoch_end = [&](const training::TrainState& s) {
                std::cerr << "epoch " << s.epoch << " step " << last.iteration << " G " << last.total << " D "
                          << last.gan_d << "\n";
                return true;
            };
            io::write_text_file(fs::path(out_dir) / "config.txt", training::to_text(cfg));
            io::write_text_file(fs::path(out_dir) / "dataset_manifest.txt", data::manifest_text(ds));
            const training::TrainState state = training::fit(ds, cfg, fit, std::move(resume));
            std::cout << "trained " << state.global_step << " steps; checkpoint "
                      << (fs::path(out_dir) / "checkpoints" / "final.ckpt").string() << "\n";
            return 0;
        }

        if (*eval) {
            const data::DenoisingDataset ds = resolve_dataset(eval_dataset, plan, base_seed);
            metrics::EvaluationParams params;
            params.dataset = ds.name;
            params.experiment = eval_noisy ? "noisy-input" : eval_experiment;
            params.n_samples = eval_n;
            params.nrmse_norm = metrics::parse_nrmse_norm(nrmse_norm);
            metrics::MetricReport report;
            if (eval_noisy) {
                report = metrics::evaluate([](const Image& f) { return f; }, ds, params);
            } else {
                if (eval_ckpt.empty()) {
                    throw Error(ErrorCode::InvalidConfig, "eval needs --checkpoint or --noisy-baseline");
                }
                const training::TrainState state = training::load_checkpoint(eval_ckpt);
                const auto tiling = eval_tiling.spec(state.generator);
                const auto model = inference::generator_tile_model(state.generator);
                report = metrics::evaluate(
                    [&](const Image& f) { return inference::denoise_frame(model, f, tiling); }, ds, params);
            }
            if (!eval_out.empty()) {
                fs::path agg = fs::path(eval_out).replace_filename(fs::path(eval_out).stem().string() + "_aggregate.csv");
                metrics::write_report(report, eval_out, agg);
            }
            std::cout << metrics::aggregate_csv(report);
            return 0;
        }

        if (*denoise) {
            const training::TrainState state = training::load_checkpoint(dn_ckpt);
            const auto tiling = dn_tiling.spec(state.generator);
            const auto model = inference::generator_tile_model(state.generator);
            const fs::path out(dn_out);
            fs::create_directories(out);
            if (!dn_dataset.empty()) {
                const data::DenoisingDataset ds = resolve_dataset(dn_dataset, plan, base_seed);
                if (dn_frame < 0 || dn_frame >= static_cast<int64_t>(ds.pairs.size())) {
                    throw Error(ErrorCode::InvalidConfig, "--frame must index a frame of the dataset");
                }
                const auto& pair = ds.pairs[static_cast<size_t>(dn_frame)];
                const Image den = inference::denoise_frame(model, pair.noisy, tiling);
                io::write_tiff_float(out / frame_name("denoised", static_cast<size_t>(dn_frame), ".tif"), den);
                if (dn_raw) {
                    io::write_tiff_u16(out / frame_name("denoised_raw", static_cast<size_t>(dn_frame), ".tif"),
                                       data::denormalize(den, ds.normalization));
                }
                if (!dn_crop.empty()) {
                    const auto b = parse_box(dn_crop);
                    const auto exp = inference::export_crops(pair.noisy, den, *pair.clean, {b[0], b[1], b[2], b[3]},
                                                             out, ds.name);
                    for (const auto& f : exp.files) {
                        std::cout << f.string() << "\n";
                    }
                }
                std::cout << "PSNR noisy " << metrics::psnr(*pair.clean, pair.noisy) << " dB, denoised "
                          << metrics::psnr(*pair.clean, den) << " dB\n";
                return 0;
            }
            if (dn_input.empty()) {
                throw Error(ErrorCode::InvalidConfig, "denoise needs --input or --dataset");
            }
            if (!dn_crop.empty()) {
                throw Error(ErrorCode::InvalidConfig, "--crop needs --dataset (ground truth)");
            }
            const data::ImageStack stack = data::load_stack(dn_input, data::detect_format(dn_input));
            const data::NormalizationRecord rec =
                dn_norm.empty() ? data::stack_normalization(stack, 0.1, 99.9)
                                : data::load_from_manifest(dn_norm).normalization;
            for (size_t i = 0; i < stack.frames.size(); ++i) {
                const Image den =
                    inference::denoise_frame(model, data::apply_normalization(stack.frames[i], rec), tiling);
                io::write_tiff_float(out / frame_name("denoised", i, ".tif"), den);
                if (dn_raw) {
                    io::write_tiff_u16(out / frame_name("denoised_raw", i, ".tif"), data::denormalize(den, rec));
                }
            }
            std::cout << "denoised " << stack.frames.size() << " frame(s) into " << out.string() << "\n";
            return 0;
        }

        if (*plan_cmd) {
            if (!plan) {
                throw Error(ErrorCode::InvalidConfig, "plan needs --config <plan-file>");
            }
            if (!plan_out.empty()) {
                plan->output_dir = plan_out;
            }
            if (seed) {
                plan->seeds = {*seed};
            }
            harness::RunOptions opts;
            opts.overrides = plan_flags.section(std::nullopt);
            const auto cells = harness::plan_cells(*plan);
            if (dry_run) {
                for (const auto& c : cells) {
                    harness::cell_config(*plan, c, opts.overrides).validate();
                    std::cout << c.label() << "\n";
                }
                std::cout << cells.size() << " cells\n";
                return 0;
            }
            opts.on_cell = [](const harness::Cell& c, const std::string& status) {
                std::cerr << c.label() << ": " << status << "\n";
            };
            const auto result = harness::run_plan(*plan, opts);
            std::map<std::string, int> complexity;
            for (const auto& e : plan->experiments) {
                complexity[e.name] = e.flags.enabled_count();
            }
            std::vector<metrics::MetricReport> reports{result.report};
            const auto t = harness::make_table(reports, complexity);
            io::write_text_file(plan->output_dir / "table.txt", t.text);
            std::cout << t.text;
            std::cout << result.trained << " trained, " << result.skipped << " skipped, " << result.failed
                      << " failed\n";
            return 0;
        }

        if (*table) {
            std::vector<fs::path> inputs(table_inputs.begin(), table_inputs.end());
            std::map<std::string, int> complexity;
            if (plan) {
                for (const auto& e : plan->experiments) {
                    complexity[e.name] = e.flags.enabled_count();
                }
            }
            const auto t = harness::make_table(harness::read_reports(inputs), complexity);
            if (!table_out.empty()) {
                io::write_text_file(fs::path(table_out) / "aggregate.csv", t.aggregate_csv);
                io::write_text_file(fs::path(table_out) / "table.txt", t.text);
            }
            std::cout << t.text;
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
