#include "fsdenoise/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>
#include <sstream>

#include "fsdenoise/error.hpp"

namespace fsd::harness {

namespace {

[[noreturn]] void invalid(const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); }

// "[dataset foo]" -> ("dataset", "foo")
std::pair<std::string, std::string> split_header(const std::string& header) {
    const auto space = header.find(' ');
    if (space == std::string::npos) {
        return {header, ""};
    }
    return {header.substr(0, space), io::trim(header.substr(space + 1))};
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

data::SyntheticOptions parse_synthetic(const io::Section& s) {
    data::SyntheticOptions o;
    if (s.has("count")) o.count = io::parse_int(s.get("count"), "count");
    if (s.has("size")) o.size = io::parse_int(s.get("size"), "size");
    if (s.has("noise_sigma")) o.noise_sigma = io::parse_double(s.get("noise_sigma"), "noise_sigma");
    if (s.has("patch_size")) o.patch_size = io::parse_int(s.get("patch_size"), "patch_size");
    if (s.has("test_fraction")) o.test_fraction = io::parse_double(s.get("test_fraction"), "test_fraction");
    if (s.has("seed")) o.seed = static_cast<uint64_t>(io::parse_int(s.get("seed"), "seed"));
    return o;
}

inference::TilingSpec tiling_for(const ExperimentPlan& plan, const training::TrainConfig& cfg) {
    inference::TilingSpec t = plan.tiling;
    if (t.tile == 0) {
        t.tile = cfg.generator.input_size;
    }
    t.validate();
    return t;
}

} // namespace

// ---- plan ---------------------------------------------------------------------------

void ExperimentPlan::validate() const {
    std::set<std::string> names;
    for (const auto& d : datasets) {
        if (!names.insert(d.name).second) {
            invalid("duplicate dataset name '" + d.name + "'");
        }
        if (!d.synthetic && !fs::exists(d.manifest)) {
            throw Error(ErrorCode::MissingFile, "dataset manifest " + d.manifest.string() + " does not exist");
        }
    }
    names.clear();
    for (const auto& e : experiments) {
        if (!names.insert(e.name).second) {
            invalid("duplicate experiment name '" + e.name + "'");
        }
        for (const auto& label : e.few_shot) {
            data::FewShotSpec::parse(label, 0);
        }
    }
    for (const auto& label : few_shot) {
        data::FewShotSpec::parse(label, 0);
    }
    if (seeds.empty()) {
        invalid("plan needs at least one seed");
    }
    if (tiling.tile != 0) {
        tiling.validate();
    }
}

ExperimentPlan parse_plan(const std::string& text, const fs::path& base_dir) {
    ExperimentPlan plan;
    plan.tiling.tile = 0;
    for (const auto& section : io::parse_key_value(text)) {
        const auto [kind, name] = split_header(section.name);
        if (kind.empty()) {
            if (!section.entries.empty()) {
                invalid("plan keys must follow a section header");
            }
        } else if (kind == "plan") {
            plan.name = section.get_or("name", plan.name);
            plan.output_dir = section.get_or("output_dir", plan.output_dir.string());
            if (section.has("few_shot")) {
                plan.few_shot = io::split_list(section.get("few_shot"));
            }
            if (section.has("seeds")) {
                plan.seeds.clear();
                for (const auto& s : io::split_list(section.get("seeds"))) {
                    plan.seeds.push_back(static_cast<uint64_t>(io::parse_int(s, "seeds")));
                }
            }
            if (section.has("tile")) plan.tiling.tile = io::parse_int(section.get("tile"), "tile");
            if (section.has("overlap")) plan.tiling.overlap = io::parse_int(section.get("overlap"), "overlap");
            if (section.has("blend")) plan.tiling.blend = inference::parse_blend(section.get("blend"));
            if (section.has("nrmse_norm")) plan.nrmse_norm = metrics::parse_nrmse_norm(section.get("nrmse_norm"));
            if (section.has("few_shot_match_steps")) {
                plan.few_shot_match_steps = io::parse_bool(section.get("few_shot_match_steps"), "few_shot_match_steps");
            }
            if (section.has("checkpoints")) {
                plan.keep_checkpoints = io::parse_bool(section.get("checkpoints"), "checkpoints");
            }
        } else if (kind == "train") {
            for (const auto& [k, v] : section.entries) {
                if (!training::is_config_key(k)) {
                    invalid("unknown training key '" + k + "'");
                }
            }
            plan.train.entries.insert(plan.train.entries.end(), section.entries.begin(), section.entries.end());
        } else if (kind == "dataset") {
            if (name.empty()) {
                invalid("dataset section needs a name");
            }
            DatasetEntry d;
            d.name = name;
            if (section.has("synthetic") && io::parse_bool(section.get("synthetic"), "synthetic")) {
                d.synthetic = parse_synthetic(section);
            } else {
                d.manifest = resolve(base_dir, section.get("manifest"));
            }
            plan.datasets.push_back(std::move(d));
        } else if (kind == "experiment") {
            if (name.empty()) {
                invalid("experiment section needs a name");
            }
            ExperimentEntry e;
            e.name = name;
            e.overrides.name = section.name;
            for (const auto& [k, v] : section.entries) {
                if (k == "few_shot") {
                    e.few_shot = io::split_list(v);
                } else if (training::is_config_key(k)) {
                    e.overrides.entries.emplace_back(k, v);
                } else {
                    invalid("unknown key '" + k + "' in experiment '" + name + "'");
                }
            }
            plan.experiments.push_back(std::move(e));
        } else {
            invalid("unknown plan section [" + section.name + "]");
        }
    }
    const training::TrainConfig base = training::apply_overrides({}, plan.train);
    for (auto& e : plan.experiments) {
        e.flags = training::apply_overrides(base, e.overrides).ablation;
    }
    return plan;
}

ExperimentPlan load_plan(const fs::path& path) {
    ExperimentPlan plan = parse_plan(io::read_text_file(path), path.parent_path());
    if (plan.name.empty()) {
        plan.name = path.stem().string();
    }
    return plan;
}

fs::path Cell::relative_dir() const {
    return fs::path(dataset) / experiment / ("n_" + few_shot) / ("seed_" + std::to_string(seed));
}

std::string Cell::label() const {
    return dataset + "/" + experiment + "/n_" + few_shot + "/seed_" + std::to_string(seed);
}

std::vector<Cell> plan_cells(const ExperimentPlan& plan) {
    std::vector<Cell> cells;
    for (const auto& d : plan.datasets) {
        for (const auto& e : plan.experiments) {
            for (const auto& label : e.few_shot.empty() ? plan.few_shot : e.few_shot) {
                for (uint64_t seed : plan.seeds) {
                    cells.push_back({d.name, e.name, data::FewShotSpec::parse(label, seed).label(), seed});
                }
            }
        }
    }
    return cells;
}

const DatasetEntry& find_dataset(const ExperimentPlan& plan, const std::string& name) {
    for (const auto& d : plan.datasets) {
        if (d.name == name) {
            return d;
        }
    }
    invalid("plan has no dataset '" + name + "'");
}

const ExperimentEntry& find_experiment(const ExperimentPlan& plan, const std::string& name) {
    for (const auto& e : plan.experiments) {
        if (e.name == name) {
            return e;
        }
    }
    invalid("plan has no experiment '" + name + "'");
}

data::DenoisingDataset load_dataset(const DatasetEntry& entry) {
    data::DenoisingDataset ds =
        entry.synthetic ? data::make_synthetic_dataset(*entry.synthetic) : data::load_from_manifest(entry.manifest);
    ds.name = entry.name;
    return ds;
}

training::TrainConfig cell_config(const ExperimentPlan& plan, const Cell& cell, const io::Section& cli_overrides) {
    training::TrainConfig cfg = training::apply_overrides({}, plan.train);
    cfg = training::apply_overrides(cfg, find_experiment(plan, cell.experiment).overrides);
    cfg.seed = cell.seed;
    return training::apply_overrides(cfg, cli_overrides);
}

// ---- cells ---------------------------------------------------------------------------

namespace {

std::string manifest_status(const fs::path& run_manifest, std::string* hash) {
    if (!fs::exists(run_manifest)) {
        return "";
    }
    const auto sections = io::read_key_value_file(run_manifest);
    *hash = sections.front().get_or("hash", "");
    return sections.front().get_or("status", "");
}

void write_run_manifest(const fs::path& path, const Cell& cell, const std::string& hash, const std::string& status,
                        const training::TrainConfig& cfg, const std::string& dataset_hash,
                        const metrics::MetricReport* report, const std::string& error) {
    std::ostringstream os;
    os << "# run manifest\n";
    os << "status = " << status << "\n";
    os << "hash = " << hash << "\n";
    os << "code_version = " << kCodeVersion << "\n";
    os << "dataset = " << cell.dataset << "\n";
    os << "experiment = " << cell.experiment << "\n";
    os << "n_samples = " << cell.few_shot << "\n";
    os << "seed = " << cell.seed << "\n";
    os << "dataset_manifest_hash = " << dataset_hash << "\n";
    if (report && !report->aggregates.empty()) {
        const auto& a = report->aggregates.front();
        os << "test_frames = " << a.count << "\n";
        os << "mean_psnr = " << io::format_double(a.psnr) << "\n";
        os << "mean_ssim = " << io::format_double(a.ssim) << "\n";
        os << "mean_nrmse = " << io::format_double(a.nrmse) << "\n";
    }
    if (!error.empty()) {
        std::string one_line = error;
        std::replace(one_line.begin(), one_line.end(), '\n', ' ');
        std::replace(one_line.begin(), one_line.end(), '#', ' ');
        os << "error = " << one_line << "\n";
    }
    os << "\n[config]\n" << training::to_text(cfg);
    io::write_text_file(path, os.str());
}

} // namespace

CellOutcome run_cell(const ExperimentPlan& plan, const Cell& cell, const data::DenoisingDataset& dataset,
                     const RunOptions& options) {
    CellOutcome out;
    out.cell = cell;
    const fs::path dir = plan.output_dir / cell.relative_dir();
    const fs::path run_manifest = dir / "run_manifest.txt";
    training::TrainConfig cfg;
    std::string dataset_hash;
    try {
        const data::DenoisingDataset subset =
            data::few_shot_subset(dataset, data::FewShotSpec::parse(cell.few_shot, cell.seed));
        cfg = cell_config(plan, cell, options.overrides);
        if (cfg.generator.input_size != subset.patch_size) {
            invalid("generator input size " + std::to_string(cfg.generator.input_size) +
                    " differs from the dataset patch size " + std::to_string(subset.patch_size));
        }
        if (plan.few_shot_match_steps && cfg.steps_per_epoch == 0 && subset.n_train() < dataset.n_train()) {
            const int64_t base = cfg.base_per_step();
            cfg.steps_per_epoch = static_cast<int>(std::max<int64_t>(1, (dataset.n_train() + base - 1) / base));
        }
        const inference::TilingSpec tiling = tiling_for(plan, cfg);

        const std::string dataset_text = data::manifest_text(subset);
        dataset_hash = hex64(fnv1a64(dataset_text));
        std::ostringstream key;
        key << kCodeVersion << "\n"
            << training::to_text(cfg) << dataset_text << "cell = " << cell.label() << "\n"
            << "tile = " << tiling.tile << "\noverlap = " << tiling.overlap
            << "\nblend = " << inference::to_string(tiling.blend)
            << "\nnrmse_norm = " << metrics::to_string(plan.nrmse_norm) << "\n";
        out.hash = hex64(fnv1a64(key.str()));

        std::string previous_hash;
        if (manifest_status(run_manifest, &previous_hash) == "complete" && previous_hash == out.hash &&
            fs::exists(dir / "report.csv")) {
            out.skipped = true;
            out.report = metrics::parse_report_csv(io::read_text_file(dir / "report.csv"));
            if (options.on_cell) {
                options.on_cell(cell, "skipped");
            }
            return out;
        }

        if (options.on_cell) {
            options.on_cell(cell, "training");
        }
        fs::remove_all(dir);
        fs::create_directories(dir);
        io::write_text_file(dir / "dataset_manifest.txt", dataset_text);
        write_run_manifest(run_manifest, cell, out.hash, "running", cfg, dataset_hash, nullptr, "");

        training::FitOptions fit;
        fit.loss_csv = dir / "losses.csv";
        if (plan.keep_checkpoints) {
            fit.checkpoint_dir = dir / "checkpoints";
        }
        if (options.on_step) {
            fit.on_step = [&](const training::StepBreakdown& b) { options.on_step(cell, b); };
        }
        const training::TrainState state = training::fit(subset, cfg, fit);

        const inference::TileModel tile_model = inference::generator_tile_model(state.generator);
        metrics::EvaluationParams params;
        params.dataset = cell.dataset;
        params.experiment = cell.experiment;
        params.n_samples = cell.few_shot;
        params.nrmse_norm = plan.nrmse_norm;
        out.report = metrics::evaluate(
            [&](const Image& frame) { return inference::denoise_frame(tile_model, frame, tiling); }, subset, params);
        io::write_text_file(dir / "report.csv", metrics::report_csv(out.report));
        write_run_manifest(run_manifest, cell, out.hash, "complete", cfg, dataset_hash, &out.report, "");
        if (options.on_cell) {
            options.on_cell(cell, "complete");
        }
    } catch (const Error& e) {
        out.failed = true;
        out.error_code = std::string(to_string(e.code()));
        out.error_message = e.what();
    } catch (const std::exception& e) {
        out.failed = true;
        out.error_code = "Internal";
        out.error_message = e.what();
    }
    if (out.failed) {
        try {
            write_run_manifest(run_manifest, cell, out.hash, "failed", cfg, dataset_hash, nullptr, out.error_message);
        } catch (const std::exception&) {
            // The failure log written by run_plan still records the cell.
        }
        if (options.on_cell) {
            options.on_cell(cell, "failed: " + out.error_message);
        }
    }
    return out;
}

PlanResult run_plan(const ExperimentPlan& plan, const RunOptions& options) {
    plan.validate();
    PlanResult result;
    std::map<std::string, data::DenoisingDataset> loaded;
    std::map<std::string, std::string> load_errors;

    for (const Cell& cell : plan_cells(plan)) {
        if (!loaded.count(cell.dataset) && !load_errors.count(cell.dataset)) {
            try {
                loaded.emplace(cell.dataset, load_dataset(find_dataset(plan, cell.dataset)));
            } catch (const Error& e) {
                load_errors.emplace(cell.dataset, std::string(to_string(e.code())) + "|" + e.what());
            }
        }
        CellOutcome outcome;
        if (auto it = load_errors.find(cell.dataset); it != load_errors.end()) {
            outcome.cell = cell;
            outcome.failed = true;
            const auto bar = it->second.find('|');
            outcome.error_code = it->second.substr(0, bar);
            outcome.error_message = it->second.substr(bar + 1);
            if (options.on_cell) {
                options.on_cell(cell, "failed: " + outcome.error_message);
            }
        } else {
            outcome = run_cell(plan, cell, loaded.at(cell.dataset), options);
        }
        if (outcome.failed) {
            ++result.failed;
        } else if (outcome.skipped) {
            ++result.skipped;
        } else {
            ++result.trained;
        }
        if (!outcome.failed) {
            result.report.rows.insert(result.report.rows.end(), outcome.report.rows.begin(), outcome.report.rows.end());
        }
        result.cells.push_back(std::move(outcome));
    }
    result.report.finalize();

    std::ostringstream failures;
    failures << "cell,error_code,message\n";
    for (const auto& c : result.cells) {
        if (c.failed) {
            std::string msg = c.error_message;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            failures << c.cell.label() << "," << c.error_code << "," << msg << "\n";
        }
    }
    io::write_text_file(plan.output_dir / "failures.csv", failures.str());
    metrics::write_report(result.report, plan.output_dir / "plan_report.csv", plan.output_dir / "plan_aggregate.csv");
    return result;
}

// ---- tables ---------------------------------------------------------------------------

int complexity_from_name(const std::string& experiment) {
    std::string lower;
    for (char ch : experiment) {
        lower += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    if (lower == "all") {
        return 3;
    }
    int n = 0;
    std::string token;
    auto flush = [&] {
        if (token == "tv" || token == "ssim" || token == "cl") {
            ++n;
        }
        token.clear();
    };
    for (char ch : lower) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            token += ch;
        } else {
            flush();
        }
    }
    flush();
    return n;
}

namespace {

// "all" first, then larger counts before smaller ones.
bool n_samples_before(const std::string& a, const std::string& b) {
    if (a == b) return false;
    if (a == "all") return true;
    if (b == "all") return false;
    try {
        return std::stoll(a) > std::stoll(b);
    } catch (const std::exception&) {
        return a < b;
    }
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

} // namespace

TableResult make_table(const std::vector<metrics::MetricReport>& reports, const std::map<std::string, int>& complexity) {
    TableResult t;
    for (const auto& r : reports) {
        t.merged.rows.insert(t.merged.rows.end(), r.rows.begin(), r.rows.end());
    }
    t.merged.finalize();
    t.aggregate_csv = metrics::aggregate_csv(t.merged);

    auto complexity_of = [&](const std::string& e) {
        auto it = complexity.find(e);
        return it != complexity.end() ? it->second : complexity_from_name(e);
    };

    std::vector<std::string> datasets;
    for (const auto& a : t.merged.aggregates) {
        if (std::find(datasets.begin(), datasets.end(), a.dataset) == datasets.end()) {
            datasets.push_back(a.dataset);
        }
    }

    std::ostringstream text;
    for (const auto& dataset : datasets) {
        std::vector<std::string> columns, experiments;
        for (const auto& a : t.merged.aggregates) {
            if (a.dataset != dataset) continue;
            if (std::find(columns.begin(), columns.end(), a.n_samples) == columns.end()) columns.push_back(a.n_samples);
            if (std::find(experiments.begin(), experiments.end(), a.experiment) == experiments.end()) {
                experiments.push_back(a.experiment);
            }
        }
        std::sort(columns.begin(), columns.end(), n_samples_before);
        std::stable_sort(experiments.begin(), experiments.end(), [&](const std::string& a, const std::string& b) {
            return complexity_of(a) < complexity_of(b);
        });

        auto find_agg = [&](const std::string& e, const std::string& n) -> const metrics::MetricAggregate* {
            for (const auto& a : t.merged.aggregates) {
                if (a.dataset == dataset && a.experiment == e && a.n_samples == n) return &a;
            }
            return nullptr;
        };

        std::map<std::pair<std::string, std::string>, std::string> best_of; // (n, metric) -> experiment
        for (const auto& n : columns) {
            for (const std::string metric : {"psnr", "ssim", "nrmse"}) {
                const metrics::MetricAggregate* best = nullptr;
                for (const auto& e : experiments) {
                    const auto* a = find_agg(e, n);
                    if (!a) continue;
                    const double v = metric == "psnr" ? a->psnr : metric == "ssim" ? a->ssim : a->nrmse;
                    if (!best) {
                        best = a;
                        continue;
                    }
                    const double bv = metric == "psnr" ? best->psnr : metric == "ssim" ? best->ssim : best->nrmse;
                    const bool better = metric == "nrmse" ? v < bv : v > bv;
                    const bool tie_simpler = v == bv && complexity_of(a->experiment) < complexity_of(best->experiment);
                    if (better || tie_simpler) {
                        best = a;
                    }
                }
                if (best) {
                    t.best.push_back({dataset, n, metric, best->experiment});
                    best_of[{n, metric}] = best->experiment;
                }
            }
        }

        size_t name_width = 10;
        for (const auto& e : experiments) name_width = std::max(name_width, e.size());
        auto pad = [](std::string s, size_t w) {
            s.resize(std::max(s.size(), w), ' ');
            return s;
        };
        text << "dataset: " << dataset << "\n";
        text << pad("experiment", name_width);
        for (const auto& n : columns) {
            text << " | " << pad("n=" + n + " PSNR", 13) << " " << pad("SSIM", 8) << " " << pad("NRMSE", 9);
        }
        text << "\n";
        for (const auto& e : experiments) {
            text << pad(e, name_width);
            for (const auto& n : columns) {
                const auto* a = find_agg(e, n);
                auto cell = [&](const std::string& metric, double v, int digits, size_t w) {
                    if (!a) return pad("-", w);
                    const bool mark = best_of[{n, metric}] == e;
                    return pad(fixed(v, digits) + (mark ? "*" : ""), w);
                };
                text << " | " << cell("psnr", a ? a->psnr : 0.0, 2, 13) << " " << cell("ssim", a ? a->ssim : 0.0, 4, 8)
                     << " " << cell("nrmse", a ? a->nrmse : 0.0, 4, 9);
            }
            text << "\n";
        }
        text << "\n";
    }
    if (!t.best.empty()) {
        text << "* best value in its (dataset, n_samples) column\n";
    }
    t.text = text.str();
    return t;
}

std::vector<metrics::MetricReport> read_reports(const std::vector<fs::path>& inputs) {
    std::vector<fs::path> files;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            std::vector<fs::path> found;
            for (const auto& entry : fs::recursive_directory_iterator(in)) {
                if (entry.is_regular_file() && entry.path().filename() == "report.csv") {
                    found.push_back(entry.path());
                }
            }
            std::sort(found.begin(), found.end());
            files.insert(files.end(), found.begin(), found.end());
        } else if (fs::exists(in)) {
            files.push_back(in);
        } else {
            throw Error(ErrorCode::MissingFile, "report " + in.string() + " does not exist");
        }
    }
    std::vector<metrics::MetricReport> reports;
    for (const auto& f : files) {
        reports.push_back(metrics::parse_report_csv(io::read_text_file(f)));
    }
    return reports;
}

} // namespace fsd::harness
