#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsdenoise/data.hpp"
#include "fsdenoise/inference.hpp"
#include "fsdenoise/io.hpp"
#include "fsdenoise/metrics.hpp"
#include "fsdenoise/training.hpp"

namespace fsd::harness {

namespace fs = std::filesystem;

inline constexpr const char* kCodeVersion = "fsdenoise-0.1.0";

// Either a dataset manifest on disk or the built-in synthetic shapes set.
struct DatasetEntry {
    std::string name;
    fs::path manifest;
    std::optional<data::SyntheticOptions> synthetic;
};

struct ExperimentEntry {
    std::string name;
    training::AblationFlags flags;
    // Any TrainConfig key; applied after the plan-wide [train] section.
    io::Section overrides;
    // Few-shot labels this experiment runs at; empty = the plan-wide list.
    std::vector<std::string> few_shot;
};

// Plan file layout:
//
//   [plan]                      name, output_dir, seeds, few_shot, tile,
//                               overlap, blend, few_shot_match_steps,
//                               nrmse_norm, checkpoints
//   [train]                     TrainConfig keys for every cell
//   [dataset <name>]            manifest = <path>  | synthetic = true plus
//                               count, size, noise_sigma, patch_size,
//                               test_fraction, seed
//   [experiment <name>]         use_tv, use_ssim, use_cl, few_shot, and
//                               any TrainConfig key
//
// Relative paths are resolved against the plan file's directory.
struct ExperimentPlan {
    std::string name;
    fs::path output_dir;
    std::vector<DatasetEntry> datasets;
    std::vector<ExperimentEntry> experiments;
    std::vector<std::string> few_shot{"all"};
    std::vector<uint64_t> seeds{0};
    io::Section train;
    inference::TilingSpec tiling;
    metrics::NrmseNorm nrmse_norm = metrics::NrmseNorm::Range;
    // Few-shot cells take as many steps per epoch as the full-data cell.
    bool few_shot_match_steps = true;
    bool keep_checkpoints = true;

    // Throws InvalidConfig on duplicate names, MissingFile on absent manifests.
    void validate() const;
};

ExperimentPlan parse_plan(const std::string& text, const fs::path& base_dir = {});
ExperimentPlan load_plan(const fs::path& path);

struct Cell {
    std::string dataset;
    std::string experiment;
    std::string few_shot; // "all" or a count
    uint64_t seed = 0;

    // Relative output directory, e.g. "convallaria/CL+TV+SSIM/n_16/seed_0".
    fs::path relative_dir() const;
    std::string label() const;
};

std::vector<Cell> plan_cells(const ExperimentPlan& plan);

const DatasetEntry& find_dataset(const ExperimentPlan& plan, const std::string& name);
const ExperimentEntry& find_experiment(const ExperimentPlan& plan, const std::string& name);

data::DenoisingDataset load_dataset(const DatasetEntry& entry);
// Effective training configuration of one cell (before few-shot step matching).
training::TrainConfig cell_config(const ExperimentPlan& plan, const Cell& cell, const io::Section& cli_overrides = {});

struct CellOutcome {
    Cell cell;
    bool skipped = false;
    bool failed = false;
    std::string error_code;
    std::string error_message;
    metrics::MetricReport report;
    std::string hash;
};

struct RunOptions {
    io::Section overrides; // applied to every cell last
    std::function<void(const Cell&, const std::string& status)> on_cell;
    std::function<void(const Cell&, const training::StepBreakdown&)> on_step;
};

struct PlanResult {
    std::vector<CellOutcome> cells;
    metrics::MetricReport report;
    int64_t trained = 0;
    int64_t skipped = 0;
    int64_t failed = 0;
};

// Runs (or skips, when an identical completed run exists) one cell and
// persists report.csv, losses.csv, run_manifest.txt under its directory.
CellOutcome run_cell(const ExperimentPlan& plan, const Cell& cell, const data::DenoisingDataset& dataset,
                     const RunOptions& options = {});

// Every cell in order; failures are logged to <output_dir>/failures.csv and the
// remaining cells proceed. Writes plan_report.csv and plan_aggregate.csv at the root.
PlanResult run_plan(const ExperimentPlan& plan, const RunOptions& options = {});

// ---- tables ------------------------------------------------------------------------

struct BestMark {
    std::string dataset;
    std::string n_samples;
    std::string metric; // "psnr", "ssim" or "nrmse"
    std::string experiment;
};

struct TableResult {
    metrics::MetricReport merged;
    std::vector<BestMark> best;
    std::string aggregate_csv;
    std::string text;
};

// Number of enabled extra terms, guessed from an experiment name when unknown
// ("baseline" = 0; otherwise counts of TV, SSIM and CL tokens; "all" = 3).
int complexity_from_name(const std::string& experiment);

// Means per (dataset, experiment, n_samples) and the best value per
// (dataset, n_samples) column: highest PSNR and SSIM, lowest NRMSE. Exact ties
// go to the experiment with fewer enabled terms.
TableResult make_table(const std::vector<metrics::MetricReport>& reports,
                       const std::map<std::string, int>& complexity = {});
// Reads report CSVs (a directory contributes every report.csv below it).
std::vector<metrics::MetricReport> read_reports(const std::vector<fs::path>& inputs);

} // namespace fsd::harness
