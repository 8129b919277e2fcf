#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fsdenoise/data.hpp"
#include "fsdenoise/image.hpp"
#include "fsdenoise/losses.hpp"

namespace fsd::metrics {

namespace fs = std::filesystem;

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

// 10 log10(range^2 / MSE); +inf when MSE = 0.
double psnr(const Image& reference, const Image& candidate, double data_range = 1.0);

// Same computation as the SSIM loss term.
double ssim_metric(const Image& reference, const Image& candidate, const losses::SSIMParams& params = {});

enum class NrmseNorm { Range, Mean, Euclidean };
std::string to_string(NrmseNorm n);
NrmseNorm parse_nrmse_norm(const std::string& s);

// RMSE / (max - min | mean | RMS) of the reference.
double nrmse(const Image& reference, const Image& candidate, NrmseNorm norm = NrmseNorm::Range);

struct MetricRow {
    std::string dataset;
    std::string experiment;
    std::string n_samples;
    int64_t image_id = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    double nrmse = 0.0;
};

struct MetricAggregate {
    std::string dataset;
    std::string experiment;
    std::string n_samples;
    int64_t count = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    double nrmse = 0.0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    std::vector<MetricAggregate> aggregates;

    // Sorts rows by (dataset, experiment, n_samples, image_id) and recomputes the
    // per-(dataset, experiment, n_samples) means.
    void finalize();
};

inline constexpr const char* kReportHeader = "dataset,experiment,n_samples,image_id,psnr,ssim,nrmse";
inline constexpr const char* kAggregateHeader = "dataset,experiment,n_samples,count,psnr,ssim,nrmse";

std::string report_csv(const MetricReport& report);
std::string aggregate_csv(const MetricReport& report);
// Throws SchemaMismatch when the header differs.
MetricReport parse_report_csv(const std::string& text);
void write_report(const MetricReport& report, const fs::path& rows_csv, const fs::path& aggregate_csv_path);

// Maps one normalised frame to its denoised estimate.
using FrameDenoiser = std::function<Image(const Image&)>;

struct EvaluationParams {
    std::string dataset;
    std::string experiment;
    std::string n_samples = "all";
    double data_range = 1.0;
    losses::SSIMParams ssim;
    NrmseNorm nrmse_norm = NrmseNorm::Range;
};

// Denoises every test frame and scores it against its clean counterpart.
MetricReport evaluate(const FrameDenoiser& model, const data::DenoisingDataset& dataset, const EvaluationParams& params);

} // namespace fsd::metrics
