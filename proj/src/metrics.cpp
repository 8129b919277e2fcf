#include "fsdenoise/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

#include "fsdenoise/error.hpp"
#include "fsdenoise/io.hpp"

namespace fsd::metrics {

namespace {

void check_shapes(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + std::to_string(a.rows) + "x" +
                                                  std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                                  std::to_string(b.cols));
    }
}

double mse(const Image& a, const Image& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.px.size(); ++i) {
        const double d = a.px[i] - b.px[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.px.size());
}

losses::ImageBatchView view(const Image& img) { return {img.px, 1, img.rows, img.cols}; }

} // namespace

double psnr(const Image& reference, const Image& candidate, double data_range) {
    check_shapes(reference, candidate, "psnr");
    if (!(data_range > 0.0)) {
        throw Error(ErrorCode::InvalidConfig, "PSNR data range must be positive");
    }
    const double m = mse(reference, candidate);
    if (m == 0.0) {
        return kInfinitePsnr;
    }
    return 10.0 * std::log10(data_range * data_range / m);
}

double ssim_metric(const Image& reference, const Image& candidate, const losses::SSIMParams& params) {
    check_shapes(reference, candidate, "ssim");
    return losses::ssim_index(view(reference), view(candidate), params);
}

std::string to_string(NrmseNorm n) {
    switch (n) {
    case NrmseNorm::Range: return "range";
    case NrmseNorm::Mean: return "mean";
    case NrmseNorm::Euclidean: return "euclidean";
    }
    return "range";
}

NrmseNorm parse_nrmse_norm(const std::string& s) {
    if (s == "range") return NrmseNorm::Range;
    if (s == "mean") return NrmseNorm::Mean;
    if (s == "euclidean") return NrmseNorm::Euclidean;
    throw Error(ErrorCode::InvalidConfig, "unknown NRMSE normalisation '" + s + "'");
}

double nrmse(const Image& reference, const Image& candidate, NrmseNorm norm) {
    check_shapes(reference, candidate, "nrmse");
    double denom = 0.0;
    switch (norm) {
    case NrmseNorm::Range: {
        const auto [mn, mx] = std::minmax_element(reference.px.begin(), reference.px.end());
        denom = *mx - *mn;
        break;
    }
    case NrmseNorm::Mean: {
        double s = 0.0;
        for (double v : reference.px) {
            s += v;
        }
        denom = s / static_cast<double>(reference.px.size());
        break;
    }
    case NrmseNorm::Euclidean: {
        double s = 0.0;
        for (double v : reference.px) {
            s += v * v;
        }
        denom = std::sqrt(s / static_cast<double>(reference.px.size()));
        break;
    }
    }
    if (denom == 0.0) {
        throw Error(ErrorCode::DegenerateReference, "NRMSE " + to_string(norm) + " normaliser is zero");
    }
    return std::sqrt(mse(reference, candidate)) / denom;
}

void MetricReport::finalize() {
    std::sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
        return std::tie(a.dataset, a.experiment, a.n_samples, a.image_id) <
               std::tie(b.dataset, b.experiment, b.n_samples, b.image_id);
    });
    aggregates.clear();
    for (const MetricRow& r : rows) {
        if (aggregates.empty() || aggregates.back().dataset != r.dataset ||
            aggregates.back().experiment != r.experiment || aggregates.back().n_samples != r.n_samples) {
            aggregates.push_back({r.dataset, r.experiment, r.n_samples, 0, 0.0, 0.0, 0.0});
        }
        MetricAggregate& a = aggregates.back();
        ++a.count;
        a.psnr += r.psnr;
        a.ssim += r.ssim;
        a.nrmse += r.nrmse;
    }
    for (MetricAggregate& a : aggregates) {
        const auto n = static_cast<double>(a.count);
        a.psnr /= n;
        a.ssim /= n;
        a.nrmse /= n;
    }
}

std::string report_csv(const MetricReport& report) {
    std::ostringstream os;
    os << kReportHeader << '\n';
    for (const MetricRow& r : report.rows) {
        os << r.dataset << ',' << r.experiment << ',' << r.n_samples << ',' << r.image_id << ','
           << io::format_double(r.psnr) << ',' << io::format_double(r.ssim) << ',' << io::format_double(r.nrmse)
           << '\n';
    }
    return os.str();
}

std::string aggregate_csv(const MetricReport& report) {
    std::ostringstream os;
    os << kAggregateHeader << '\n';
    for (const MetricAggregate& a : report.aggregates) {
        os << a.dataset << ',' << a.experiment << ',' << a.n_samples << ',' << a.count << ','
           << io::format_double(a.psnr) << ',' << io::format_double(a.ssim) << ',' << io::format_double(a.nrmse)
           << '\n';
    }
    return os.str();
}

MetricReport parse_report_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || io::trim(line) != kReportHeader) {
        throw Error(ErrorCode::SchemaMismatch, "report header is not '" + std::string(kReportHeader) + "'");
    }
    MetricReport report;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (io::trim(line).empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::string item;
        std::istringstream ls(line);
        while (std::getline(ls, item, ',')) {
            f.push_back(io::trim(item));
        }
        if (f.size() != 7) {
            throw Error(ErrorCode::SchemaMismatch, "report line " + std::to_string(lineno) + " has " +
                                                       std::to_string(f.size()) + " fields");
        }
        report.rows.push_back({f[0], f[1], f[2], io::parse_int(f[3], "image_id"), io::parse_double(f[4], "psnr"),
                               io::parse_double(f[5], "ssim"), io::parse_double(f[6], "nrmse")});
    }
    report.finalize();
    return report;
}

void write_report(const MetricReport& report, const fs::path& rows_csv, const fs::path& aggregate_csv_path) {
    io::write_text_file(rows_csv, report_csv(report));
    io::write_text_file(aggregate_csv_path, aggregate_csv(report));
}

MetricReport evaluate(const FrameDenoiser& model, const data::DenoisingDataset& dataset, const EvaluationParams& params) {
    if (dataset.test_indices.empty()) {
        throw Error(ErrorCode::EmptyTestSet, "dataset '" + dataset.name + "' has no test frames");
    }
    MetricReport report;
    for (int64_t idx : dataset.test_indices) {
        const data::DenoisingPair& p = dataset.pairs.at(static_cast<size_t>(idx));
        const Image denoised = model(p.noisy);
        report.rows.push_back({params.dataset, params.experiment, params.n_samples, p.image_id,
                               psnr(*p.clean, denoised, params.data_range),
                               ssim_metric(*p.clean, denoised, params.ssim),
                               nrmse(*p.clean, denoised, params.nrmse_norm)});
    }
    report.finalize();
    return report;
}

} // namespace fsd::metrics
