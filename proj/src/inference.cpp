#include "fsdenoise/inference.hpp"

#include <algorithm>

#include "fsdenoise/error.hpp"
#include "fsdenoise/io.hpp"

namespace fsd::inference {

std::string to_string(Blend b) { return b == Blend::LinearRamp ? "linear-ramp" : "uniform-average"; }

Blend parse_blend(const std::string& s) {
    if (s == "linear-ramp") return Blend::LinearRamp;
    if (s == "uniform-average") return Blend::UniformAverage;
    throw Error(ErrorCode::InvalidConfig, "unknown blend '" + s + "'");
}

void TilingSpec::validate() const {
    if (tile < 1 || overlap < 0 || overlap >= tile) {
        throw Error(ErrorCode::InvalidConfig, "tiling needs 0 <= overlap < tile");
    }
}

TileModel generator_tile_model(const models::Generator& generator) {
    return [&generator](const Image& tile) {
        const nn::NoGradGuard no_grad;
        const nn::Tensor x = nn::Tensor::from({1, 1, tile.rows, tile.cols}, tile.px);
        Rng rng = make_rng(0);
        const auto out = generator.forward(x, models::Mode::Eval, &rng);
        return Image(tile.rows, tile.cols, std::vector<double>(out.image.data().begin(), out.image.data().end()));
    };
}

std::vector<int64_t> tile_starts(int64_t length, int64_t tile, int64_t overlap) {
    std::vector<int64_t> starts;
    const int64_t step = tile - overlap;
    for (int64_t s = 0;; s += step) {
        if (s + tile >= length) {
            starts.push_back(std::max<int64_t>(0, length - tile));
            break;
        }
        starts.push_back(s);
    }
    return starts;
}

std::vector<double> blend_profile(const TilingSpec& spec) {
    std::vector<double> w(static_cast<size_t>(spec.tile), 1.0);
    if (spec.blend == Blend::LinearRamp && spec.overlap > 0) {
        const double ramp = static_cast<double>(spec.overlap + 1);
        for (int64_t i = 0; i < spec.tile; ++i) {
            const double up = static_cast<double>(i + 1) / ramp;
            const double down = static_cast<double>(spec.tile - i) / ramp;
            w[static_cast<size_t>(i)] = std::min({1.0, up, down});
        }
    }
    return w;
}

Image denoise_frame(const TileModel& model, const Image& frame, const TilingSpec& spec) {
    spec.validate();
    const int64_t pad_r = std::max<int64_t>(0, spec.tile - frame.rows);
    const int64_t pad_c = std::max<int64_t>(0, spec.tile - frame.cols);
    const Image padded = (pad_r || pad_c) ? reflect_pad(frame, pad_r / 2, pad_r - pad_r / 2, pad_c / 2, pad_c - pad_c / 2)
                                          : frame;
    const auto rows = tile_starts(padded.rows, spec.tile, spec.overlap);
    const auto cols = tile_starts(padded.cols, spec.tile, spec.overlap);
    const auto profile = blend_profile(spec);

    Image acc(padded.rows, padded.cols, 0.0);
    Image wsum(padded.rows, padded.cols, 0.0);
    for (int64_t r0 : rows) {
        for (int64_t c0 : cols) {
            const Image out = model(crop(padded, r0, r0 + spec.tile, c0, c0 + spec.tile));
            if (out.rows != spec.tile || out.cols != spec.tile) {
                throw Error(ErrorCode::ShapeMismatch, "tile model changed the tile shape");
            }
            for (int64_t r = 0; r < spec.tile; ++r) {
                for (int64_t c = 0; c < spec.tile; ++c) {
                    const double w = profile[static_cast<size_t>(r)] * profile[static_cast<size_t>(c)];
                    acc(r0 + r, c0 + c) += w * out(r, c);
                    wsum(r0 + r, c0 + c) += w;
                }
            }
        }
    }
    for (size_t i = 0; i < acc.px.size(); ++i) {
        acc.px[i] /= wsum.px[i];
    }
    if (pad_r || pad_c) {
        return crop(acc, pad_r / 2, pad_r / 2 + frame.rows, pad_c / 2, pad_c / 2 + frame.cols);
    }
    return acc;
}

std::string CropBox::tag() const {
    return "crop_" + std::to_string(row0) + "_" + std::to_string(row1) + "_" + std::to_string(col0) + "_" +
           std::to_string(col1);
}

CropExport export_crops(const Image& noisy, const Image& denoised, const Image& gt, const CropBox& box,
                        const fs::path& out_dir, const std::string& prefix) {
    if (!noisy.same_shape(denoised) || !noisy.same_shape(gt)) {
        throw Error(ErrorCode::ShapeMismatch, "noisy, denoised and gt frames must share a shape");
    }
    const Image crops[3] = {crop(noisy, box.row0, box.row1, box.col0, box.col1),
                            crop(denoised, box.row0, box.row1, box.col0, box.col1),
                            crop(gt, box.row0, box.row1, box.col0, box.col1)};
    CropExport out;
    out.display_low = crops[0].px.front();
    out.display_high = out.display_low;
    for (const Image& c : crops) {
        const auto [mn, mx] = std::minmax_element(c.px.begin(), c.px.end());
        out.display_low = std::min(out.display_low, *mn);
        out.display_high = std::max(out.display_high, *mx);
    }
    const char* names[3] = {"noisy", "denoised", "gt"};
    const std::string stem = prefix.empty() ? "" : prefix + "_";
    for (int i = 0; i < 3; ++i) {
        out.files[static_cast<size_t>(i)] = out_dir / (stem + names[i] + "_" + box.tag() + ".png");
        io::write_png8(out.files[static_cast<size_t>(i)], crops[i], out.display_low, out.display_high);
    }
    return out;
}

} // namespace fsd::inference
