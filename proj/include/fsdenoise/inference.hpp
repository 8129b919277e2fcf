#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fsdenoise/image.hpp"
#include "fsdenoise/models.hpp"

namespace fsd::inference {

namespace fs = std::filesystem;

enum class Blend { LinearRamp, UniformAverage };

std::string to_string(Blend b);
Blend parse_blend(const std::string& s);

struct TilingSpec {
    int64_t tile = 256;
    int64_t overlap = 32;
    Blend blend = Blend::LinearRamp;

    void validate() const;
};

// Maps a tile x tile patch to a same-sized output.
using TileModel = std::function<Image(const Image&)>;

// Wraps a trained generator (eval mode) as a tile model.
TileModel generator_tile_model(const models::Generator& generator);

// Tile start offsets covering [0, length) with the last tile flush to the end.
std::vector<int64_t> tile_starts(int64_t length, int64_t tile, int64_t overlap);
// Per-axis blend weight profile of length tile; strictly positive.
std::vector<double> blend_profile(const TilingSpec& spec);

// Overlapping tiles over a reflect-padded frame, blended by normalised
// position-only weights and cropped back to the input shape.
Image denoise_frame(const TileModel& model, const Image& frame, const TilingSpec& spec);

struct CropBox {
    int64_t row0 = 0;
    int64_t row1 = 0;
    int64_t col0 = 0;
    int64_t col1 = 0;

    std::string tag() const; // "crop_<row0>_<row1>_<col0>_<col1>"
};

struct CropExport {
    std::array<fs::path, 3> files; // noisy, denoised, gt
    double display_low = 0.0;
    double display_high = 1.0;
};

// Writes three 8-bit PNG crops sharing one display range (joint min/max of the
// three crops).
CropExport export_crops(const Image& noisy, const Image& denoised, const Image& gt, const CropBox& box,
                        const fs::path& out_dir, const std::string& prefix = "");

} // namespace fsd::inference
