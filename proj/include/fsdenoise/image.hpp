#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fsd {

// Single-channel 2-D intensity array, row-major.
struct Image {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> px;

    Image() = default;
    Image(int64_t r, int64_t c, double fill = 0.0) : rows(r), cols(c), px(static_cast<size_t>(r * c), fill) {}
    Image(int64_t r, int64_t c, std::vector<double> values) : rows(r), cols(c), px(std::move(values)) {}

    double& operator()(int64_t r, int64_t c) { return px[static_cast<size_t>(r * cols + c)]; }
    double operator()(int64_t r, int64_t c) const { return px[static_cast<size_t>(r * cols + c)]; }

    int64_t size() const { return rows * cols; }
    bool same_shape(const Image& o) const { return rows == o.rows && cols == o.cols; }
    std::span<const double> view() const { return px; }

    friend bool operator==(const Image&, const Image&) = default;
};

// Copy of the window [row0,row1) x [col0,col1).
Image crop(const Image& img, int64_t row0, int64_t row1, int64_t col0, int64_t col1);
Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
// Quarter turns counter-clockwise.
Image rotate90(const Image& img, int quarter_turns);
// Reflect padding without edge repetition (numpy "reflect").
Image reflect_pad(const Image& img, int64_t top, int64_t bottom, int64_t left, int64_t right);

} // namespace fsd
