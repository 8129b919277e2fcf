#include "fsdenoise/image.hpp"

#include <string>

#include "fsdenoise/error.hpp"

namespace fsd {

Image crop(const Image& img, int64_t row0, int64_t row1, int64_t col0, int64_t col1) {
    if (row0 < 0 || col0 < 0 || row1 > img.rows || col1 > img.cols || row0 >= row1 || col0 >= col1) {
        throw Error(ErrorCode::CropOutOfBounds, "window (" + std::to_string(row0) + "," + std::to_string(row1) + "," +
                                                    std::to_string(col0) + "," + std::to_string(col1) +
                                                    ") outside " + std::to_string(img.rows) + "x" +
                                                    std::to_string(img.cols));
    }
    Image out(row1 - row0, col1 - col0);
    for (int64_t r = row0; r < row1; ++r) {
        for (int64_t c = col0; c < col1; ++c) {
            out(r - row0, c - col0) = img(r, c);
        }
    }
    return out;
}

Image flip_horizontal(const Image& img) {
    Image out(img.rows, img.cols);
    for (int64_t r = 0; r < img.rows; ++r) {
        for (int64_t c = 0; c < img.cols; ++c) {
            out(r, c) = img(r, img.cols - 1 - c);
        }
    }
    return out;
}

Image flip_vertical(const Image& img) {
    Image out(img.rows, img.cols);
    for (int64_t r = 0; r < img.rows; ++r) {
        for (int64_t c = 0; c < img.cols; ++c) {
            out(r, c) = img(img.rows - 1 - r, c);
        }
    }
    return out;
}

Image rotate90(const Image& img, int quarter_turns) {
    Image out = img;
    for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
        Image next(out.cols, out.rows);
        // counter-clockwise: new(r, c) = old(c, cols-1-r)
        for (int64_t r = 0; r < next.rows; ++r) {
            for (int64_t c = 0; c < next.cols; ++c) {
                next(r, c) = out(c, out.cols - 1 - r);
            }
        }
        out = std::move(next);
    }
    return out;
}

namespace {

int64_t reflect_index(int64_t i, int64_t n) {
    if (n == 1) {
        return 0;
    }
    const int64_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) {
        i += period;
    }
    return i < n ? i : period - i;
}

} // namespace

Image reflect_pad(const Image& img, int64_t top, int64_t bottom, int64_t left, int64_t right) {
    Image out(img.rows + top + bottom, img.cols + left + right);
    for (int64_t r = 0; r < out.rows; ++r) {
        const int64_t sr = reflect_index(r - top, img.rows);
        for (int64_t c = 0; c < out.cols; ++c) {
            out(r, c) = img(sr, reflect_index(c - left, img.cols));
        }
    }
    return out;
}

} // namespace fsd
