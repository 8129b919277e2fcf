#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fsdenoise/image.hpp"

namespace fsd::io {

namespace fs = std::filesystem;

// ---- raster images -----------------------------------------------------------

// Every page of a TIFF or the single page of a PNG; grayscale 8/16-bit
// unsigned or 32-bit float. Multi-channel pages raise NonImageData.
std::vector<Image> read_image_pages(const fs::path& path);
bool is_image_file(const fs::path& path);

void write_png8(const fs::path& path, const Image& img, double lo, double hi);
void write_tiff_float(const fs::path& path, const Image& img);
// Values rounded and clamped to [0, 65535].
void write_tiff_u16(const fs::path& path, const Image& img);

// ---- raw array file ------------------------------------------------------------
//
// Little-endian layout:
//   8 bytes  magic "FSDARRAY"
//   uint32   dtype code (1 = uint8, 2 = uint16, 3 = float32, 4 = float64)
//   uint32   H
//   uint32   W
//   uint32   N
//   N*H*W    samples, frame-major then row-major
inline constexpr char kRawMagic[8] = {'F', 'S', 'D', 'A', 'R', 'R', 'A', 'Y'};

enum class RawDtype : uint32_t { U8 = 1, U16 = 2, F32 = 3, F64 = 4 };

std::vector<Image> read_raw_array(const fs::path& path);
void write_raw_array(const fs::path& path, const std::vector<Image>& frames, RawDtype dtype = RawDtype::F32);

// ---- key/value text files ----------------------------------------------------------
//
// Lines are "key = value"; "[name]" opens a section; '#' starts a comment.
// Keys before the first header belong to the unnamed section "".
struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;

    bool has(const std::string& key) const;
    // Last value for key; throws InvalidConfig if absent.
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
};

std::vector<Section> parse_key_value(const std::string& text);
std::vector<Section> read_key_value_file(const fs::path& path);
std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, const std::string& text);

// Helpers for the textual encodings used in manifests and plans.
std::vector<std::string> split_list(const std::string& value, char sep = ',');
std::string trim(const std::string& s);
double parse_double(const std::string& s, const std::string& what);
int64_t parse_int(const std::string& s, const std::string& what);
bool parse_bool(const std::string& s, const std::string& what);
// Shortest round-trip decimal representation.
std::string format_double(double v);

} // namespace fsd::io
