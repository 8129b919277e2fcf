#include "fsdenoise/io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "fsdenoise/error.hpp"

namespace fsd::io {

namespace {

Image from_mat(const cv::Mat& m, const fs::path& path) {
    if (m.channels() != 1) {
        throw Error(ErrorCode::NonImageData, path.string() + " has " + std::to_string(m.channels()) + " channels");
    }
    cv::Mat d;
    switch (m.depth()) {
    case CV_8U:
    case CV_16U:
    case CV_32F:
    case CV_64F:
        m.convertTo(d, CV_64F);
        break;
    default:
        throw Error(ErrorCode::NonImageData, path.string() + " has an unsupported pixel type");
    }
    Image img(d.rows, d.cols);
    for (int r = 0; r < d.rows; ++r) {
        const auto* row = d.ptr<double>(r);
        std::copy(row, row + d.cols, img.px.begin() + static_cast<std::ptrdiff_t>(r) * d.cols);
    }
    return img;
}

cv::Mat to_mat(const Image& img, int type, double scale = 1.0, double shift = 0.0) {
    cv::Mat d(static_cast<int>(img.rows), static_cast<int>(img.cols), CV_64F);
    for (int r = 0; r < d.rows; ++r) {
        std::copy_n(img.px.begin() + static_cast<std::ptrdiff_t>(r) * d.cols, d.cols, d.ptr<double>(r));
    }
    cv::Mat out;
    d.convertTo(out, type, scale, shift);
    return out;
}

void write_mat(const fs::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    if (!cv::imwrite(path.string(), m)) {
        throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
    }
}

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw Error(ErrorCode::CorruptFile, "truncated file " + path.string());
    }
    return v;
}

} // namespace

bool is_image_file(const fs::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".tif" || ext == ".tiff" || ext == ".png";
}

std::vector<Image> read_image_pages(const fs::path& path) {
    if (!fs::exists(path)) {
        throw Error(ErrorCode::MissingFile, path.string());
    }
    std::vector<cv::Mat> pages;
    bool ok = false;
    try {
        ok = cv::imreadmulti(path.string(), pages, cv::IMREAD_UNCHANGED);
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok || pages.empty()) {
        throw Error(ErrorCode::NonImageData, "cannot decode " + path.string());
    }
    std::vector<Image> out;
    out.reserve(pages.size());
    for (const cv::Mat& m : pages) {
        out.push_back(from_mat(m, path));
    }
    return out;
}

void write_png8(const fs::path& path, const Image& img, double lo, double hi) {
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    // convertTo saturates and rounds to nearest.
    write_mat(path, to_mat(img, CV_8U, scale, -lo * scale));
}

void write_tiff_float(const fs::path& path, const Image& img) { write_mat(path, to_mat(img, CV_32F)); }

void write_tiff_u16(const fs::path& path, const Image& img) { write_mat(path, to_mat(img, CV_16U)); }

std::vector<Image> read_raw_array(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error(ErrorCode::MissingFile, path.string());
    }
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || std::memcmp(magic.data(), kRawMagic, 8) != 0) {
        throw Error(ErrorCode::NonImageData, path.string() + " is not a raw array file");
    }
    const auto dtype = get<uint32_t>(is, path);
    const auto h = get<uint32_t>(is, path);
    const auto w = get<uint32_t>(is, path);
    const auto n = get<uint32_t>(is, path);
    if (h == 0 || w == 0 || n == 0) {
        throw Error(ErrorCode::NonImageData, path.string() + " declares an empty array");
    }
    std::vector<Image> frames;
    for (uint32_t f = 0; f < n; ++f) {
        Image img(h, w);
        for (double& v : img.px) {
            switch (static_cast<RawDtype>(dtype)) {
            case RawDtype::U8: v = get<uint8_t>(is, path); break;
            case RawDtype::U16: v = get<uint16_t>(is, path); break;
            case RawDtype::F32: v = get<float>(is, path); break;
            case RawDtype::F64: v = get<double>(is, path); break;
            default: throw Error(ErrorCode::NonImageData, "unknown dtype code " + std::to_string(dtype));
            }
        }
        frames.push_back(std::move(img));
    }
    return frames;
}

void write_raw_array(const fs::path& path, const std::vector<Image>& frames, RawDtype dtype) {
    if (frames.empty()) {
        throw Error(ErrorCode::NonImageData, "no frames to write");
    }
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
    }
    os.write(kRawMagic, 8);
    put(os, static_cast<uint32_t>(dtype));
    put(os, static_cast<uint32_t>(frames[0].rows));
    put(os, static_cast<uint32_t>(frames[0].cols));
    put(os, static_cast<uint32_t>(frames.size()));
    for (const Image& f : frames) {
        if (!f.same_shape(frames[0])) {
            throw Error(ErrorCode::MixedShapes, "raw array frames differ in shape");
        }
        for (double v : f.px) {
            switch (dtype) {
            case RawDtype::U8: put(os, static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L))); break;
            case RawDtype::U16: put(os, static_cast<uint16_t>(std::clamp(std::lround(v), 0L, 65535L))); break;
            case RawDtype::F32: put(os, static_cast<float>(v)); break;
            case RawDtype::F64: put(os, v); break;
            }
        }
    }
}

// ------------------------------------------------------------------ key/value

bool Section::has(const std::string& key) const {
    return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.first == key; });
}

const std::string& Section::get(const std::string& key) const {
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        if (it->first == key) {
            return it->second;
        }
    }
    throw Error(ErrorCode::InvalidConfig, "missing key '" + key + "' in section [" + name + "]");
}

std::string Section::get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<Section> parse_key_value(const std::string& text) {
    std::vector<Section> sections{{"", {}}};
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw Error(ErrorCode::InvalidConfig, "malformed section header on line " + std::to_string(lineno));
            }
            sections.push_back({trim(line.substr(1, line.size() - 2)), {}});
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::InvalidConfig, "expected key = value on line " + std::to_string(lineno));
        }
        sections.back().entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return sections;
}

std::string read_text_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error(ErrorCode::MissingFile, path.string());
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<Section> read_key_value_file(const fs::path& path) { return parse_key_value(read_text_file(path)); }

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
    }
    os << text;
}

std::vector<std::string> split_list(const std::string& value, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(value);
    while (std::getline(is, item, sep)) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

double parse_double(const std::string& s, const std::string& what) {
    const std::string t = trim(s);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
        if (t == "inf") {
            return std::numeric_limits<double>::infinity();
        }
        throw Error(ErrorCode::InvalidConfig, "invalid number '" + s + "' for " + what);
    }
    return v;
}

int64_t parse_int(const std::string& s, const std::string& what) {
    const std::string t = trim(s);
    int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
        throw Error(ErrorCode::InvalidConfig, "invalid integer '" + s + "' for " + what);
    }
    return v;
}

bool parse_bool(const std::string& s, const std::string& what) {
    const std::string t = trim(s);
    if (t == "true" || t == "1" || t == "yes" || t == "on") {
        return true;
    }
    if (t == "false" || t == "0" || t == "no" || t == "off") {
        return false;
    }
    throw Error(ErrorCode::InvalidConfig, "invalid boolean '" + s + "' for " + what);
}

std::string format_double(double v) {
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    if (std::isnan(v)) {
        return "nan";
    }
    std::array<char, 64> buf{};
    const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

} // namespace fsd::io
