#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fsdenoise/error.hpp"
#include "fsdenoise/io.hpp"
#include "support.hpp"

namespace io = fsd::io;
using fsd::Image;

namespace {

Image integer_image(int64_t rows, int64_t cols, double scale, uint64_t seed) {
    Image img = testing::random_image(rows, cols, seed);
    for (double& v : img.px) v = std::round(v * scale);
    return img;
}

} // namespace

TEST_CASE("raw array round trip for every dtype") {
    const auto dir = testing::temp_dir("raw");
    const std::vector<Image> u8{integer_image(5, 7, 255, 1), integer_image(5, 7, 255, 2)};
    io::write_raw_array(dir / "a.fsda", u8, io::RawDtype::U8);
    CHECK(io::read_raw_array(dir / "a.fsda") == u8);
    const std::vector<Image> u16{integer_image(4, 3, 65535, 3)};
    io::write_raw_array(dir / "b.fsda", u16, io::RawDtype::U16);
    CHECK(io::read_raw_array(dir / "b.fsda") == u16);
    const std::vector<Image> f64{testing::random_image(6, 6, 4), testing::random_image(6, 6, 5)};
    io::write_raw_array(dir / "c.fsda", f64, io::RawDtype::F64);
    CHECK(io::read_raw_array(dir / "c.fsda") == f64);
    io::write_raw_array(dir / "d.fsda", f64, io::RawDtype::F32);
    const auto f32 = io::read_raw_array(dir / "d.fsda");
    REQUIRE(f32.size() == 2);
    for (size_t i = 0; i < f64[0].px.size(); ++i)
        CHECK(f32[0].px[i] == static_cast<double>(static_cast<float>(f64[0].px[i])));
}

TEST_CASE("raw array file layout") {
    const auto dir = testing::temp_dir("raw_layout");
    io::write_raw_array(dir / "x.fsda", {Image(2, 3, 7.0)}, io::RawDtype::U8);
    std::ifstream in(dir / "x.fsda", std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() == 8 + 16 + 6);
    CHECK(bytes.substr(0, 8) == "FSDARRAY");
    CHECK(bytes[8] == 1);
    CHECK(bytes[12] == 2);
    CHECK(bytes[16] == 3);
    CHECK(bytes[20] == 1);
    CHECK(bytes[24] == 7);
}

TEST_CASE("corrupt raw arrays are rejected") {
    const auto dir = testing::temp_dir("raw_bad");
    io::write_text_file(dir / "bad.fsda", "NOTARRAY and some bytes");
    CHECK_THROWS_AS(io::read_raw_array(dir / "bad.fsda"), fsd::Error);
    CHECK_THROWS_AS(io::read_raw_array(dir / "missing.fsda"), fsd::Error);
}

TEST_CASE("TIFF and PNG round trips") {
    const auto dir = testing::temp_dir("raster");
    const Image u16 = integer_image(9, 13, 65535, 6);
    io::write_tiff_u16(dir / "a.tif", u16);
    const auto pages = io::read_image_pages(dir / "a.tif");
    REQUIRE(pages.size() == 1);
    CHECK(pages[0] == u16);

    const Image f = testing::random_image(8, 8, 7);
    io::write_tiff_float(dir / "b.tif", f);
    const auto fp = io::read_image_pages(dir / "b.tif");
    REQUIRE(fp.size() == 1);
    for (size_t i = 0; i < f.px.size(); ++i) CHECK(fp[0].px[i] == static_cast<double>(static_cast<float>(f.px[i])));

    // write_png8 maps [lo, hi] linearly onto [0, 255].
    const Image ramp(1, 4, std::vector<double>{0.0, 1.0, 2.0, 3.0});
    io::write_png8(dir / "c.png", ramp, 0.0, 3.0);
    const auto png = io::read_image_pages(dir / "c.png");
    REQUIRE(png.size() == 1);
    CHECK(png[0].px == std::vector<double>{0, 85, 170, 255});
    CHECK(io::is_image_file(dir / "c.png"));
    CHECK_FALSE(io::is_image_file(dir / "c.txt"));
}

TEST_CASE("key/value parsing") {
    const auto secs = io::parse_key_value("top = 1\n# comment\n[a]\nx = 2  # trailing\ny=hello world\n\n[b]\nx = 3\nx = 4\n");
    REQUIRE(secs.size() == 3);
    CHECK(secs[0].name == "");
    CHECK(secs[0].get("top") == "1");
    CHECK(secs[1].name == "a");
    CHECK(secs[1].get("x") == "2");
    CHECK(secs[1].get("y") == "hello world");
    CHECK(secs[2].get("x") == "4");
    CHECK(secs[2].get_or("z", "d") == "d");
    CHECK_THROWS_AS(secs[2].get("z"), fsd::Error);
    CHECK_THROWS_AS(io::parse_key_value("no equals sign here\n"), fsd::Error);
}

TEST_CASE("value helpers") {
    CHECK(io::split_list(" a, b ,c ") == std::vector<std::string>{"a", "b", "c"});
    CHECK(io::trim("  x y \t") == "x y");
    CHECK(io::parse_double("2e-4", "lr") == 2e-4);
    CHECK(io::parse_int("32", "batch") == 32);
    CHECK(io::parse_bool("true", "f"));
    CHECK_FALSE(io::parse_bool("false", "f"));
    CHECK_THROWS_AS(io::parse_int("3.5", "batch"), fsd::Error);
    CHECK_THROWS_AS(io::parse_double("abc", "lr"), fsd::Error);
    CHECK_THROWS_AS(io::parse_bool("maybe", "f"), fsd::Error);
    for (double v : {0.1, 1.0 / 3.0, 2e-4, 1e300, -7.25}) CHECK(io::parse_double(io::format_double(v), "v") == v);
}
