#include <gtest/gtest.h>

#include <filesystem>

#include "qdalign/image.hpp"
#include "qdalign/random.hpp"

using namespace qdalign;

namespace {

std::string tmp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "qdalign_unit";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

std::string raw_pgm(int w, int h, const std::vector<int>& px, const std::string& comments = "") {
    std::string s = "P5\n" + comments + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
    for (int v : px) {
        s.push_back(static_cast<char>(v >> 8));
        s.push_back(static_cast<char>(v & 0xff));
    }
    return s;
}

}  // namespace

TEST(Image, RejectsInvalidConstruction) {
    EXPECT_THROW(Image(0, 3), ContractError);
    EXPECT_THROW(Image(3, 3, 0.0), ContractError);
    EXPECT_THROW(Image::from_counts(2, 1, {1.0, -1.0}), ContractError);
    EXPECT_THROW(Image::from_counts(2, 2, {1.0}), ContractError);
}

TEST(Image, DecodesTwoByTwo) {
    const auto img = decode_pgm(raw_pgm(2, 2, {0, 1, 2, 3}));
    EXPECT_EQ(img.width(), 2);
    EXPECT_EQ(img.height(), 2);
    EXPECT_DOUBLE_EQ(img(0, 0), 0);
    EXPECT_DOUBLE_EQ(img(1, 0), 1);
    EXPECT_DOUBLE_EQ(img(0, 1), 2);
    EXPECT_DOUBLE_EQ(img(1, 1), 3);
    EXPECT_DOUBLE_EQ(img.pitch_nm(), 59.0);
}

TEST(Image, ReadsPitchAndMetadata) {
    const auto img = decode_pgm(raw_pgm(1, 1, {7}, "# pitch_nm=61.5\n# mode=doped\n"));
    EXPECT_DOUBLE_EQ(img.pitch_nm(), 61.5);
    ASSERT_TRUE(img.meta("mode"));
    EXPECT_EQ(*img.meta("mode"), "doped");
}

TEST(Image, MalformedHeaderIsFormatError) {
    EXPECT_THROW(decode_pgm("P2\n1 1\n255\n0"), FormatError);
    EXPECT_THROW(decode_pgm("P5\nx 1\n65535\n"), FormatError);
    EXPECT_THROW(decode_pgm("P5\n1 1\n"), FormatError);
}

TEST(Image, TruncatedPayloadIsIoError) {
    auto s = raw_pgm(4, 4, std::vector<int>(16, 9));
    s.resize(s.size() - 3);
    EXPECT_THROW(decode_pgm(s), IoError);
}

TEST(Image, MissingFileIsIoError) { EXPECT_THROW(load_image("/nonexistent/none.pgm"), IoError); }

TEST(Image, SaveLoadRoundTripIsBitIdentical) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        const int w = 1 + static_cast<int>(rng.next() % 64), h = 1 + static_cast<int>(rng.next() % 64);
        Image img(w, h);
        for (auto& v : img.counts()) v = static_cast<double>(rng.next() % 65536);
        const std::string path = tmp_path("rt_" + std::to_string(seed) + ".pgm");
        save_image(img, path);
        const auto bytes1 = read_file(path);
        const auto loaded = load_image(path);
        EXPECT_EQ(loaded, img);
        save_image(loaded, path);
        EXPECT_EQ(read_file(path), bytes1);
    }
}

TEST(Image, ForeignFileRoundTripKeepsBytes) {
    const std::string src = raw_pgm(3, 2, {0, 65535, 12, 300, 4, 5}, "# pitch_nm=59.00\n# exposure_s=1\n");
    const auto img = decode_pgm(src);
    EXPECT_EQ(encode_pgm(img), src);
}

TEST(Image, CropClipsToFrame) {
    Image img(4, 4);
    img(3, 3) = 5;
    const auto c = img.crop({2, 2, 5, 5});
    EXPECT_EQ(c.width(), 2);
    EXPECT_DOUBLE_EQ(c(1, 1), 5);
    EXPECT_THROW(img.crop({10, 10, 2, 2}), ContractError);
}
