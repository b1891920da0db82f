#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "qdalign/error.hpp"

namespace qdalign {

/// Sample-plane size of one camera pixel (1024 px across a ~60 um field).
inline constexpr double kDefaultPitchNm = 59.0;

/// Axis-aligned pixel window into an image. Pixel (x0, y0) is the top-left corner.
struct Roi {
    int x0 = 0;
    int y0 = 0;
    int width = 0;
    int height = 0;
    bool merged = false;  ///< set when overlapping detections were combined

    double center_x() const { return x0 + 0.5 * (width - 1); }
    double center_y() const { return y0 + 0.5 * (height - 1); }
};

/// Row-major 2D grid of non-negative detector counts.
///
/// Pixel (x, y) has its center at (x * pitch, y * pitch) nm; x runs along a row,
/// y down the columns. Header comments of the form `key=value` are carried along
/// so that a load/save cycle reproduces the file.
class Image {
public:
    Image() : Image(1, 1) {}

    Image(int width, int height, double pitch_nm = kDefaultPitchNm)
        : width_(width), height_(height), pitch_nm_(pitch_nm),
          counts_(static_cast<std::size_t>(checked_area(width, height)), 0.0) {
        if (!(pitch_nm > 0.0) || !std::isfinite(pitch_nm))
            throw ContractError("Image: pixel pitch must be positive");
    }

    static Image from_counts(int width, int height, std::vector<double> counts,
                             double pitch_nm = kDefaultPitchNm) {
        Image img(width, height, pitch_nm);
        if (counts.size() != img.counts_.size())
            throw ContractError("Image: counts size does not match width*height");
        for (double v : counts)
            if (!(v >= 0.0) || !std::isfinite(v))
                throw ContractError("Image: counts must be finite and non-negative");
        img.counts_ = std::move(counts);
        return img;
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    double pitch_nm() const noexcept { return pitch_nm_; }
    std::size_t size() const noexcept { return counts_.size(); }

    double operator()(int x, int y) const { return counts_[index(x, y)]; }
    double& operator()(int x, int y) { return counts_[index(x, y)]; }

    bool contains(int x, int y) const noexcept {
        return x >= 0 && y >= 0 && x < width_ && y < height_;
    }

    std::span<const double> counts() const noexcept { return counts_; }
    std::span<double> counts() noexcept { return counts_; }

    std::span<const double> row(int y) const {
        return std::span<const double>(counts_).subspan(static_cast<std::size_t>(y) * width_, width_);
    }

    /// Header metadata (`# key=value` lines) other than pitch_nm, in file order.
    const std::vector<std::pair<std::string, std::string>>& metadata() const noexcept { return meta_; }

    std::optional<std::string> meta(const std::string& key) const {
        for (const auto& [k, v] : meta_)
            if (k == key) return v;
        return std::nullopt;
    }

    void set_meta(const std::string& key, std::string value) {
        for (auto& [k, v] : meta_)
            if (k == key) {
                v = std::move(value);
                return;
            }
        meta_.emplace_back(key, std::move(value));
    }

    /// Copy of the pixels inside `roi` (clipped to the frame); metadata is not copied.
    Image crop(const Roi& roi) const {
        const int x0 = std::max(roi.x0, 0), y0 = std::max(roi.y0, 0);
        const int x1 = std::min(roi.x0 + roi.width, width_), y1 = std::min(roi.y0 + roi.height, height_);
        if (x1 <= x0 || y1 <= y0) throw ContractError("Image::crop: ROI outside frame");
        Image out(x1 - x0, y1 - y0, pitch_nm_);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) out(x - x0, y - y0) = (*this)(x, y);
        return out;
    }

    bool operator==(const Image& o) const {
        return width_ == o.width_ && height_ == o.height_ && pitch_nm_ == o.pitch_nm_ &&
               counts_ == o.counts_;
    }

private:
    static long checked_area(int w, int h) {
        if (w < 1 || h < 1) throw ContractError("Image: width and height must be >= 1");
        return static_cast<long>(w) * h;
    }
    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int width_;
    int height_;
    double pitch_nm_;
    std::vector<double> counts_;
    std::vector<std::pair<std::string, std::string>> meta_;
    std::string pitch_text_;  // original header spelling of pitch_nm, if any

    friend Image decode_pgm(const std::string&, const std::string&);
    friend std::string encode_pgm(const Image&);
};

namespace detail {

/// Cursor over a PGM header: whitespace-separated tokens interleaved with `#` comments.
class PgmHeaderReader {
public:
    explicit PgmHeaderReader(const std::string& data) : data_(data) {}

    std::string token(std::vector<std::string>& comments) {
        skip(comments);
        std::size_t start = pos_;
        while (pos_ < data_.size() && !is_space(data_[pos_]) && data_[pos_] != '#') ++pos_;
        if (start == pos_) throw FormatError("PGM: truncated header");
        return data_.substr(start, pos_ - start);
    }

    long number(std::vector<std::string>& comments) {
        const std::string t = token(comments);
        long v = 0;
        for (char c : t) {
            if (c < '0' || c > '9') throw FormatError("PGM: expected an integer, got '" + t + "'");
            v = v * 10 + (c - '0');
            if (v > 1'000'000'000L) throw FormatError("PGM: header value out of range");
        }
        return v;
    }

    /// Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_offset() {
        if (pos_ >= data_.size() || !is_space(data_[pos_])) throw FormatError("PGM: missing raster separator");
        return pos_ + 1;
    }

private:
    static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

    void skip(std::vector<std::string>& comments) {
        while (pos_ < data_.size()) {
            if (is_space(data_[pos_])) {
                ++pos_;
            } else if (data_[pos_] == '#') {
                std::size_t end = data_.find('\n', pos_);
                if (end == std::string::npos) end = data_.size();
                comments.push_back(data_.substr(pos_ + 1, end - pos_ - 1));
                pos_ = end;
            } else {
                return;
            }
        }
    }

    const std::string& data_;
    std::size_t pos_ = 0;
};

inline std::string trim(std::string s) {
    const auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
    s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
    s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
    return s;
}

}  // namespace detail

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path.string());
    return ss.str();
}

/// Parses a binary PGM (P5). 16-bit rasters are big-endian; maxval < 256 means one byte per pixel.
Image decode_pgm(const std::string& data, const std::string& origin = "<memory>");

inline Image decode_pgm(const std::string& data, const std::string& origin) {
    detail::PgmHeaderReader hdr(data);
    std::vector<std::string> comments;
    if (hdr.token(comments) != "P5") throw FormatError(origin + ": not a binary PGM (P5)");
    const long w = hdr.number(comments);
    const long h = hdr.number(comments);
    const long maxval = hdr.number(comments);
    if (w < 1 || h < 1) throw FormatError(origin + ": invalid dimensions");
    if (maxval < 1 || maxval > 65535) throw FormatError(origin + ": invalid maxval");
    const std::size_t offset = hdr.raster_offset();
    const std::size_t bpp = maxval < 256 ? 1 : 2;
    const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * bpp;
    if (data.size() < offset + need) throw IoError(origin + ": truncated pixel payload");

    double pitch = kDefaultPitchNm;
    std::string pitch_text;
    std::vector<std::pair<std::string, std::string>> meta;
    for (const auto& c : comments) {
        const auto eq = c.find('=');
        if (eq == std::string::npos) continue;
        std::string key = detail::trim(c.substr(0, eq));
        std::string val = detail::trim(c.substr(eq + 1));
        if (key == "pitch_nm") {
            try {
                pitch = std::stod(val);
            } catch (const std::exception&) {
                throw FormatError(origin + ": bad pitch_nm value '" + val + "'");
            }
            if (!(pitch > 0.0)) throw FormatError(origin + ": pitch_nm must be positive");
            pitch_text = val;
        } else {
            meta.emplace_back(std::move(key), std::move(val));
        }
    }

    std::vector<double> counts(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
    const auto* raw = reinterpret_cast<const unsigned char*>(data.data() + offset);
    for (std::size_t i = 0; i < counts.size(); ++i)
        counts[i] = bpp == 1 ? raw[i] : static_cast<double>((raw[2 * i] << 8) | raw[2 * i + 1]);

    Image img = Image::from_counts(static_cast<int>(w), static_cast<int>(h), std::move(counts), pitch);
    img.pitch_text_ = std::move(pitch_text);
    for (auto& [k, v] : meta) img.set_meta(k, std::move(v));
    if (maxval != 65535) img.set_meta("maxval", std::to_string(maxval));
    return img;
}

/// Serializes to 16-bit P5 (or 8-bit when a `maxval` < 256 is carried in metadata).
/// Counts are rounded to the nearest integer and clamped to [0, maxval].
inline std::string encode_pgm(const Image& img) {
    long maxval = 65535;
    if (auto m = img.meta("maxval")) maxval = std::stol(*m);
    std::string pitch = fmt::format("{}", img.pitch_nm());
    if (!img.pitch_text_.empty() && std::stod(img.pitch_text_) == img.pitch_nm()) pitch = img.pitch_text_;

    std::string out = "P5\n# pitch_nm=" + pitch + "\n";
    for (const auto& [k, v] : img.metadata())
        if (k != "maxval") out += "# " + k + "=" + v + "\n";
    out += fmt::format("{} {}\n{}\n", img.width(), img.height(), maxval);

    const std::size_t bpp = maxval < 256 ? 1 : 2;
    const std::size_t header = out.size();
    out.resize(header + img.size() * bpp);
    auto* raw = reinterpret_cast<unsigned char*>(out.data() + header);
    const auto counts = img.counts();
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const auto v = static_cast<unsigned>(std::lround(std::clamp(counts[i], 0.0, static_cast<double>(maxval))));
        if (bpp == 1) {
            raw[i] = static_cast<unsigned char>(v);
        } else {
            raw[2 * i] = static_cast<unsigned char>(v >> 8);
            raw[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
        }
    }
    return out;
}

inline Image load_image(const std::filesystem::path& path) {
    return decode_pgm(read_file(path), path.string());
}

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
    write_file_atomic(path, encode_pgm(img));
}

}  // namespace qdalign
