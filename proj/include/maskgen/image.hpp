#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace maskgen {

/// H x W grid of {0,1} foreground flags, row-major.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int height, int width);
    BinaryMask(int height, int width, std::vector<std::uint8_t> pixels);

    int height() const { return height_; }
    int width() const { return width_; }
    bool empty() const { return height_ == 0 || width_ == 0; }

    std::uint8_t at(int r, int c) const { return pixels_[index(r, c)]; }
    void set(int r, int c, bool on) { pixels_[index(r, c)] = on ? 1 : 0; }

    const std::vector<std::uint8_t>& pixels() const { return pixels_; }

    /// Number of foreground pixels.
    std::int64_t count() const;

    bool same_shape(const BinaryMask& other) const {
        return height_ == other.height_ && width_ == other.width_;
    }

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    std::size_t index(int r, int c) const {
        return static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(c);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> pixels_;
};

using Rgb = std::array<std::uint8_t, 3>;

/// Interleaved 8-bit RGB image.
class RgbImage {
public:
    RgbImage() = default;
    RgbImage(int height, int width, Rgb fill = {0, 0, 0});

    int height() const { return height_; }
    int width() const { return width_; }

    Rgb at(int r, int c) const {
        const auto i = index(r, c);
        return {data_[i], data_[i + 1], data_[i + 2]};
    }
    void set(int r, int c, Rgb v) {
        const auto i = index(r, c);
        data_[i] = v[0];
        data_[i + 1] = v[1];
        data_[i + 2] = v[2];
    }

    const std::vector<std::uint8_t>& data() const { return data_; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;

private:
    std::size_t index(int r, int c) const {
        return (static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) +
                static_cast<std::size_t>(c)) * 3;
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
};

// Netpbm I/O. Masks are P5 with 0 = background and 255 = foreground; any
// nonzero sample reads as foreground. `comment`, when nonempty, is written as
// a `#` line after the magic.
BinaryMask read_pgm_mask(const std::filesystem::path& path);
void write_pgm_mask(const std::filesystem::path& path, const BinaryMask& mask,
                    const std::string& comment = {});

/// Raw 8-bit grayscale P5 (used for heatmaps).
void write_pgm_gray(const std::filesystem::path& path, int height, int width,
                    const std::vector<std::uint8_t>& samples, const std::string& comment = {});

/// Reads P6 directly; P5 is accepted and replicated to three channels.
RgbImage read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image,
               const std::string& comment = {});

}  // namespace maskgen
