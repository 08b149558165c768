#include "maskgen/image.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "maskgen/error.hpp"

namespace maskgen {

namespace {

struct NetpbmHeader {
    std::string magic;
    int width = 0;
    int height = 0;
    int maxval = 0;
};

// Reads the next whitespace-delimited header token, skipping `#` comments.
std::string next_token(std::istream& in) {
    std::string token;
    char c = 0;
    while (in.get(c)) {
        if (c == '#') {
            std::string discard;
            std::getline(in, discard);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!token.empty()) break;
            continue;
        }
        token.push_back(c);
    }
    return token;
}

NetpbmHeader read_header(std::istream& in, const std::filesystem::path& path) {
    NetpbmHeader h;
    h.magic = next_token(in);
    try {
        h.width = std::stoi(next_token(in));
        h.height = std::stoi(next_token(in));
        h.maxval = std::stoi(next_token(in));
    } catch (const std::exception&) {
        throw ValidationError("malformed netpbm header in " + path.string());
    }
    if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 255) {
        throw ValidationError("unsupported netpbm geometry/maxval in " + path.string());
    }
    return h;
}

std::vector<std::uint8_t> read_payload(std::istream& in, std::size_t n,
                                       const std::filesystem::path& path) {
    std::vector<std::uint8_t> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw ValidationError("truncated netpbm payload in " + path.string());
    }
    return buf;
}

void write_netpbm(const std::filesystem::path& path, const char* magic, int height, int width,
                  const std::uint8_t* data, std::size_t n, const std::string& comment) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    out << magic << '\n';
    if (!comment.empty()) out << "# " << comment << '\n';
    out << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw RuntimeFailure("write failed: " + path.string());
}

}  // namespace

BinaryMask::BinaryMask(int height, int width)
    : height_(height), width_(width),
      pixels_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0) {
    if (height < 0 || width < 0) throw ValidationError("negative mask dimensions");
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
    if (height < 0 || width < 0) throw ValidationError("negative mask dimensions");
    if (pixels_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
        throw ValidationError("mask pixel buffer does not match dimensions");
    }
    for (auto& p : pixels_) {
        if (p > 1) throw ValidationError("mask pixels must be exactly 0 or 1");
    }
}

std::int64_t BinaryMask::count() const {
    return std::count(pixels_.begin(), pixels_.end(), std::uint8_t{1});
}

RgbImage::RgbImage(int height, int width, Rgb fill)
    : height_(height), width_(width),
      data_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * 3) {
    for (std::size_t i = 0; i < data_.size(); i += 3) {
        data_[i] = fill[0];
        data_[i + 1] = fill[1];
        data_[i + 2] = fill[2];
    }
}

BinaryMask read_pgm_mask(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open mask " + path.string());
    const auto h = read_header(in, path);
    if (h.magic != "P5") throw ValidationError("mask is not binary PGM (P5): " + path.string());
    auto raw = read_payload(in, static_cast<std::size_t>(h.width) * h.height, path);
    for (auto& v : raw) v = v != 0 ? 1 : 0;
    return BinaryMask(h.height, h.width, std::move(raw));
}

void write_pgm_mask(const std::filesystem::path& path, const BinaryMask& mask,
                    const std::string& comment) {
    std::vector<std::uint8_t> raw(mask.pixels().size());
    std::transform(mask.pixels().begin(), mask.pixels().end(), raw.begin(),
                   [](std::uint8_t p) { return static_cast<std::uint8_t>(p ? 255 : 0); });
    write_netpbm(path, "P5", mask.height(), mask.width(), raw.data(), raw.size(), comment);
}

void write_pgm_gray(const std::filesystem::path& path, int height, int width,
                    const std::vector<std::uint8_t>& samples, const std::string& comment) {
    if (samples.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
        throw ValidationError("grayscale buffer does not match dimensions");
    }
    write_netpbm(path, "P5", height, width, samples.data(), samples.size(), comment);
}

RgbImage read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open image " + path.string());
    const auto h = read_header(in, path);
    RgbImage img(h.height, h.width);
    if (h.magic == "P6") {
        const auto raw = read_payload(in, static_cast<std::size_t>(h.width) * h.height * 3, path);
        for (int r = 0; r < h.height; ++r) {
            for (int c = 0; c < h.width; ++c) {
                const auto i = (static_cast<std::size_t>(r) * h.width + c) * 3;
                img.set(r, c, {raw[i], raw[i + 1], raw[i + 2]});
            }
        }
    } else if (h.magic == "P5") {
        const auto raw = read_payload(in, static_cast<std::size_t>(h.width) * h.height, path);
        for (int r = 0; r < h.height; ++r) {
            for (int c = 0; c < h.width; ++c) {
                const auto v = raw[static_cast<std::size_t>(r) * h.width + c];
                img.set(r, c, {v, v, v});
            }
        }
    } else {
        throw ValidationError("image must be P6 or P5: " + path.string());
    }
    return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image,
               const std::string& comment) {
    write_netpbm(path, "P6", image.height(), image.width(), image.data().data(),
                 image.data().size(), comment);
}

}  // namespace maskgen
