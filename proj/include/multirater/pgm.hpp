#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace multirater {

/// Binary (P5) portable graymap. maxval <= 255 stores one byte per pixel,
/// larger maxvals two bytes big-endian, per the format definition.
struct PgmImage {
    int width = 0;
    int height = 0;
    int maxval = 255;
    std::vector<uint16_t> pixels;  // row-major

    size_t size() const { return pixels.size(); }
};

namespace detail {

inline int pgm_next_int(std::istream& in, const std::string& path) {
    // Skips whitespace and '#' comments between header tokens.
    for (;;) {
        const int c = in.peek();
        if (c == EOF) throw std::runtime_error("pgm: truncated header in " + path);
        if (c == '#') {
            std::string line;
            std::getline(in, line);
            continue;
        }
        if (std::isspace(c)) {
            in.get();
            continue;
        }
        break;
    }
    int v = 0;
    if (!(in >> v)) throw std::runtime_error("pgm: malformed header in " + path);
    return v;
}

} // namespace detail

inline PgmImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("pgm: cannot open " + path.string());
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (magic[0] != 'P' || magic[1] != '5')
        throw std::runtime_error("pgm: " + path.string() + " is not binary P5");
    PgmImage img;
    img.width = detail::pgm_next_int(in, path.string());
    img.height = detail::pgm_next_int(in, path.string());
    img.maxval = detail::pgm_next_int(in, path.string());
    if (img.width <= 0 || img.height <= 0 || img.maxval <= 0 || img.maxval > 65535)
        throw std::runtime_error("pgm: bad dimensions in " + path.string());
    in.get();  // single whitespace after maxval
    const size_t n = static_cast<size_t>(img.width) * img.height;
    img.pixels.resize(n);
    if (img.maxval > 255) {
        std::vector<unsigned char> buf(n * 2);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in) throw std::runtime_error("pgm: truncated payload in " + path.string());
        for (size_t i = 0; i < n; ++i)
            img.pixels[i] = static_cast<uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
    } else {
        std::vector<unsigned char> buf(n);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in) throw std::runtime_error("pgm: truncated payload in " + path.string());
        for (size_t i = 0; i < n; ++i) img.pixels[i] = buf[i];
    }
    return img;
}

inline void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
    if (img.size() != static_cast<size_t>(img.width) * img.height)
        throw std::invalid_argument("pgm: pixel count does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("pgm: cannot write " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n" << img.maxval << "\n";
    if (img.maxval > 255) {
        std::vector<unsigned char> buf(img.size() * 2);
        for (size_t i = 0; i < img.size(); ++i) {
            buf[2 * i] = static_cast<unsigned char>(img.pixels[i] >> 8);
            buf[2 * i + 1] = static_cast<unsigned char>(img.pixels[i] & 0xff);
        }
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()));
    } else {
        std::vector<unsigned char> buf(img.size());
        for (size_t i = 0; i < img.size(); ++i)
            buf[i] = static_cast<unsigned char>(img.pixels[i] & 0xff);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw std::runtime_error("pgm: write failed for " + path.string());
}

} // namespace multirater
