#pragma once

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftdet/tensor.hpp"

namespace shiftdet {

/// RGB image, HWC layout, values in [0,1].
struct Image {
    int width = 0, height = 0;
    std::vector<float> rgb;

    Image() = default;
    Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0.f) {}

    float& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

template <typename T>
Tensor<T> to_chw_tensor(const Image& img) {
    Tensor<T> t({3, img.height, img.width});
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (std::size_t i = 0; i < plane; ++i) {
        t[i] = static_cast<T>(img.rgb[i * 3]);
        t[plane + i] = static_cast<T>(img.rgb[i * 3 + 1]);
        t[2 * plane + i] = static_cast<T>(img.rgb[i * 3 + 2]);
    }
    return t;
}

namespace pngio {

inline void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(static_cast<std::uint8_t>(x >> 24));
    v.push_back(static_cast<std::uint8_t>(x >> 16));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
    v.push_back(static_cast<std::uint8_t>(x));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& data) {
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace pngio

/// Encode as 8-bit RGB PNG (filter 0 scanlines, single IDAT).
inline std::vector<std::uint8_t> encode_png(const Image& img) {
    const int w = img.width, h = img.height;
    if (w <= 0 || h <= 0) throw std::invalid_argument("encode_png: empty image");
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (1 + 3 * static_cast<std::size_t>(w)));
    std::size_t ri = 0;
    for (int y = 0; y < h; ++y) {
        raw[ri++] = 0;  // filter: none
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(img.at(x, y, c), 0.f, 1.f);
                raw[ri++] = static_cast<std::uint8_t>(std::lround(v * 255.f));
            }
        }
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("encode_png: deflate failed");
    comp.resize(comp_len);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    std::vector<std::uint8_t> ihdr;
    pngio::put_u32(ihdr, static_cast<std::uint32_t>(w));
    pngio::put_u32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    pngio::write_chunk(out, "IHDR", ihdr);
    pngio::write_chunk(out, "IDAT", comp);
    pngio::write_chunk(out, "IEND", {});
    return out;
}

/// Decode an 8-bit RGB PNG (the subset this project writes, plus all five
/// scanline filters).
inline Image decode_png(const std::vector<std::uint8_t>& bytes) {
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) throw std::runtime_error("decode_png: not a PNG");
    std::size_t pos = 8;
    int w = 0, h = 0;
    std::vector<std::uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = pngio::get_u32(bytes.data() + pos);
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("decode_png: truncated chunk");
        const std::uint8_t* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = static_cast<int>(pngio::get_u32(data));
            h = static_cast<int>(pngio::get_u32(data + 4));
            if (data[8] != 8 || data[9] != 2 || data[12] != 0)
                throw std::runtime_error("decode_png: unsupported format (need 8-bit RGB, no interlace)");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || idat.empty()) throw std::runtime_error("decode_png: missing IHDR or IDAT");

    const std::size_t stride = 3 * static_cast<std::size_t>(w);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (1 + stride));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw std::runtime_error("decode_png: inflate failed");

    Image img(w, h);
    std::vector<std::uint8_t> prev(stride, 0), cur(stride);
    for (int y = 0; y < h; ++y) {
        const std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (1 + stride);
        const int filter = row[0];
        const std::uint8_t* src = row + 1;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= 3 ? cur[i - 3] : 0;
            const int b = prev[i];
            const int c = i >= 3 ? prev[i - 3] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += pngio::paeth(a, b, c); break;
                default: throw std::runtime_error("decode_png: bad filter byte");
            }
            cur[i] = static_cast<std::uint8_t>(v & 0xFF);
        }
        for (std::size_t i = 0; i < stride; ++i) img.rgb[static_cast<std::size_t>(y) * stride + i] = cur[i] / 255.f;
        std::swap(prev, cur);
    }
    return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
    const auto bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_png: cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write_png: write failed for " + path.string());
}

inline Image read_png(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_png: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

/// Rotation about the gray axis (1,1,1)/sqrt(3): exactly inverted by the
/// opposite angle, which the dataset-consistency checks rely on.
inline std::array<double, 9> hue_rotation_matrix(double degrees) {
    const double th = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double k = 1.0 / std::sqrt(3.0);
    const double oc3 = (1.0 - c) / 3.0;
    return {c + oc3, oc3 - s * k, oc3 + s * k,
            oc3 + s * k, c + oc3, oc3 - s * k,
            oc3 - s * k, oc3 + s * k, c + oc3};
}

inline void hue_rotate_inplace(Image& img, double degrees) {
    if (degrees == 0.0) return;
    const auto m = hue_rotation_matrix(degrees);
    for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
        const double r = img.rgb[i], g = img.rgb[i + 1], b = img.rgb[i + 2];
        img.rgb[i] = static_cast<float>(m[0] * r + m[1] * g + m[2] * b);
        img.rgb[i + 1] = static_cast<float>(m[3] * r + m[4] * g + m[5] * b);
        img.rgb[i + 2] = static_cast<float>(m[6] * r + m[7] * g + m[8] * b);
    }
}

/// Separable Gaussian blur, kernel truncated at 3*sigma, edges clamped.
inline void gaussian_blur_inplace(Image& img, double sigma) {
    if (sigma <= 0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
        sum += v;
    }
    for (auto& v : kernel) v = static_cast<float>(v / sum);

    const int w = img.width, h = img.height;
    std::vector<float> tmp(img.rgb.size());
    for (int y = 0; y < h; ++y) {  // horizontal pass
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                float acc = 0;
                for (int k = -radius; k <= radius; ++k) {
                    const int xx = std::clamp(x + k, 0, w - 1);
                    acc += kernel[static_cast<std::size_t>(k + radius)] * img.at(xx, y, c);
                }
                tmp[(static_cast<std::size_t>(y) * w + x) * 3 + c] = acc;
            }
        }
    }
    for (int y = 0; y < h; ++y) {  // vertical pass
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                float acc = 0;
                for (int k = -radius; k <= radius; ++k) {
                    const int yy = std::clamp(y + k, 0, h - 1);
                    acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[(static_cast<std::size_t>(yy) * w + x) * 3 + c];
                }
                img.at(x, y, c) = acc;
            }
        }
    }
}

inline void clamp01_inplace(Image& img) {
    for (auto& v : img.rgb) v = std::clamp(v, 0.f, 1.f);
}

}  // namespace shiftdet
