#pragma once

// RGB images in [0, 1], binary PPM (P6, 8-bit) I/O, replicate padding, and the
// training corpus: random crops from a PPM folder or seeded gradient-noise
// textures.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "oscar/checkpoint.hpp"
#include "oscar/rng.hpp"
#include "oscar/tensor.hpp"

namespace oscar {

/// Planar RGB: pixels[(c * height + y) * width + x].
struct Image {
    std::size_t height = 0, width = 0;
    std::vector<float> pixels;

    static Image zeros(std::size_t h, std::size_t w) { return {h, w, std::vector<float>(3 * h * w, 0.0f)}; }

    float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

    bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
    if (img.height == 0 || img.width == 0) throw RangeError("encode_ppm: empty image");
    std::string head = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(head.begin(), head.end());
    out.reserve(out.size() + 3 * img.height * img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(img.at(c, y, x)));
    return out;
}

/// Parses P6 with maxval <= 255. Header comments ('#' to end of line) allowed.
inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&](const char* what) {
        skip_space();
        std::uint64_t v = 0;
        std::size_t digits = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos]) && digits < 10) v = v * 10 + (bytes[pos++] - '0'), ++digits;
        if (digits == 0) throw FormatError(std::string("ppm: missing or invalid ") + what);
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: not a binary P6 file");
    pos = 2;
    auto w = number("width"), h = number("height"), maxval = number("maxval");
    if (w == 0 || h == 0) throw FormatError("ppm: non-positive dimensions");
    if (maxval == 0 || maxval > 255) throw FormatError("ppm: only 8-bit maxval is supported");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("ppm: malformed header");
    ++pos;
    const std::size_t n = static_cast<std::size_t>(w * h);
    if (bytes.size() - pos < 3 * n) throw FormatError("ppm: truncated pixel data");
    Image img = Image::zeros(h, w);
    const float inv = 1.0f / static_cast<float>(maxval);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(bytes[pos++]) * inv;
    return img;
}

inline Image read_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path)); }
inline void write_ppm(const std::string& path, const Image& img) { write_file_bytes(path, encode_ppm(img)); }

inline std::size_t round_up(std::size_t n, std::size_t multiple) { return (n + multiple - 1) / multiple * multiple; }

/// Extends the image by repeating its last row and column up to the next
/// multiple of `multiple` in each dimension.
inline Image pad_replicate_to(const Image& img, std::size_t multiple) {
    if (multiple == 0) throw RangeError("pad: multiple must be positive");
    Image out = Image::zeros(round_up(img.height, multiple), round_up(img.width, multiple));
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < out.height; ++y)
            for (std::size_t x = 0; x < out.width; ++x)
                out.at(c, y, x) = img.at(c, std::min(y, img.height - 1), std::min(x, img.width - 1));
    return out;
}

inline Image crop(const Image& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    if (top + h > img.height || left + w > img.width) throw RangeError("crop: window exceeds image");
    Image out = Image::zeros(h, w);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, top + y, left + x);
    return out;
}

/// Stacks equally sized images into [N, 3, H, W].
template <class Real = float>
BasicTensor<Real> to_tensor(const std::vector<Image>& images) {
    if (images.empty()) throw RangeError("to_tensor: no images");
    const std::size_t h = images[0].height, w = images[0].width;
    std::vector<Real> data;
    data.reserve(images.size() * 3 * h * w);
    for (const auto& img : images) {
        if (img.height != h || img.width != w) throw ShapeError("to_tensor: images differ in size");
        data.insert(data.end(), img.pixels.begin(), img.pixels.end());
    }
    return BasicTensor<Real>::from_vector({images.size(), 3, h, w}, std::move(data));
}

/// Image n of an [N, 3, H, W] tensor, clamped to [0, 1].
template <class Real>
Image from_tensor(const BasicTensor<Real>& t, std::size_t n = 0) {
    if (t.rank() != 4 || t.dim(1) != 3 || n >= t.dim(0)) throw ShapeError("from_tensor: expected [N,3,H,W], got " + shape_str(t.shape()));
    Image img = Image::zeros(t.dim(2), t.dim(3));
    auto src = t.data().subspan(n * img.pixels.size(), img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::clamp(static_cast<float>(src[i]), 0.0f, 1.0f);
    return img;
}

inline double image_mse(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width) throw ShapeError("image_mse: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        s += d * d;
    }
    return s / static_cast<double>(a.pixels.size());
}

namespace detail {

/// Gradient noise on a periodic lattice of `cells` x `cells` random unit
/// gradients, quintic fade, sampled on a size x size grid. Range ~[-0.7, 0.7].
inline std::vector<double> gradient_noise(std::size_t size, std::size_t cells, Rng& rng) {
    std::vector<double> gx(cells * cells), gy(cells * cells);
    for (std::size_t i = 0; i < gx.size(); ++i) {
        double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        gx[i] = std::cos(a);
        gy[i] = std::sin(a);
    }
    auto fade = [](double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); };
    std::vector<double> out(size * size);
    const double step = static_cast<double>(cells) / static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            double px = (static_cast<double>(x) + 0.5) * step, py = (static_cast<double>(y) + 0.5) * step;
            std::size_t x0 = static_cast<std::size_t>(px), y0 = static_cast<std::size_t>(py);
            double fx = px - static_cast<double>(x0), fy = py - static_cast<double>(y0);
            auto corner = [&](std::size_t cx, std::size_t cy, double dx, double dy) {
                std::size_t k = (cy % cells) * cells + (cx % cells);
                return gx[k] * dx + gy[k] * dy;
            };
            double n00 = corner(x0, y0, fx, fy), n10 = corner(x0 + 1, y0, fx - 1, fy);
            double n01 = corner(x0, y0 + 1, fx, fy - 1), n11 = corner(x0 + 1, y0 + 1, fx - 1, fy - 1);
            double u = fade(fx), v = fade(fy);
            out[y * size + x] = (n00 * (1 - u) + n10 * u) * (1 - v) + (n01 * (1 - u) + n11 * u) * v;
        }
    return out;
}

/// Octave sum with persistence 0.5 starting at `cells` lattice cells.
inline std::vector<double> fractal_noise(std::size_t size, std::size_t cells, std::size_t octaves, Rng& rng) {
    std::vector<double> out(size * size, 0.0);
    double amp = 1.0;
    for (std::size_t o = 0; o < octaves; ++o, cells *= 2, amp *= 0.5) {
        auto layer = gradient_noise(size, cells, rng);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += amp * layer[i];
    }
    return out;
}

}  // namespace detail

/// One seeded texture patch: fractal gradient noise in two random colour
/// directions plus noise-warped stripes, around a random base colour.
inline Image synthetic_patch(Rng& rng, std::size_t size = 32) {
    const std::size_t cells = 2 + rng.below(3);
    auto n1 = detail::fractal_noise(size, cells, 3, rng);
    auto n2 = detail::fractal_noise(size, cells * 2, 2, rng);
    auto warp = detail::fractal_noise(size, cells, 2, rng);
    double base[3], col1[3], col2[3], col3[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.25, 0.75);
        col1[c] = rng.uniform(-0.6, 0.6);
        col2[c] = rng.uniform(-0.4, 0.4);
        col3[c] = rng.uniform(-0.2, 0.2);
    }
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double freq = rng.uniform(0.1, 0.6);
    const double warp_gain = rng.uniform(0.0, 6.0);
    const double stripe_gain = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Image img = Image::zeros(size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const std::size_t i = y * size + x;
            double proj = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
            double stripe = stripe_gain * std::sin(freq * proj + warp_gain * warp[i]);
            for (std::size_t c = 0; c < 3; ++c) {
                double v = base[c] + col1[c] * n1[i] + col2[c] * n2[i] + col3[c] * stripe;
                img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return img;
}

/// Patch i comes from stream first_stream + i, so disjoint stream ranges give
/// disjoint, independently reproducible sets.
inline std::vector<Image> synthetic_corpus(std::size_t count, std::size_t size, std::uint64_t seed,
                                           std::uint64_t first_stream = 0) {
    std::vector<Image> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(seed, first_stream + i);
        out.push_back(synthetic_patch(rng, size));
    }
    return out;
}

struct FolderCorpus {
    std::vector<Image> patches;
    std::size_t skipped_files = 0;
};

/// Random size x size crops from the PPM files of a folder (sorted by name,
/// so the result depends only on the folder contents and the rng). Files that
/// fail to parse or are smaller than a patch are skipped and counted.
inline FolderCorpus folder_corpus(const std::string& folder, std::size_t count, std::size_t size, Rng& rng) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(folder)) throw IoError("corpus folder '" + folder + "' does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(folder))
        if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    FolderCorpus out;
    std::vector<Image> images;
    for (const auto& f : files) {
        try {
            auto img = read_ppm(f.string());
            if (img.height < size || img.width < size) {
                ++out.skipped_files;
                continue;
            }
            images.push_back(std::move(img));
        } catch (const Error&) {
            ++out.skipped_files;
        }
    }
    if (images.empty()) throw IoError("corpus folder '" + folder + "' has no usable PPM images");
    for (std::size_t i = 0; i < count; ++i) {
        const auto& img = images[rng.below(images.size())];
        out.patches.push_back(crop(img, rng.below(img.height - size + 1), rng.below(img.width - size + 1), size, size));
    }
    return out;
}

}  // namespace oscar
