#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "oscar/error.hpp"

namespace oscar {

/// Quantization settings of one bit-rate: latent downsample s, codebook size
/// V, code dimension M, and the autoencoder's spatial factor f.
struct RateConfig {
    int rate_id = 0;
    std::size_t downsample = 1;
    std::size_t codebook_size = 256;
    std::size_t code_dim = 4;
    std::size_t latent_factor = 4;

    /// log2(V) / (f^2 s^2): bits per image pixel of the index payload.
    double theoretical_bpp() const {
        double area = static_cast<double>(latent_factor * latent_factor * downsample * downsample);
        return std::log2(static_cast<double>(codebook_size)) / area;
    }

    /// Fixed code width ceil(log2 V).
    std::size_t bits_per_index() const {
        std::size_t bits = 0;
        while ((std::size_t{1} << bits) < codebook_size) ++bits;
        return bits;
    }

    /// Total pixel stride of one code cell (f * s).
    std::size_t cell() const { return latent_factor * downsample; }

    void validate() const {
        if (rate_id < 0 || rate_id > 255) throw RangeError("rate id must fit in a byte");
        if (downsample < 1 || latent_factor < 1) throw RangeError("rate: downsample and latent factor must be >= 1");
        if (codebook_size < 2) throw RangeError("rate: codebook size must be >= 2");
        if (code_dim < 1) throw RangeError("rate: code dimension must be >= 1");
    }

    bool operator==(const RateConfig&) const = default;
};

}  // namespace oscar
