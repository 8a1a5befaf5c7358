#pragma once

// Bitstream, little-endian header then index payload:
//   "OSCR" | version u16 | rate_id u8 | s u8 | V u32 | M u8 | f u8 |
//   height u32 | width u32 | padded height u32 | padded width u32 |
//   model fingerprint u64
// Payload: ceil(log2 V)-bit codes, row-major over the
// (padded h / (f s)) x (padded w / (f s)) grid, packed MSB-first, zero-padded
// to a whole byte. No entropy coding, so the rate is exactly log2 V per cell.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "oscar/image.hpp"
#include "oscar/model.hpp"

namespace oscar {

inline constexpr char kBitstreamMagic[4] = {'O', 'S', 'C', 'R'};
inline constexpr std::uint16_t kBitstreamVersion = 1;

struct BitstreamHeader {
    static constexpr std::size_t kBytes = 4 + 2 + 1 + 1 + 4 + 1 + 1 + 4 * 4 + 8;

    std::uint8_t rate_id = 0;
    std::uint8_t downsample = 1;
    std::uint32_t codebook_size = 2;
    std::uint8_t code_dim = 4;
    std::uint8_t factor = 4;
    std::uint32_t height = 0, width = 0;
    std::uint32_t padded_height = 0, padded_width = 0;
    std::uint64_t fingerprint = 0;

    std::size_t cell() const { return std::size_t{factor} * downsample; }
    std::size_t grid_height() const { return padded_height / cell(); }
    std::size_t grid_width() const { return padded_width / cell(); }
    std::size_t bits_per_index() const { return RateConfig{.codebook_size = codebook_size}.bits_per_index(); }
    std::size_t payload_bytes() const { return (grid_height() * grid_width() * bits_per_index() + 7) / 8; }

    void validate() const {
        if (codebook_size < 2) throw FormatError("bitstream: codebook size must be >= 2");
        if (downsample == 0 || factor == 0) throw FormatError("bitstream: zero downsample or factor");
        if (height == 0 || width == 0) throw FormatError("bitstream: non-positive image dimensions");
        const std::size_t c = cell();
        if (padded_height != round_up(height, c) || padded_width != round_up(width, c))
            throw FormatError("bitstream: padded dimensions are not the smallest multiples of f*s");
    }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out(kBitstreamMagic, kBitstreamMagic + 4);
        detail::put_u16(out, kBitstreamVersion);
        detail::put_u8(out, rate_id);
        detail::put_u8(out, downsample);
        detail::put_u32(out, codebook_size);
        detail::put_u8(out, code_dim);
        detail::put_u8(out, factor);
        for (auto v : {height, width, padded_height, padded_width}) detail::put_u32(out, v);
        detail::put_u32(out, static_cast<std::uint32_t>(fingerprint));
        detail::put_u32(out, static_cast<std::uint32_t>(fingerprint >> 32));
        return out;
    }

    static BitstreamHeader parse(detail::ByteReader& r) {
        if (r.bytes(4) != std::string(kBitstreamMagic, 4)) throw FormatError("bitstream: bad magic");
        if (auto v = r.u16(); v != kBitstreamVersion) throw FormatError("bitstream: unsupported version " + std::to_string(v));
        BitstreamHeader h;
        h.rate_id = r.u8();
        h.downsample = r.u8();
        h.codebook_size = r.u32();
        h.code_dim = r.u8();
        h.factor = r.u8();
        h.height = r.u32();
        h.width = r.u32();
        h.padded_height = r.u32();
        h.padded_width = r.u32();
        h.fingerprint = r.u64();
        h.validate();
        return h;
    }

    bool operator==(const BitstreamHeader&) const = default;
};

/// Fixed-width MSB-first packing of indices < V.
inline std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> indices, std::size_t codebook_size) {
    if (codebook_size < 2) throw RangeError("pack_indices: V must be >= 2");
    const std::size_t bits = RateConfig{.codebook_size = codebook_size}.bits_per_index();
    std::vector<std::uint8_t> out((indices.size() * bits + 7) / 8, 0);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= codebook_size)
            throw RangeError("pack_indices: index " + std::to_string(indices[i]) + " at " + std::to_string(i) +
                             " is not below V = " + std::to_string(codebook_size));
        for (std::size_t b = bits; b-- > 0; ++pos)
            if ((indices[i] >> b) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(0x80u >> (pos % 8));
    }
    return out;
}

inline std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count,
                                                 std::size_t codebook_size) {
    if (codebook_size < 2) throw RangeError("unpack_indices: V must be >= 2");
    const std::size_t bits = RateConfig{.codebook_size = codebook_size}.bits_per_index();
    if (bytes.size() != (count * bits + 7) / 8)
        throw FormatError("unpack_indices: " + std::to_string(bytes.size()) + " bytes for " + std::to_string(count) +
                          " codes of " + std::to_string(bits) + " bits");
    std::vector<std::uint32_t> out(count, 0);
    std::size_t pos = 0;
    for (auto& v : out) {
        for (std::size_t b = 0; b < bits; ++b, ++pos) v = (v << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1u);
        if (v >= codebook_size) throw FormatError("unpack_indices: decoded index " + std::to_string(v) + " >= V");
    }
    return out;
}

struct Bitstream {
    BitstreamHeader header;
    std::vector<std::uint32_t> indices;  // row-major over the code grid

    std::vector<std::uint8_t> serialize() const {
        if (indices.size() != header.grid_height() * header.grid_width())
            throw ShapeError("bitstream: index count does not match the code grid");
        auto out = header.serialize();
        auto payload = pack_indices(indices, header.codebook_size);
        out.insert(out.end(), payload.begin(), payload.end());
        return out;
    }

    static Bitstream parse(const std::vector<std::uint8_t>& bytes) {
        detail::ByteReader r(bytes, "bitstream");
        Bitstream b;
        b.header = BitstreamHeader::parse(r);
        const std::size_t need = b.header.payload_bytes();
        if (r.remaining() != need)
            throw FormatError("bitstream: payload has " + std::to_string(r.remaining()) + " bytes, expected " +
                              std::to_string(need));
        const auto* p = r.take(need);
        b.indices = unpack_indices({p, need}, b.header.grid_height() * b.header.grid_width(), b.header.codebook_size);
        return b;
    }

    /// Total file bits over image pixels.
    double measured_bpp() const {
        return 8.0 * static_cast<double>(BitstreamHeader::kBytes + header.payload_bytes()) /
               (static_cast<double>(header.height) * header.width);
    }
};

/// Pads, encodes, and quantizes one image at the given rate.
inline Bitstream compress(const OscarModel& model, const Image& image, int rate_id) {
    if (image.height == 0 || image.width == 0) throw RangeError("compress: empty image");
    const auto& h = model.hyper(rate_id);
    const auto& rate = h.rate();
    NoGradGuard no_grad;
    auto padded = pad_replicate_to(image, rate.cell());
    auto z0 = model.encode_latent(to_tensor(std::vector<Image>{padded}));
    auto codes = h.codebook().assign(h.front(z0));
    Bitstream b;
    b.header.rate_id = static_cast<std::uint8_t>(rate.rate_id);
    b.header.downsample = static_cast<std::uint8_t>(rate.downsample);
    b.header.codebook_size = static_cast<std::uint32_t>(rate.codebook_size);
    b.header.code_dim = static_cast<std::uint8_t>(rate.code_dim);
    b.header.factor = static_cast<std::uint8_t>(rate.latent_factor);
    b.header.height = static_cast<std::uint32_t>(image.height);
    b.header.width = static_cast<std::uint32_t>(image.width);
    b.header.padded_height = static_cast<std::uint32_t>(padded.height);
    b.header.padded_width = static_cast<std::uint32_t>(padded.width);
    b.header.fingerprint = model.fingerprint();
    b.indices = std::move(codes.indices);
    return b;
}

/// Latent reconstruction z~ from transmitted indices.
inline Tensor decode_latent_tilde(const OscarModel& model, const Bitstream& b) {
    const auto& h = model.hyper(b.header.rate_id);
    QuantizeResult codes;
    codes.batch = 1;
    codes.height = b.header.grid_height();
    codes.width = b.header.grid_width();
    codes.indices = b.indices;
    return h.decode_indices(codes);
}

/// Indices -> z~ -> one denoiser pass at t(r) -> VAE decode -> crop -> clamp.
inline Image decompress(const OscarModel& model, const Bitstream& b, std::uint64_t model_fingerprint) {
    const auto& hd = b.header;
    if (hd.fingerprint != model_fingerprint) throw FormatError("bitstream: model fingerprint mismatch");
    if (!model.has_rate(hd.rate_id)) throw FormatError("bitstream: model has no rate " + std::to_string(hd.rate_id));
    const auto& rate = model.hyper(hd.rate_id).rate();
    if (rate.downsample != hd.downsample || rate.codebook_size != hd.codebook_size || rate.code_dim != hd.code_dim ||
        rate.latent_factor != hd.factor)
        throw FormatError("bitstream: rate parameters disagree with the model");
    if (!model.calibration().contains(hd.rate_id))
        throw RangeError("decompress: rate " + std::to_string(hd.rate_id) + " is not calibrated");
    NoGradGuard no_grad;
    auto z_hat = model.denoise(decode_latent_tilde(model, b), hd.rate_id);
    auto full = from_tensor(model.decode_latent(z_hat));
    return crop(full, 0, 0, hd.height, hd.width);
}

inline Image decompress(const OscarModel& model, const Bitstream& b) { return decompress(model, b, model.fingerprint()); }

inline void compress_file(const OscarModel& model, const std::string& in, const std::string& out, int rate_id) {
    write_file_bytes(out, compress(model, read_ppm(in), rate_id).serialize());
}

inline void decompress_file(const OscarModel& model, const std::string& in, const std::string& out) {
    write_ppm(out, decompress(model, Bitstream::parse(read_file_bytes(in))));
}

}  // namespace oscar
