#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "oscar/codec.hpp"
#include "toy_model.hpp"

using namespace oscar;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("oscar_codec_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

Image gradient_image(std::size_t h, std::size_t w) {
    auto img = Image::zeros(h, w);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                img.at(c, y, x) = static_cast<float>((y * 7 + x * 3 + c * 50) % 256) / 255.0f;
    return img;
}

BitstreamHeader header_for(std::size_t h, std::size_t w, std::size_t f, std::size_t s, std::size_t V) {
    BitstreamHeader hd;
    hd.rate_id = 1;
    hd.downsample = static_cast<std::uint8_t>(s);
    hd.codebook_size = static_cast<std::uint32_t>(V);
    hd.factor = static_cast<std::uint8_t>(f);
    hd.height = static_cast<std::uint32_t>(h);
    hd.width = static_cast<std::uint32_t>(w);
    hd.padded_height = static_cast<std::uint32_t>(round_up(h, f * s));
    hd.padded_width = static_cast<std::uint32_t>(round_up(w, f * s));
    hd.fingerprint = 0x0123456789ABCDEFULL;
    return hd;
}

}  // namespace

TEST(PackIndices, HandPackedByte) {
    std::vector<std::uint32_t> idx{1, 0, 1, 1, 0, 0, 0, 1};
    auto bytes = pack_indices(idx, 2);
    ASSERT_EQ(bytes.size(), 1u);
    EXPECT_EQ(bytes[0], 0xB1);
    EXPECT_EQ(unpack_indices(bytes, 8, 2), idx);
}

TEST(PackIndices, RoundTripRandomGrids) {
    Rng rng(11);
    for (std::size_t V : {2u, 5u, 256u, 1024u}) {
        for (int trial = 0; trial < 1000; ++trial) {
            const std::size_t count = 1 + rng.below(300);
            std::vector<std::uint32_t> idx(count);
            for (auto& v : idx) v = static_cast<std::uint32_t>(rng.below(V));
            auto bytes = pack_indices(idx, V);
            const std::size_t bits = RateConfig{.codebook_size = V}.bits_per_index();
            ASSERT_EQ(bytes.size(), (count * bits + 7) / 8);
            ASSERT_EQ(unpack_indices(bytes, count, V), idx) << "V=" << V << " trial " << trial;
        }
    }
}

TEST(PackIndices, ByteWideCodesAreRawBytes) {
    std::vector<std::uint32_t> idx{0, 255, 17, 128, 3};
    auto bytes = pack_indices(idx, 256);
    ASSERT_EQ(bytes.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(bytes[i], idx[i]);
}

TEST(PackIndices, TrailingBitsAreZero) {
    auto bytes = pack_indices(std::vector<std::uint32_t>{4, 4, 4}, 5);  // 9 bits: 100 100 100
    ASSERT_EQ(bytes.size(), 2u);
    EXPECT_EQ(bytes[0], 0x92);
    EXPECT_EQ(bytes[1], 0x00);
}

TEST(PackIndices, RejectsBadInput) {
    EXPECT_THROW(pack_indices(std::vector<std::uint32_t>{0, 5}, 5), RangeError);
    EXPECT_THROW(pack_indices(std::vector<std::uint32_t>{0}, 1), RangeError);
    EXPECT_THROW(unpack_indices(std::vector<std::uint8_t>{0, 0}, 8, 2), FormatError);
    // 3-bit code 111 = 7 is not a valid index when V = 5.
    EXPECT_THROW(unpack_indices(std::vector<std::uint8_t>{0xE0}, 1, 5), FormatError);
}

TEST(BitstreamHeader, SerializeParseIdentity) {
    auto hd = header_for(37, 53, 4, 2, 1000);
    hd.code_dim = 6;
    auto bytes = hd.serialize();
    ASSERT_EQ(bytes.size(), BitstreamHeader::kBytes);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "OSCR");
    detail::ByteReader r(bytes, "test");
    auto back = BitstreamHeader::parse(r);
    EXPECT_EQ(back, hd);
    EXPECT_EQ(back.serialize(), bytes);
}

TEST(BitstreamHeader, RejectsInvalidHeaders) {
    auto parse = [](std::vector<std::uint8_t> bytes) {
        detail::ByteReader r(bytes, "test");
        return BitstreamHeader::parse(r);
    };
    auto good = header_for(20, 20, 4, 2, 16).serialize();
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(parse(bad_magic), FormatError);
    auto bad_version = good;
    bad_version[4] = 9;
    EXPECT_THROW(parse(bad_version), FormatError);
    auto not_smallest = header_for(20, 20, 4, 2, 16);
    not_smallest.padded_height = 32;
    EXPECT_THROW(parse(not_smallest.serialize()), FormatError);
    auto small_v = header_for(20, 20, 4, 2, 16);
    small_v.codebook_size = 1;
    EXPECT_THROW(parse(small_v.serialize()), FormatError);
    auto zero_dim = header_for(20, 20, 4, 2, 16);
    zero_dim.height = 0;
    zero_dim.padded_height = 0;
    EXPECT_THROW(parse(zero_dim.serialize()), FormatError);
    EXPECT_THROW(parse(std::vector<std::uint8_t>(good.begin(), good.begin() + 20)), FormatError);
}

TEST(Bitrate, SixtyFourPixelSquareAtQuarterDownsample) {
    auto hd = header_for(64, 64, 4, 2, 256);
    EXPECT_EQ(hd.grid_height(), 8u);
    EXPECT_EQ(hd.grid_width(), 8u);
    EXPECT_EQ(hd.payload_bytes(), 64u);
    RateConfig r{.downsample = 2, .codebook_size = 256, .latent_factor = 4};
    EXPECT_DOUBLE_EQ(r.theoretical_bpp(), 0.125);
    Bitstream b{hd, std::vector<std::uint32_t>(64, 7)};
    EXPECT_EQ(b.serialize().size(), BitstreamHeader::kBytes + 64);
    EXPECT_DOUBLE_EQ(b.measured_bpp(), 8.0 * (38 + 64) / 4096.0);
}

TEST(Bitrate, MinimalCodebookAtFactorEight) {
    RateConfig r{.downsample = 1, .codebook_size = 2, .latent_factor = 8};
    EXPECT_DOUBLE_EQ(r.theoretical_bpp(), 1.0 / 64.0);
}

TEST(Bitrate, MeasuredEqualsHeaderPlusPayloadPlusPadding) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t f = std::size_t{1} << rng.below(4), s = 1 + rng.below(3);
        const std::size_t V = 2 + rng.below(2000), h = 1 + rng.below(200), w = 1 + rng.below(200);
        auto hd = header_for(h, w, f, s, V);
        const std::size_t bits = RateConfig{.codebook_size = V}.bits_per_index();
        const std::size_t payload_bits = hd.grid_height() * hd.grid_width() * bits;
        const std::size_t padding = hd.payload_bytes() * 8 - payload_bits;
        ASSERT_LT(padding, 8u);
        Bitstream b{hd, std::vector<std::uint32_t>(hd.grid_height() * hd.grid_width(), 0)};
        const double file_bits = 8.0 * static_cast<double>(b.serialize().size());
        ASSERT_DOUBLE_EQ(file_bits, 8.0 * BitstreamHeader::kBytes + payload_bits + padding);
        ASSERT_DOUBLE_EQ(b.measured_bpp(), file_bits / static_cast<double>(h * w));
        // Over the padded area the payload is exactly ceil(log2 V) / (f s)^2 per pixel.
        const double padded_area = static_cast<double>(hd.padded_height) * hd.padded_width;
        ASSERT_DOUBLE_EQ(payload_bits / padded_area, static_cast<double>(bits) / static_cast<double>(f * f * s * s));
    }
}

TEST(Bitstream, ParseRejectsTruncatedOrExtendedPayload) {
    auto hd = header_for(32, 32, 4, 1, 16);
    Bitstream b{hd, std::vector<std::uint32_t>(64, 3)};
    auto bytes = b.serialize();
    EXPECT_EQ(Bitstream::parse(bytes).indices, b.indices);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(Bitstream::parse(truncated), FormatError);
    auto extended = bytes;
    extended.push_back(0);
    EXPECT_THROW(Bitstream::parse(extended), FormatError);
}

TEST(Bitstream, PayloadCorruptionIsLocalToCodeCells) {
    Rng rng(9);
    for (std::size_t V : {16u, 256u, 1024u, 64u}) {
        const std::size_t bits = RateConfig{.codebook_size = V}.bits_per_index(), count = 97;
        std::vector<std::uint32_t> idx(count);
        for (auto& v : idx) v = static_cast<std::uint32_t>(rng.below(V));
        auto bytes = pack_indices(idx, V);
        for (std::size_t k = 0; k < bytes.size(); ++k) {
            auto bad = bytes;
            bad[k] ^= 0x5A;
            auto out = unpack_indices(bad, count, V);
            for (std::size_t i = 0; i < count; ++i) {
                const bool overlaps = i * bits < 8 * (k + 1) && (i + 1) * bits > 8 * k;
                if (!overlaps) ASSERT_EQ(out[i], idx[i]) << "V=" << V << " byte " << k << " cell " << i;
            }
        }
    }
}

TEST(Ppm, RoundTripAndComments) {
    auto img = gradient_image(5, 7);
    auto bytes = encode_ppm(img);
    auto back = decode_ppm(bytes);
    ASSERT_EQ(back.height, 5u);
    ASSERT_EQ(back.width, 7u);
    EXPECT_EQ(encode_ppm(back), bytes);
    std::string with_comment = "P6\n# made by hand\n2 1\n# depth\n255\n";
    std::vector<std::uint8_t> raw(with_comment.begin(), with_comment.end());
    for (int v : {0, 128, 255, 10, 20, 30}) raw.push_back(static_cast<std::uint8_t>(v));
    auto px = decode_ppm(raw);
    EXPECT_FLOAT_EQ(px.at(0, 0, 0), 0.0f);
    EXPECT_FLOAT_EQ(px.at(2, 0, 0), 1.0f);
    EXPECT_FLOAT_EQ(px.at(0, 0, 1), 10.0f / 255.0f);
}

TEST(Ppm, RejectsMalformedFiles) {
    auto as_bytes = [](const std::string& s) { return std::vector<std::uint8_t>(s.begin(), s.end()); };
    EXPECT_THROW(decode_ppm(as_bytes("P3\n1 1\n255\n0 0 0")), FormatError);
    EXPECT_THROW(decode_ppm(as_bytes("P6\n1 1\n65535\n")), FormatError);
    EXPECT_THROW(decode_ppm(as_bytes("P6\n2 2\n255\nabc")), FormatError);
    EXPECT_THROW(decode_ppm(as_bytes("P6\n0 2\n255\n")), FormatError);
    EXPECT_THROW(read_ppm("/nonexistent/oscar/image.ppm"), IoError);
}

TEST(Padding, ReplicatesEdgesAndCropsBack) {
    auto img = gradient_image(20, 28);
    auto padded = pad_replicate_to(img, 8);
    ASSERT_EQ(padded.height, 24u);
    ASSERT_EQ(padded.width, 32u);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(padded.at(c, 23, 31), img.at(c, 19, 27));
        EXPECT_EQ(padded.at(c, 21, 5), img.at(c, 19, 5));
        EXPECT_EQ(padded.at(c, 3, 30), img.at(c, 3, 27));
    }
    EXPECT_EQ(crop(padded, 0, 0, 20, 28).pixels, img.pixels);
    EXPECT_EQ(pad_replicate_to(padded, 8).pixels, padded.pixels);
}

class CodecRoundTrip : public ::testing::Test {
   protected:
    OscarModel model = test::tiny_model();
};

TEST_F(CodecRoundTrip, DeterministicAndDimensionPreserving) {
    for (int id : {0, 1}) {
        for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {20, 28}, {9, 13}}) {
            auto img = gradient_image(h, w);
            auto a = compress(model, img, id).serialize();
            auto b = compress(model, img, id).serialize();
            ASSERT_EQ(a, b);
            auto ra = decompress(model, Bitstream::parse(a));
            auto rb = decompress(model, Bitstream::parse(b));
            EXPECT_EQ(ra.height, h);
            EXPECT_EQ(ra.width, w);
            EXPECT_EQ(encode_ppm(ra), encode_ppm(rb));
            for (float v : ra.pixels) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
        }
    }
}

TEST_F(CodecRoundTrip, HeaderMatchesModelAndImage) {
    auto img = gradient_image(20, 28);
    auto b = compress(model, img, 1);
    EXPECT_EQ(b.header.codebook_size, 256u);
    EXPECT_EQ(b.header.downsample, 2u);
    EXPECT_EQ(b.header.factor, 4u);
    EXPECT_EQ(b.header.padded_height, 24u);
    EXPECT_EQ(b.header.padded_width, 32u);
    EXPECT_EQ(b.header.fingerprint, model.fingerprint());
    EXPECT_EQ(b.indices.size(), 3u * 4u);
}

TEST_F(CodecRoundTrip, SingleDenoiserPassPerImage) {
    auto b = compress(model, gradient_image(32, 32), 0);
    model.denoiser().reset_forward_calls();
    decompress(model, b);
    EXPECT_EQ(model.denoiser().forward_calls(), 1u);
    EXPECT_EQ(compress(model, gradient_image(32, 32), 0).indices, b.indices);
    EXPECT_EQ(model.denoiser().forward_calls(), 1u);  // compression never runs the denoiser
}

TEST_F(CodecRoundTrip, RejectsMismatchedModelOrStream) {
    auto b = compress(model, gradient_image(16, 16), 1);
    auto other = test::tiny_model(4);
    EXPECT_THROW(decompress(other, b), FormatError);
    EXPECT_THROW(compress(model, gradient_image(16, 16), 7), RangeError);
    EXPECT_THROW(compress(model, Image{}, 0), RangeError);
    auto bytes = b.serialize();
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(Bitstream::parse(bytes), FormatError);
    auto uncalibrated = model.clone();
    uncalibrated.calibration() = RateTimestepMap(model.schedule());
    auto u = compress(uncalibrated, gradient_image(16, 16), 1);
    EXPECT_THROW(decompress(uncalibrated, u), RangeError);
}

TEST_F(CodecRoundTrip, FilesAndMeasuredRate) {
    auto dir = temp_dir("files");
    auto in = (dir / "in.ppm").string(), bits = (dir / "x.oscr").string(), out = (dir / "out.ppm").string();
    write_ppm(in, gradient_image(24, 40));
    compress_file(model, in, bits, 1);
    decompress_file(model, bits, out);
    auto rec = read_ppm(out);
    EXPECT_EQ(rec.height, 24u);
    EXPECT_EQ(rec.width, 40u);
    auto parsed = Bitstream::parse(read_file_bytes(bits));
    const double file_bpp = 8.0 * static_cast<double>(std::filesystem::file_size(bits)) / (24.0 * 40.0);
    EXPECT_DOUBLE_EQ(parsed.measured_bpp(), file_bpp);
    EXPECT_EQ(encode_ppm(decompress(model, parsed)), read_file_bytes(out));
}

TEST_F(CodecRoundTrip, ModelSaveLoadKeepsBitstreamsDecodable) {
    auto dir = temp_dir("model");
    model.save(dir.string());
    auto loaded = OscarModel::load(dir.string());
    EXPECT_EQ(loaded.fingerprint(), model.fingerprint());
    auto img = gradient_image(16, 16);
    auto b = compress(model, img, 0);
    EXPECT_EQ(compress(loaded, img, 0).serialize(), b.serialize());
    EXPECT_EQ(encode_ppm(decompress(loaded, b)), encode_ppm(decompress(model, b)));
}
