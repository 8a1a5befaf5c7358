#pragma once

// Checkpoint chunk format, little-endian:
//   "OSCW" | version u16 | { name_len u16 | name | dtype u8 (0 = f32) | rank u8 |
//                            dims u32 x rank | payload } ...
// Records run to end of file.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "oscar/tensor.hpp"

namespace oscar {

inline constexpr char kCheckpointMagic[4] = {'O', 'S', 'C', 'W'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointRecord {
    Shape shape;
    std::vector<float> values;
};

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
   public:
    ByteReader(const std::vector<std::uint8_t>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
    bool done() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    void need(std::size_t n) const {
        if (remaining() < n) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t lo = u32();
        std::uint64_t hi = u32();
        return lo | (hi << 32);
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    const std::uint8_t* take(std::size_t n) {
        need(n);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

   private:
    const std::vector<std::uint8_t>& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

/// Ordered name -> tensor map. Serialization order is the map's (sorted) order,
/// so equal contents always produce identical bytes.
class Checkpoint {
   public:
    template <class Real>
    void put(const std::string& name, const BasicTensor<Real>& t) {
        CheckpointRecord rec;
        rec.shape = t.shape();
        rec.values.assign(t.data().begin(), t.data().end());
        records_[name] = std::move(rec);
    }

    void put(const std::string& name, Shape shape, std::vector<float> values) {
        if (numel_of(shape) != values.size()) throw ShapeError("checkpoint: record '" + name + "' size mismatch");
        records_[name] = {std::move(shape), std::move(values)};
    }

    bool contains(const std::string& name) const { return records_.count(name) > 0; }

    const CheckpointRecord& at(const std::string& name) const {
        auto it = records_.find(name);
        if (it == records_.end()) throw FormatError("checkpoint: missing record '" + name + "'");
        return it->second;
    }

    /// Copies a stored record into an existing tensor of the same shape.
    template <class Real>
    void load_into(const std::string& name, BasicTensor<Real>& t) const {
        const auto& rec = at(name);
        if (rec.shape != t.shape())
            throw FormatError("checkpoint: record '" + name + "' has shape " + shape_str(rec.shape) +
                              ", expected " + shape_str(t.shape()));
        auto dst = t.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(rec.values[i]);
    }

    const std::map<std::string, CheckpointRecord>& records() const { return records_; }

    std::vector<std::uint8_t> serialize() const {
        static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian host");
        std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
        detail::put_u16(out, kCheckpointVersion);
        for (const auto& [name, rec] : records_) {
            if (name.size() > 0xFFFF) throw FormatError("checkpoint: name too long");
            if (rec.shape.size() > 0xFF) throw FormatError("checkpoint: rank too large");
            detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
            out.insert(out.end(), name.begin(), name.end());
            detail::put_u8(out, 0);
            detail::put_u8(out, static_cast<std::uint8_t>(rec.shape.size()));
            for (auto d : rec.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
            const auto* p = reinterpret_cast<const std::uint8_t*>(rec.values.data());
            out.insert(out.end(), p, p + rec.values.size() * sizeof(float));
        }
        return out;
    }

    static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
        detail::ByteReader r(bytes, "checkpoint");
        if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic");
        if (auto v = r.u16(); v != kCheckpointVersion)
            throw FormatError("checkpoint: unsupported version " + std::to_string(v));
        Checkpoint ck;
        while (!r.done()) {
            std::string name = r.bytes(r.u16());
            if (r.u8() != 0) throw FormatError("checkpoint: record '" + name + "' has unsupported dtype");
            std::size_t rank = r.u8();
            Shape shape(rank);
            for (auto& d : shape) d = r.u32();
            std::vector<float> values(numel_of(shape));
            std::memcpy(values.data(), r.take(values.size() * sizeof(float)), values.size() * sizeof(float));
            ck.records_[name] = {std::move(shape), std::move(values)};
        }
        return ck;
    }

    void save(const std::string& path) const { write_file_bytes(path, serialize()); }
    static Checkpoint load(const std::string& path) { return deserialize(read_file_bytes(path)); }

   private:
    std::map<std::string, CheckpointRecord> records_;
};

/// FNV-1a over the serialized bytes; used as the model fingerprint.
inline std::uint64_t fingerprint_bytes(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace oscar
