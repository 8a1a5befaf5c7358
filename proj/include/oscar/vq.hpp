#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "oscar/checkpoint.hpp"
#include "oscar/ops.hpp"
#include "oscar/rate.hpp"

namespace oscar {

struct QuantizeResult {
    std::vector<std::uint32_t> indices;  // N x h x w, row-major per sample
    std::size_t batch = 0, height = 0, width = 0;
};

/// Vector-quantization codebook of V entries in R^M with EMA re-estimation.
///
/// The EMA state keeps per-entry assignment counts N_i and vector sums m_i.
/// After every update entry i is m_i / N~_i, where N~ is the Laplace-smoothed
/// count (N_i + eps) / (sum N + V eps) * sum N. Entries whose smoothed count
/// stays below 1e-3 of the mean for `revive_after` consecutive updates are
/// reseeded from the current batch.
template <class Real>
class Codebook {
   public:
    static constexpr double kDeadFraction = 1e-3;

    Codebook() = default;
    Codebook(std::size_t size, std::size_t dim, double decay = 0.99, double laplace_eps = 1e-5)
        : size_(size), dim_(dim), decay_(decay), laplace_eps_(laplace_eps),
          entries_(BasicTensor<Real>::zeros({size, dim})), counts_(size, 1.0), sums_(size * dim, 0.0),
          streak_(size, 0) {
        if (size < 2) throw RangeError("codebook: size must be >= 2");
        if (dim < 1) throw RangeError("codebook: dimension must be >= 1");
        if (!(decay >= 0.0 && decay <= 1.0)) throw RangeError("codebook: decay must lie in [0, 1]");
    }

    // Value semantics: the entries tensor is a shared handle, so copies clone it.
    Codebook(const Codebook& o) { *this = o; }
    Codebook& operator=(const Codebook& o) {
        if (this == &o) return *this;
        size_ = o.size_, dim_ = o.dim_, decay_ = o.decay_, laplace_eps_ = o.laplace_eps_;
        revive_after_ = o.revive_after_;
        entries_ = o.size_ ? o.entries_.clone() : BasicTensor<Real>{};
        counts_ = o.counts_, sums_ = o.sums_, streak_ = o.streak_;
        return *this;
    }
    Codebook(Codebook&&) noexcept = default;
    Codebook& operator=(Codebook&&) noexcept = default;

    std::size_t size() const { return size_; }
    std::size_t dim() const { return dim_; }
    double decay() const { return decay_; }
    double laplace_eps() const { return laplace_eps_; }
    std::size_t revive_after() const { return revive_after_; }
    void set_revive_after(std::size_t n) { revive_after_ = n; }

    const BasicTensor<Real>& entries() const { return entries_; }
    std::span<const Real> entry(std::size_t i) const { return entries_.data().subspan(i * dim_, dim_); }
    const std::vector<double>& ema_counts() const { return counts_; }
    const std::vector<double>& ema_sums() const { return sums_; }

    /// Overwrites the entries and resets the EMA state to unit counts.
    void set_entries(const std::vector<Real>& values) {
        if (values.size() != size_ * dim_) throw ShapeError("codebook: expected V*M values");
        auto dst = entries_.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) throw NumericError("codebook: non-finite entry");
            dst[i] = values[i];
            sums_[i] = values[i];
        }
        std::fill(counts_.begin(), counts_.end(), 1.0);
        std::fill(streak_.begin(), streak_.end(), 0);
    }

    /// k-means++ seeding from `count` vectors of length M laid out contiguously.
    /// With fewer vectors than entries, seeds are reused with small jitter.
    void init_kmeanspp(std::span<const Real> vectors, Rng& rng) {
        const std::size_t count = vectors.size() / dim_;
        if (count == 0 || vectors.size() % dim_ != 0) throw ShapeError("codebook init: need a whole number of vectors");
        std::vector<Real> chosen;
        chosen.reserve(size_ * dim_);
        auto vec = [&](std::size_t i) { return vectors.subspan(i * dim_, dim_); };
        std::vector<double> d2(count, std::numeric_limits<double>::infinity());
        std::size_t first = rng.below(count);
        chosen.insert(chosen.end(), vec(first).begin(), vec(first).end());
        for (std::size_t k = 1; k < size_; ++k) {
            const Real* last = chosen.data() + (k - 1) * dim_;
            double total = 0.0;
            for (std::size_t i = 0; i < count; ++i) {
                double d = 0.0;
                for (std::size_t j = 0; j < dim_; ++j) {
                    double diff = static_cast<double>(vectors[i * dim_ + j]) - last[j];
                    d += diff * diff;
                }
                d2[i] = std::min(d2[i], d);
                total += d2[i];
            }
            std::size_t pick = 0;
            if (total > 0.0) {
                double u = rng.uniform() * total, acc = 0.0;
                pick = count - 1;
                for (std::size_t i = 0; i < count; ++i) {
                    acc += d2[i];
                    if (acc > u) {
                        pick = i;
                        break;
                    }
                }
                chosen.insert(chosen.end(), vec(pick).begin(), vec(pick).end());
            } else {
                // Every vector already coincides with a seed: jitter a random one.
                pick = rng.below(count);
                for (std::size_t j = 0; j < dim_; ++j)
                    chosen.push_back(static_cast<Real>(vectors[pick * dim_ + j] + 1e-3 * rng.normal()));
            }
        }
        set_entries(chosen);
    }

    /// Index of the closest entry in squared L2; ties go to the smaller index.
    std::size_t nearest_entry(std::span<const Real> v) const {
        if (v.size() != dim_) throw ShapeError("nearest_entry: vector length " + std::to_string(v.size()) +
                                               ", codebook dimension " + std::to_string(dim_));
        for (Real x : v)
            if (!std::isfinite(x)) throw NumericError("nearest_entry: non-finite vector");
        auto e = entries_.data();
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < size_; ++i) {
            double d = 0.0;
            for (std::size_t j = 0; j < dim_; ++j) {
                double diff = static_cast<double>(v[j]) - e[i * dim_ + j];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

    /// Code vectors for an index grid, as an [N, M, h, w] constant tensor.
    BasicTensor<Real> lookup(const QuantizeResult& q) const {
        const std::size_t hw = q.height * q.width;
        std::vector<Real> out(q.batch * dim_ * hw);
        auto e = entries_.data();
        for (std::size_t n = 0; n < q.batch; ++n)
            for (std::size_t p = 0; p < hw; ++p) {
                std::uint32_t idx = q.indices[n * hw + p];
                if (idx >= size_) throw RangeError("codebook lookup: index " + std::to_string(idx) + " >= V");
                for (std::size_t c = 0; c < dim_; ++c) out[(n * dim_ + c) * hw + p] = e[idx * dim_ + c];
            }
        return BasicTensor<Real>::from_vector({q.batch, dim_, q.height, q.width}, std::move(out));
    }

    /// Site-wise nearest-entry assignment of an [N, M, h, w] feature grid.
    QuantizeResult assign(const BasicTensor<Real>& features) const {
        const auto& s = features.shape();
        if (s.size() != 4 || s[1] != dim_)
            throw ShapeError("quantize_grid: features " + shape_str(s) + " need " + std::to_string(dim_) + " channels");
        QuantizeResult q{{}, s[0], s[2], s[3]};
        const std::size_t hw = s[2] * s[3];
        q.indices.resize(s[0] * hw);
        std::vector<Real> v(dim_);
        auto f = features.data();
        for (std::size_t n = 0; n < s[0]; ++n)
            for (std::size_t p = 0; p < hw; ++p) {
                for (std::size_t c = 0; c < dim_; ++c) v[c] = f[(n * dim_ + c) * hw + p];
                try {
                    q.indices[n * hw + p] = static_cast<std::uint32_t>(nearest_entry(v));
                } catch (const Error& e) {
                    throw NumericError(std::string(e.what()) + " at sample " + std::to_string(n) + ", site (" +
                                       std::to_string(p / s[3]) + ", " + std::to_string(p % s[3]) + ")");
                }
            }
        return q;
    }

    /// EMA re-estimation from `vectors` (count x M, contiguous) and their
    /// assigned indices. With an rng, long-unused entries are revived.
    void ema_update(std::span<const Real> vectors, std::span<const std::uint32_t> assigned, Rng* revive_rng = nullptr) {
        if (vectors.size() != assigned.size() * dim_) throw ShapeError("ema_update: vectors/indices length mismatch");
        for (auto idx : assigned)
            if (idx >= size_) throw RangeError("ema_update: index " + std::to_string(idx) + " out of range");
        if (assigned.empty()) return;
        std::vector<double> batch_counts(size_, 0.0), batch_sums(size_ * dim_, 0.0);
        for (std::size_t k = 0; k < assigned.size(); ++k) {
            batch_counts[assigned[k]] += 1.0;
            for (std::size_t j = 0; j < dim_; ++j) batch_sums[assigned[k] * dim_ + j] += vectors[k * dim_ + j];
        }
        for (std::size_t i = 0; i < size_; ++i) {
            counts_[i] = decay_ * counts_[i] + (1.0 - decay_) * batch_counts[i];
            for (std::size_t j = 0; j < dim_; ++j)
                sums_[i * dim_ + j] = decay_ * sums_[i * dim_ + j] + (1.0 - decay_) * batch_sums[i * dim_ + j];
        }
        if (revive_rng) revive_dead(vectors, *revive_rng);
        refresh_entries();
    }

    std::vector<double> smoothed_counts() const {
        double total = 0.0;
        for (double c : counts_) total += c;
        std::vector<double> out(size_);
        const double denom = total + static_cast<double>(size_) * laplace_eps_;
        for (std::size_t i = 0; i < size_; ++i) out[i] = (counts_[i] + laplace_eps_) / denom * total;
        return out;
    }

    void save(Checkpoint& ck, const std::string& prefix) const {
        ck.put(prefix + "/entries", entries_);
        std::vector<float> c(counts_.begin(), counts_.end()), s(sums_.begin(), sums_.end());
        ck.put(prefix + "/ema_counts", {size_}, std::move(c));
        ck.put(prefix + "/ema_sums", {size_, dim_}, std::move(s));
    }

    void load(const Checkpoint& ck, const std::string& prefix) {
        ck.load_into(prefix + "/entries", entries_);
        const auto& c = ck.at(prefix + "/ema_counts");
        const auto& s = ck.at(prefix + "/ema_sums");
        if (c.shape != Shape{size_} || s.shape != Shape{size_, dim_}) throw FormatError("codebook: EMA state shape mismatch");
        counts_.assign(c.values.begin(), c.values.end());
        sums_.assign(s.values.begin(), s.values.end());
        std::fill(streak_.begin(), streak_.end(), 0);
    }

   private:
    void revive_dead(std::span<const Real> vectors, Rng& rng) {
        const std::size_t count = vectors.size() / dim_;
        auto smooth = smoothed_counts();
        double mean_count = 0.0;
        for (double c : smooth) mean_count += c;
        mean_count /= static_cast<double>(size_);
        for (std::size_t i = 0; i < size_; ++i) {
            if (smooth[i] >= kDeadFraction * mean_count) {
                streak_[i] = 0;
                continue;
            }
            if (++streak_[i] < revive_after_) continue;
            std::size_t pick = rng.below(count);
            counts_[i] = mean_count;
            for (std::size_t j = 0; j < dim_; ++j) sums_[i * dim_ + j] = vectors[pick * dim_ + j] * mean_count;
            streak_[i] = 0;
        }
    }

    void refresh_entries() {
        auto smooth = smoothed_counts();
        auto dst = entries_.mutable_data();
        for (std::size_t i = 0; i < size_; ++i)
            for (std::size_t j = 0; j < dim_; ++j)
                dst[i * dim_ + j] = static_cast<Real>(sums_[i * dim_ + j] / smooth[i]);
    }

    std::size_t size_ = 0, dim_ = 0;
    double decay_ = 0.99, laplace_eps_ = 1e-5;
    std::size_t revive_after_ = 100;
    BasicTensor<Real> entries_;
    std::vector<double> counts_;
    std::vector<double> sums_;
    std::vector<std::size_t> streak_;
};

template <class Real>
struct QuantizedGrid {
    QuantizeResult codes;
    BasicTensor<Real> quantized;  // straight-through: value z_q, gradient to features
    BasicTensor<Real> z_q;        // constant code vectors
};

/// Nearest-entry quantization of every site, straight-through on the tape.
template <class Real>
QuantizedGrid<Real> quantize_grid(const BasicTensor<Real>& features, const Codebook<Real>& codebook) {
    QuantizedGrid<Real> out;
    out.codes = codebook.assign(features);
    out.z_q = codebook.lookup(out.codes);
    out.quantized = straight_through(features, out.z_q);
    return out;
}

/// ||z_e - sg(z_q)||^2 summed over the channel axis and averaged over sites.
template <class Real>
BasicTensor<Real> commitment_loss(const BasicTensor<Real>& z_e, const BasicTensor<Real>& z_q) {
    if (z_e.shape() != z_q.shape())
        throw ShapeError("commitment_loss: shapes " + shape_str(z_e.shape()) + " vs " + shape_str(z_q.shape()));
    const std::size_t channels = z_e.rank() >= 2 ? z_e.dim(1) : z_e.numel();
    const std::size_t sites = z_e.numel() / channels;
    return scale(sum(square(sub(z_e, z_q.detach()))), 1.0 / static_cast<double>(sites));
}

/// Flattens an [N, M, h, w] grid into site-major vectors (count x M).
template <class Real>
std::vector<Real> site_vectors(const BasicTensor<Real>& features) {
    const auto& s = features.shape();
    if (s.size() != 4) throw ShapeError("site_vectors: need NCHW, got " + shape_str(s));
    const std::size_t c = s[1], hw = s[2] * s[3];
    std::vector<Real> out(features.numel());
    auto f = features.data();
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) out[(n * hw + p) * c + ch] = f[(n * c + ch) * hw + p];
    return out;
}

}  // namespace oscar
