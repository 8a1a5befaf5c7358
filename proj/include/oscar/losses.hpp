#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "oscar/networks.hpp"
#include "oscar/ops.hpp"
#include "oscar/vq.hpp"

namespace oscar {

struct LossWeights {
    double perceptual = 1.0;     // lambda_1
    double adversarial = 5e-3;   // lambda_2

    void validate() const {
        if (perceptual < 0.0 || adversarial < 0.0) throw RangeError("loss weights must be non-negative");
    }
};

/// -(1/N) sum_n cos(z0[n], z~[n]) over the N = batch * h * w sites, with the
/// channel axis as the vector. Zero-norm sites contribute 0; more than 1% of
/// them is an error.
template <class Real>
BasicTensor<Real> cosine_alignment_loss(const BasicTensor<Real>& z0, const BasicTensor<Real>& z_tilde) {
    if (z0.shape() != z_tilde.shape() || z0.rank() != 4)
        throw ShapeError("cosine_alignment_loss: shapes " + shape_str(z0.shape()) + " vs " + shape_str(z_tilde.shape()));
    auto dots = sum_dim(mul(z0, z_tilde), 1);
    auto na = sum_dim(mul(z0, z0), 1);
    auto nb = sum_dim(mul(z_tilde, z_tilde), 1);
    const std::size_t sites = na.numel();
    std::vector<Real> valid(sites), filler(sites);
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < sites; ++i) {
        bool ok = na[i] > Real(0) && nb[i] > Real(0);
        valid[i] = ok ? Real(1) : Real(0);
        filler[i] = ok ? Real(0) : Real(1);
        skipped += !ok;
    }
    if (skipped * 100 > sites)
        throw NumericError("cosine_alignment_loss: " + std::to_string(skipped) + " of " + std::to_string(sites) +
                           " sites have zero norm");
    auto mask = BasicTensor<Real>::from_vector(na.shape(), std::move(valid));
    auto pad = BasicTensor<Real>::from_vector(na.shape(), std::move(filler));
    auto cos = mul(div(dots, sqrt(add(mul(na, nb), pad))), mask);
    return scale(sum(cos), -1.0 / static_cast<double>(sites));
}

/// Stage-1 objective: alignment plus commitment. The codebook term is handled
/// by the EMA update, so no gradient reaches the codebook.
template <class Real>
BasicTensor<Real> repa_loss(const BasicTensor<Real>& z0, const HyperOutputs<Real>& hyper) {
    return add(cosine_alignment_loss(z0, hyper.z_tilde), commitment_loss(hyper.z_e, hyper.z_q));
}

namespace detail {

// Treats every channel as an independent single-channel image.
template <class Real>
BasicTensor<Real> planes(const BasicTensor<Real>& x) {
    return reshape(x, {x.dim(0) * x.dim(1), 1, x.dim(2), x.dim(3)});
}

// Separable Sobel factors: a central difference and a (1, 2, 1) smoothing.
// The difference stage is exact on flat regions, so constant inputs give 0.
template <class Real>
struct SobelFactors {
    BasicTensor<Real> diff_row, smooth_row, diff_col, smooth_col;
};

template <class Real>
const SobelFactors<Real>& sobel_factors() {
    static const SobelFactors<Real> f{
        BasicTensor<Real>::from_vector({1, 1, 1, 3}, {-1, 0, 1}),
        BasicTensor<Real>::from_vector({1, 1, 1, 3}, {1, 2, 1}),
        BasicTensor<Real>::from_vector({1, 1, 3, 1}, {-1, 0, 1}),
        BasicTensor<Real>::from_vector({1, 1, 3, 1}, {1, 2, 1}),
    };
    return f;
}

template <class Real>
const BasicTensor<Real>& avg_pool_kernel() {
    static const auto k = BasicTensor<Real>::full({1, 1, 2, 2}, Real(0.25));
    return k;
}

inline constexpr std::size_t kDistsFilters = 16;
inline constexpr std::size_t kDistsKernel = 5;
inline constexpr std::size_t kDistsScales = 3;
inline constexpr double kDistsC1 = 1e-6;
inline constexpr double kDistsC2 = 1e-6;

// Fixed seeded bank of zero-mean, unit-norm 5x5 filters.
template <class Real>
const BasicTensor<Real>& dists_filter_bank() {
    static const auto bank = [] {
        Rng rng(0xD157517EULL);
        const std::size_t k2 = kDistsKernel * kDistsKernel;
        std::vector<Real> w(kDistsFilters * k2);
        for (std::size_t f = 0; f < kDistsFilters; ++f) {
            std::vector<double> v(k2);
            double mu = 0.0;
            for (auto& x : v) mu += (x = rng.normal());
            mu /= static_cast<double>(k2);
            double norm = 0.0;
            for (auto& x : v) {
                x -= mu;
                norm += x * x;
            }
            norm = std::sqrt(norm);
            for (std::size_t i = 0; i < k2; ++i) w[f * k2 + i] = static_cast<Real>(v[i] / norm);
        }
        return BasicTensor<Real>::from_vector({kDistsFilters, 1, kDistsKernel, kDistsKernel}, std::move(w));
    }();
    return bank;
}

// Raw plane plus softplus-rectified filter responses: [P, 1 + F, h, w].
template <class Real>
BasicTensor<Real> dists_features(const BasicTensor<Real>& planes_in) {
    auto resp = softplus(conv2d(planes_in, dists_filter_bank<Real>(), {}, 1, kDistsKernel / 2));
    return concat<Real>({planes_in, resp}, 1);
}

// Mean over the structure and texture distances of every feature map.
template <class Real>
BasicTensor<Real> dists_scale_term(const BasicTensor<Real>& fx, const BasicTensor<Real>& fy) {
    const std::size_t p = fx.dim(0), c = fx.dim(1), hw = fx.dim(2) * fx.dim(3);
    auto x = reshape(fx, {p, c, hw});
    auto y = reshape(fy, {p, c, hw});
    auto mx = mean_dim(x, 2), my = mean_dim(y, 2);  // [p, c, 1]
    auto dx = sub(x, mx), dy = sub(y, my);
    auto vx = mean_dim(mul(dx, dx), 2), vy = mean_dim(mul(dy, dy), 2), cxy = mean_dim(mul(dx, dy), 2);
    auto texture_sim = div(add_scalar(scale(mul(mx, my), 2.0), kDistsC1), add_scalar(add(mul(mx, mx), mul(my, my)), kDistsC1));
    auto structure_sim = div(add_scalar(scale(cxy, 2.0), kDistsC2), add_scalar(add(vx, vy), kDistsC2));
    // 1 - (t + s)/2, averaged over maps.
    return add_scalar(scale(mean(add(texture_sim, structure_sim)), -0.5), 1.0);
}

}  // namespace detail

/// Per-channel Sobel gradient magnitude with replicate padding.
template <class Real>
BasicTensor<Real> sobel_edges(const BasicTensor<Real>& image) {
    const auto& s = image.shape();
    if (s.size() != 4 || s[2] < 3 || s[3] < 3) throw ShapeError("sobel_edges: need [N,C,H,W] with H,W >= 3, got " + shape_str(s));
    const auto& k = detail::sobel_factors<Real>();
    auto padded = pad_replicate(detail::planes(image), 1);
    auto gx = conv2d(conv2d(padded, k.diff_row), k.smooth_col);
    auto gy = conv2d(conv2d(padded, k.smooth_row), k.diff_col);
    return reshape(sqrt(add(mul(gx, gx), mul(gy, gy))), s);
}

/// Structure/texture distance over a fixed multi-scale filter bank. Zero for
/// identical inputs, symmetric, non-negative.
template <class Real>
BasicTensor<Real> dists_lite(const BasicTensor<Real>& x, const BasicTensor<Real>& y) {
    if (x.shape() != y.shape() || x.rank() != 4) throw ShapeError("dists_lite: shapes " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    auto px = detail::planes(x), py = detail::planes(y);
    std::vector<BasicTensor<Real>> terms;
    for (std::size_t level = 0; level < detail::kDistsScales; ++level) {
        if (level > 0) {
            if (px.dim(2) < 2 || px.dim(3) < 2) break;
            px = conv2d(px, detail::avg_pool_kernel<Real>(), {}, 2, 0);
            py = conv2d(py, detail::avg_pool_kernel<Real>(), {}, 2, 0);
        }
        terms.push_back(detail::dists_scale_term(detail::dists_features(px), detail::dists_features(py)));
    }
    return weighted_sum(terms, std::vector<double>(terms.size(), 1.0 / static_cast<double>(terms.size())));
}

/// MSE + structure/texture distance + the same distance on Sobel edge maps.
template <class Real>
struct PerceptualTerms {
    BasicTensor<Real> mse, dists, edge_dists, total;
};

template <class Real>
PerceptualTerms<Real> perceptual_terms(const BasicTensor<Real>& image, const BasicTensor<Real>& recon) {
    PerceptualTerms<Real> t;
    t.mse = oscar::mse(image, recon);
    t.dists = dists_lite(image, recon);
    t.edge_dists = dists_lite(sobel_edges(image), sobel_edges(recon));
    t.total = weighted_sum<Real>({t.mse, t.dists, t.edge_dists}, {1.0, 1.0, 1.0});
    return t;
}

template <class Real>
BasicTensor<Real> perceptual_loss(const BasicTensor<Real>& image, const BasicTensor<Real>& recon) {
    return perceptual_terms(image, recon).total;
}

inline constexpr double kLogitClamp = 30.0;

template <class Real>
struct GanLosses {
    BasicTensor<Real> generator;      // -mean log sigma(D(fake))
    BasicTensor<Real> discriminator;  // -mean log sigma(D(real)) - mean log(1 - sigma(D(fake)))
};

/// Non-saturating GAN pair on latents. The discriminator loss sees the fake
/// latent detached, so it never reaches generator parameters.
template <class Real>
GanLosses<Real> gan_losses(const BasicTensor<Real>& real, const BasicTensor<Real>& fake,
                           const LatentDiscriminator<Real>& disc) {
    GanLosses<Real> out;
    auto fake_logits = clamp(disc(fake), -kLogitClamp, kLogitClamp);
    out.generator = mean(softplus(neg(fake_logits)));
    auto real_logits = clamp(disc(real.detach()), -kLogitClamp, kLogitClamp);
    auto fake_logits_d = clamp(disc(fake.detach()), -kLogitClamp, kLogitClamp);
    out.discriminator = add(mean(softplus(neg(real_logits))), mean(softplus(fake_logits_d)));
    return out;
}

/// repa + lambda_1 * perceptual + lambda_2 * generator loss, as one rounding
/// of a double-precision weighted sum.
template <class Real>
BasicTensor<Real> stage2_total(const BasicTensor<Real>& repa, const BasicTensor<Real>& perceptual,
                               const BasicTensor<Real>& generator, const LossWeights& w) {
    w.validate();
    return weighted_sum<Real>({repa, perceptual, generator}, {1.0, w.perceptual, w.adversarial});
}

}  // namespace oscar
