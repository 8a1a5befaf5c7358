#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "oscar/diffusion.hpp"
#include "oscar/losses.hpp"
#include "oscar/networks.hpp"
#include "oscar/optim.hpp"

using namespace oscar;

namespace {

bool any_grad(const ParamList<float>& params) {
    for (const auto& p : params)
        if (p.tensor.has_grad()) return true;
    return false;
}

std::vector<std::vector<float>> snapshot(const ParamList<float>& params) {
    std::vector<std::vector<float>> out;
    for (const auto& p : params) out.push_back(p.tensor.to_vector());
    return out;
}

// Solves X * A = B for 4x4 A by Gauss-Jordan with partial pivoting.
std::vector<double> right_solve(std::vector<double> a, std::vector<double> b) {
    const int n = 4;
    // Work on A^T X^T = B^T.
    std::vector<double> at(16), bt(16);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) at[i * n + j] = a[j * n + i], bt[i * n + j] = b[j * n + i];
    for (int c = 0; c < n; ++c) {
        int piv = c;
        for (int r = c + 1; r < n; ++r)
            if (std::abs(at[r * n + c]) > std::abs(at[piv * n + c])) piv = r;
        for (int k = 0; k < n; ++k) std::swap(at[c * n + k], at[piv * n + k]), std::swap(bt[c * n + k], bt[piv * n + k]);
        for (int r = 0; r < n; ++r) {
            if (r == c) continue;
            double f = at[r * n + c] / at[c * n + c];
            for (int k = 0; k < n; ++k) at[r * n + k] -= f * at[c * n + k], bt[r * n + k] -= f * bt[c * n + k];
        }
    }
    std::vector<double> x(16);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) x[j * n + i] = bt[i * n + j] / at[i * n + i];
    return x;
}

}  // namespace

TEST(Vae, ShapeContract) {
    Rng rng(1);
    TinyVae<float> vae({.latent_channels = 4, .factor = 4, .width = 8}, rng);
    auto img = Tensor::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
    auto z = vae.encode(img);
    EXPECT_EQ(z.shape(), (Shape{1, 4, 16, 16}));
    EXPECT_EQ(vae.decode(z).shape(), (Shape{1, 3, 64, 64}));
    EXPECT_THROW(vae.encode(Tensor::zeros({1, 3, 30, 32})), ShapeError);
    EXPECT_THROW(TinyVae<float>({.factor = 3}, rng), RangeError);
}

TEST(Vae, FrozenParametersReceiveNoGradient) {
    Rng rng(2);
    TinyVae<float> vae({.width = 8}, rng);
    vae.freeze();
    auto img = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto head = Tensor::randn({1, 4, 4, 4}, rng).set_requires_grad(true);
    auto loss = mean(square(mul(vae.encode(img), head)));
    backward(loss);
    EXPECT_FALSE(any_grad(vae.parameters()));
    EXPECT_TRUE(head.has_grad());
    EXPECT_FALSE(loss.node() == nullptr);
}

TEST(Hyper, ShapeContractAcrossRates) {
    Rng rng(3);
    for (std::size_t s : {1, 2, 4}) {
        HyperEncoderNet<float> h({.rate_id = 0, .downsample = s, .codebook_size = 16}, {.width = 8}, rng);
        auto z = Tensor::randn({2, 4, 8, 8}, rng);
        auto out = h.forward(z);
        EXPECT_EQ(out.z_tilde.shape(), z.shape());
        EXPECT_EQ(out.codes.height, 8 / s);
        EXPECT_EQ(out.codes.width, 8 / s);
        EXPECT_EQ(out.codes.indices.size(), 2 * (8 / s) * (8 / s));
        EXPECT_EQ(out.z_e.shape(), (Shape{2, 4, 8 / s, 8 / s}));
    }
    HyperEncoderNet<float> h({.downsample = 2, .codebook_size = 16}, {.width = 8}, rng);
    EXPECT_THROW(h.forward(Tensor::zeros({1, 4, 5, 6})), ShapeError);
}

TEST(Hyper, CodebookHoldingFrontEndOutputsIsAFixedPoint) {
    Rng rng(4);
    HyperEncoderNet<float> h({.downsample = 2, .codebook_size = 16}, {.width = 8}, rng);
    auto z = Tensor::randn({1, 4, 8, 8}, rng);
    auto z_e = h.front(z);
    h.codebook().set_entries(site_vectors(z_e));  // 16 sites, 16 entries
    auto out = h.forward(z);
    EXPECT_EQ(out.z_q.to_vector(), out.z_e.to_vector());
    auto from_idx = h.decode_indices(out.codes);
    EXPECT_EQ(from_idx.to_vector(), out.z_tilde.to_vector());
}

TEST(Denoiser, ShapeAndTimestepConditioning) {
    Rng rng(5);
    Denoiser<float> d({.width = 8, .temb_dim = 16}, rng);
    auto z = Tensor::randn({2, 4, 8, 8}, rng);
    auto a = d(z, 10), b = d(z, 700);
    EXPECT_EQ(a.shape(), z.shape());
    EXPECT_NE(a.to_vector(), b.to_vector());
    EXPECT_EQ(d(z, 10).to_vector(), a.to_vector());
    EXPECT_EQ(d.forward_calls(), 3u);
}

TEST(Denoiser, ZeroInitOutputGivesScaledInput) {
    Rng rng(6);
    Denoiser<double> d({.width = 8, .temb_dim = 16, .zero_init_out = true}, rng);
    auto z = TensorD::randn({1, 4, 4, 4}, rng);
    auto eps = d(z, 300);
    for (double v : eps.data()) EXPECT_EQ(v, 0.0);
    auto s = NoiseSchedule::linear();
    auto x0 = one_step_denoise(z, 300, eps, s);
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(x0[i], z[i] / std::sqrt(s.alpha_bar(300)), 1e-12);
}

TEST(Lora, ZeroBKeepsBaseWeight) {
    Rng rng(7);
    auto w = Tensor::randn({4, 3, 3, 3}, rng);
    auto l = nn::LoraAdapter<float>::create(4, 27, 2, 2.0, rng);
    EXPECT_EQ(nn::lora_apply(w, l).to_vector(), w.to_vector());
    auto bad = nn::LoraAdapter<float>::create(5, 27, 2, 2.0, rng);
    EXPECT_THROW(nn::lora_apply(w, bad), ShapeError);
}

TEST(Lora, FullRankReproducesAnyPerturbation) {
    Rng rng(8);
    auto w = TensorD::randn({4, 4}, rng);
    auto delta = TensorD::randn({4, 4}, rng);
    auto l = nn::LoraAdapter<double>::create(4, 4, 4, 4.0, rng);
    // Least-squares (here exact) solve of scale * B A = delta for B.
    auto b = right_solve(l.a.to_vector(), scale(delta, 1.0 / l.scale).to_vector());
    l.b = TensorD::from_vector({4, 4}, b);
    auto eff = nn::lora_apply(w, l);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(eff[i], w[i] + delta[i], 1e-10);
}

TEST(Lora, OnlyAdaptersTrainWhenBaseFrozen) {
    Rng rng(9);
    Denoiser<float> d({.width = 8, .temb_dim = 16}, rng);
    d.attach_lora(2, 2.0, rng);
    d.freeze_base();
    auto base = d.parameters();
    auto before = snapshot(base);
    auto lora = d.lora_parameters();
    ASSERT_FALSE(lora.empty());
    auto z = Tensor::randn({1, 4, 4, 4}, rng);
    auto out0 = d(z, 50).to_vector();
    for (int step = 0; step < 3; ++step) {
        zero_grads(lora);
        backward(mean(square(d(z, 50))));
        EXPECT_FALSE(any_grad(base));
        Optimizer<float> opt({.lr = 1e-2, .weight_decay = 0.01, .kind = OptimizerKind::kAdamW});
        opt.step(lora);
    }
    EXPECT_EQ(snapshot(base), before);
    EXPECT_NE(d(z, 50).to_vector(), out0);
}

TEST(Discriminator, ShapeFinitenessDeterminism) {
    Rng a(10), b(10);
    LatentDiscriminator<float> d1({.width = 8}, a), d2({.width = 8}, b);
    Rng in(11);
    auto z = Tensor::randn({3, 4, 8, 8}, in);
    auto l1 = d1(z), l2 = d2(z);
    EXPECT_EQ(l1.shape(), (Shape{3}));
    for (float v : l1.data()) EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(l1.to_vector(), l2.to_vector());
}

TEST(Discriminator, GradientMatchesFiniteDifferences) {
    Rng rng(12);
    LatentDiscriminator<double> d({.width = 4}, rng);
    auto z = TensorD::randn({2, 4, 4, 4}, rng);
    auto params = tensors_of(d.parameters());
    auto r = oscar::testing::grad_check([&](const std::vector<TensorD>&) { return d(z); }, params, rng, 1e-5);
    EXPECT_LE(r.rel_error, 1e-6);
}

TEST(Networks, HyperAndDenoiserGradientsMatchFiniteDifferences) {
    Rng rng(13);
    HyperEncoderNet<double> h({.downsample = 2, .codebook_size = 4}, {.width = 4}, rng);
    auto z = TensorD::randn({1, 4, 4, 4}, rng);
    h.codebook().init_kmeanspp(site_vectors(h.front(z)), rng);
    auto base = h.forward(z);
    auto offset = sub(base.z_q, base.z_e).detach();
    // Straight-through surrogate: code assignment frozen at the base point.
    auto r = oscar::testing::grad_check(
        [&](const std::vector<TensorD>&) { return h.back(add(h.front(z), offset)); }, tensors_of(h.parameters()), rng,
        1e-5);
    EXPECT_LE(r.rel_error, 1e-6);

    Denoiser<double> d({.width = 4, .temb_dim = 8}, rng);
    d.attach_lora(2, 2.0, rng);
    auto lb = d.lora_parameters();
    for (auto& p : lb) p.tensor.mutable_data()[0] += 0.3;  // move B off zero
    auto all = tensors_of(d.parameters());
    for (auto& t : tensors_of(lb)) all.push_back(t);
    auto r2 = oscar::testing::grad_check([&](const std::vector<TensorD>&) { return d(z, 123); }, all, rng, 1e-5);
    EXPECT_LE(r2.rel_error, 1e-6);
}
