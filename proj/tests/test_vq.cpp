#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "gradcheck.hpp"
#include "oscar/vq.hpp"

using namespace oscar;

namespace {

std::size_t brute_nearest(const std::vector<float>& v, const Codebook<float>& cb) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < cb.size(); ++i) {
        double d = 0.0;
        for (std::size_t j = 0; j < cb.dim(); ++j) d += std::pow(double(v[j]) - cb.entry(i)[j], 2);
        if (d < best_d) best_d = d, best = i;
    }
    return best;
}

// Lloyd iterations to convergence, seeded at the true means.
std::vector<std::array<double, 2>> lloyd(const std::vector<float>& pts, std::vector<std::array<double, 2>> c) {
    const std::size_t n = pts.size() / 2;
    for (int it = 0; it < 100; ++it) {
        std::vector<std::array<double, 2>> acc(c.size(), {0, 0});
        std::vector<double> cnt(c.size(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = 1e300;
            for (std::size_t k = 0; k < c.size(); ++k) {
                double d = std::pow(pts[2 * i] - c[k][0], 2) + std::pow(pts[2 * i + 1] - c[k][1], 2);
                if (d < bd) bd = d, best = k;
            }
            acc[best][0] += pts[2 * i];
            acc[best][1] += pts[2 * i + 1];
            cnt[best] += 1;
        }
        for (std::size_t k = 0; k < c.size(); ++k)
            if (cnt[k] > 0) c[k] = {acc[k][0] / cnt[k], acc[k][1] / cnt[k]};
    }
    return c;
}

}  // namespace

TEST(NearestEntry, ExactMatchAndTies) {
    Codebook<float> cb(6, 2);
    cb.set_entries({0, 0, 1, 0, 5, 5, 2, 2, -1, 0, 9, 9});
    EXPECT_EQ(cb.nearest_entry(std::vector<float>{2, 2}), 3u);
    // Entries 1 (1,0) and 4 (-1,0) are equidistant from the origin shifted up.
    Codebook<float> tie(5, 2);
    tie.set_entries({10, 10, 1, 0, 10, -10, -10, 10, -1, 0});
    EXPECT_EQ(tie.nearest_entry(std::vector<float>{0, 0.5f}), 1u);
    EXPECT_THROW(cb.nearest_entry(std::vector<float>{NAN, 0}), NumericError);
    EXPECT_THROW(cb.nearest_entry(std::vector<float>{0, 0, 0}), ShapeError);
}

TEST(NearestEntry, MatchesBruteForce) {
    Rng rng(31);
    Codebook<float> cb(16, 4);
    std::vector<float> e(64);
    for (auto& x : e) x = static_cast<float>(rng.normal());
    cb.set_entries(e);
    for (int i = 0; i < 500; ++i) {
        std::vector<float> v(4);
        for (auto& x : v) x = static_cast<float>(rng.normal());
        EXPECT_EQ(cb.nearest_entry(v), brute_nearest(v, cb));
    }
}

TEST(QuantizeGrid, FixedPointAndHandmadeCodebook) {
    Codebook<float> cb(4, 2);
    cb.set_entries({0, 0, 1, 0, 0, 1, 1, 1});
    // [1, 2, 2, 2] grid; channel-major.
    auto f = Tensor::from_vector({1, 2, 2, 2}, {0.9f, 0.1f, 0.2f, 0.8f, 0.1f, 0.7f, -0.3f, 1.2f});
    auto q = quantize_grid(f, cb);
    EXPECT_EQ(q.codes.indices, (std::vector<std::uint32_t>{1, 2, 0, 3}));
    for (std::size_t p = 0; p < 4; ++p) {
        std::vector<float> v{f[p], f[4 + p]};
        EXPECT_EQ(q.codes.indices[p], brute_nearest(v, cb));
    }
    auto again = quantize_grid(q.quantized.detach(), cb);
    EXPECT_EQ(again.codes.indices, q.codes.indices);
    EXPECT_EQ(again.quantized.to_vector(), q.quantized.to_vector());
    EXPECT_EQ(q.quantized.to_vector(), q.z_q.to_vector());
}

TEST(QuantizeGrid, StraightThroughGradientIsOnes) {
    Rng rng(4);
    Codebook<double> cb(8, 3);
    std::vector<double> e(24);
    for (auto& x : e) x = rng.normal();
    cb.set_entries(e);
    auto x = oscar::testing::param({2, 3, 4, 4}, rng);
    auto g = gradients(sum(quantize_grid(x, cb).quantized), {x});
    for (double v : g[0].data()) EXPECT_EQ(v, 1.0);
    EXPECT_FALSE(cb.entries().requires_grad());
}

TEST(QuantizeGrid, VoronoiPartition) {
    Rng rng(12);
    Codebook<float> cb(5, 3);
    std::vector<float> e(15);
    for (auto& x : e) x = static_cast<float>(rng.normal());
    cb.set_entries(e);
    auto f = Tensor::randn({2, 3, 5, 5}, rng);
    auto q = quantize_grid(f, cb);
    auto sites = site_vectors(f);
    for (std::size_t s = 0; s < q.codes.indices.size(); ++s) {
        auto dist = [&](std::size_t i) {
            double d = 0;
            for (std::size_t j = 0; j < 3; ++j) d += std::pow(double(sites[s * 3 + j]) - cb.entry(i)[j], 2);
            return d;
        };
        for (std::size_t i = 0; i < 5; ++i) EXPECT_LE(dist(q.codes.indices[s]), dist(i));
    }
}

TEST(QuantizeGrid, ErrorsCarrySiteCoordinates) {
    Codebook<float> cb(2, 2);
    auto f = Tensor::zeros({1, 2, 2, 3});
    f.mutable_data()[4] = INFINITY;  // channel 0, row 1, col 1
    try {
        quantize_grid(f, cb);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("(1, 1)"), std::string::npos) << e.what();
    }
    EXPECT_THROW(quantize_grid(Tensor::zeros({1, 3, 2, 2}), cb), ShapeError);
}

TEST(EmaUpdate, EmptyBatchIsNoOp) {
    Codebook<float> cb(3, 2);
    cb.set_entries({1, 2, 3, 4, 5, 6});
    auto before = cb.entries().to_vector();
    cb.ema_update({}, {});
    EXPECT_EQ(cb.entries().to_vector(), before);
    std::vector<float> v{0, 0};
    std::vector<std::uint32_t> bad{3};
    EXPECT_THROW(cb.ema_update(v, bad), RangeError);
}

TEST(EmaUpdate, ZeroDecayGivesBatchMean) {
    Codebook<double> cb(4, 2, 0.0);
    cb.set_entries({9, 9, 8, 8, 7, 7, 6, 6});
    std::vector<double> v{1, 2, 3, 4, 5, 9};
    std::vector<std::uint32_t> idx{0, 0, 0};
    cb.ema_update(v, idx);
    EXPECT_NEAR(cb.entry(0)[0], 3.0, 1e-4);
    EXPECT_NEAR(cb.entry(0)[1], 5.0, 1e-4);
}

TEST(EmaUpdate, EntriesEqualSmoothedRatio) {
    Rng rng(3);
    Codebook<double> cb(4, 2);
    std::vector<double> e(8);
    for (auto& x : e) x = rng.normal();
    cb.set_entries(e);
    for (int it = 0; it < 20; ++it) {
        std::vector<double> v(20);
        for (auto& x : v) x = rng.normal();
        auto q = cb.assign(TensorD::from_vector({10, 2, 1, 1}, v));
        cb.ema_update(v, q.indices);
    }
    double total = 0;
    for (double c : cb.ema_counts()) total += c;
    for (std::size_t i = 0; i < 4; ++i) {
        double smooth = (cb.ema_counts()[i] + 1e-5) / (total + 4 * 1e-5) * total;
        for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(cb.entry(i)[j], cb.ema_sums()[i * 2 + j] / smooth, 1e-12);
    }
}

TEST(EmaUpdate, ConvergesToClusterMeans) {
    const std::array<std::array<double, 2>, 3> means{{{-2.0, 0.0}, {2.0, 1.0}, {0.0, 3.0}}};
    Rng rng(2024);
    std::vector<float> data;
    for (int i = 0; i < 900; ++i) {
        const auto& m = means[i % 3];
        data.push_back(static_cast<float>(m[0] + 0.2 * rng.normal()));
        data.push_back(static_cast<float>(m[1] + 0.2 * rng.normal()));
    }
    Codebook<float> cb(3, 2);
    cb.init_kmeanspp(data, rng);
    for (int step = 0; step < 200; ++step) {
        std::vector<float> batch;
        for (int k = 0; k < 64; ++k) {
            std::size_t i = rng.below(900);
            batch.push_back(data[2 * i]);
            batch.push_back(data[2 * i + 1]);
        }
        std::vector<std::uint32_t> idx;
        for (int k = 0; k < 64; ++k)
            idx.push_back(static_cast<std::uint32_t>(cb.nearest_entry(std::span<const float>(batch).subspan(2 * k, 2))));
        cb.ema_update(batch, idx);
    }
    auto oracle = lloyd(data, {means.begin(), means.end()});
    for (std::size_t k = 0; k < 3; ++k) {
        std::vector<float> m{static_cast<float>(means[k][0]), static_cast<float>(means[k][1])};
        auto e = cb.entry(cb.nearest_entry(m));
        EXPECT_LE(std::hypot(e[0] - means[k][0], e[1] - means[k][1]), 0.05) << "cluster " << k;
        EXPECT_LE(std::hypot(e[0] - oracle[k][0], e[1] - oracle[k][1]), 0.05) << "cluster " << k;
    }
}

TEST(EmaUpdate, DeadEntriesAreRevived) {
    Rng rng(6);
    Codebook<float> cb(4, 2, 0.9);
    cb.set_entries({5, 5, 5.1f, 5, 5, 5.1f, -50, -50});
    Codebook<float> frozen = cb;
    double closest = 1e9, closest_frozen = 1e9;
    for (int step = 0; step < 200; ++step) {
        std::vector<float> batch;
        for (int k = 0; k < 32; ++k) {
            batch.push_back(static_cast<float>(5 + 0.1 * rng.normal()));
            batch.push_back(static_cast<float>(5 + 0.1 * rng.normal()));
        }
        std::vector<std::uint32_t> idx, idx_frozen;
        for (int k = 0; k < 32; ++k) {
            auto v = std::span<const float>(batch).subspan(2 * k, 2);
            idx.push_back(static_cast<std::uint32_t>(cb.nearest_entry(v)));
            idx_frozen.push_back(static_cast<std::uint32_t>(frozen.nearest_entry(v)));
        }
        cb.ema_update(batch, idx, &rng);
        frozen.ema_update(batch, idx_frozen);
        closest = std::min(closest, std::hypot(cb.entry(3)[0] - 5.0, cb.entry(3)[1] - 5.0));
        closest_frozen = std::min(closest_frozen, std::hypot(frozen.entry(3)[0] - 5.0, frozen.entry(3)[1] - 5.0));
    }
    // Reseeded onto a batch vector at some point; the untouched copy never is.
    EXPECT_LT(closest, 1.0);
    EXPECT_GT(closest_frozen, 3.0);
}

TEST(EmaUpdate, CheckpointRoundTrip) {
    Rng rng(1);
    Codebook<float> cb(4, 3);
    std::vector<float> v(30);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    cb.init_kmeanspp(v, rng);
    Checkpoint ck;
    cb.save(ck, "codebook/0");
    EXPECT_TRUE(ck.contains("codebook/0/entries"));
    EXPECT_TRUE(ck.contains("codebook/0/ema_counts"));
    EXPECT_TRUE(ck.contains("codebook/0/ema_sums"));
    Codebook<float> back(4, 3);
    back.load(Checkpoint::deserialize(ck.serialize()), "codebook/0");
    EXPECT_EQ(back.entries().to_vector(), cb.entries().to_vector());
}

TEST(Commitment, Examples) {
    Rng rng(2);
    auto z = Tensor::randn({1, 4, 2, 2}, rng);
    EXPECT_EQ(commitment_loss(z, z).item(), 0.0f);
    EXPECT_EQ(commitment_loss(Tensor::scalar(1.0f), Tensor::scalar(3.0f)).item(), 4.0f);
}

TEST(Commitment, GradientOnlyReachesEncoderSide) {
    Rng rng(10);
    auto z_e = oscar::testing::param({2, 4, 3, 3}, rng);
    auto z_q = oscar::testing::param({2, 4, 3, 3}, rng);
    auto r = oscar::testing::grad_check([z_q](const std::vector<TensorD>& p) { return commitment_loss(p[0], z_q); },
                                        {z_e}, rng);
    EXPECT_LE(r.rel_error, 1e-6);
    z_e.zero_grad();
    backward(commitment_loss(z_e, z_q));
    EXPECT_FALSE(z_q.has_grad());
    EXPECT_TRUE(z_e.has_grad());
}

TEST(RateConfigTest, BitsPerPixel) {
    RateConfig r{.rate_id = 0, .downsample = 1, .codebook_size = 256, .latent_factor = 8};
    EXPECT_DOUBLE_EQ(r.theoretical_bpp(), 8.0 / 64.0);
    RateConfig toy{.rate_id = 1, .downsample = 2, .codebook_size = 16, .latent_factor = 4};
    EXPECT_DOUBLE_EQ(toy.theoretical_bpp(), 4.0 / 64.0);
    EXPECT_EQ(RateConfig{.codebook_size = 100}.bits_per_index(), 7u);
    EXPECT_THROW((RateConfig{.codebook_size = 1}.validate()), RangeError);
}
