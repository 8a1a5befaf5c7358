#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oscar/diffusion.hpp"

using namespace oscar;

namespace {

// Independent argmin by binary search over the monotone sqrt(alpha_bar) table.
std::size_t bisect_timestep(double f, const NoiseSchedule& s) {
    const double target = std::max(f, 0.0);
    std::vector<double> root(s.steps());
    for (std::size_t i = 0; i < root.size(); ++i) root[i] = std::sqrt(s.alpha_bars()[i]);
    // First index whose value is <= target (the table is decreasing).
    auto it = std::lower_bound(root.begin(), root.end(), target, [](double v, double x) { return v > x; });
    std::size_t hi = static_cast<std::size_t>(it - root.begin());
    if (hi == 0) return 1;
    if (hi == root.size()) return root.size();
    // Neighbours hi-1 (above) and hi (below); ties favour the smaller t.
    return (root[hi - 1] - target <= target - root[hi]) ? hi : hi + 1;
}

std::size_t scan_timestep(double f, const NoiseSchedule& s) {
    const double target = std::max(f, 0.0);
    std::size_t best = 1;
    for (std::size_t t = 1; t <= s.steps(); ++t)
        if (std::abs(std::sqrt(s.alpha_bar(t)) - target) < std::abs(std::sqrt(s.alpha_bar(best)) - target)) best = t;
    return best;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Schedule, SingleStep) {
    auto s = NoiseSchedule::linear(1, 0.5, 0.5);
    EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
}

TEST(Schedule, TwoStepProduct) {
    auto s = NoiseSchedule::linear(2, 0.1, 0.2);
    EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-12);
    EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-12);
}

TEST(Schedule, DdpmDefaultTail) {
    auto s = NoiseSchedule::linear();
    // Frozen from an independent numpy evaluation of the running product.
    const double expected = 4.035829765375676e-05;
    EXPECT_NEAR(s.alpha_bar(1000), expected, 1e-6 * expected);
    EXPECT_NEAR(s.alpha_bar(1000), 4.0e-5, 0.2 * 4.0e-5);
}

TEST(Schedule, InvariantsHold) {
    auto s = NoiseSchedule::linear();
    double prod = 1.0;
    for (std::size_t t = 1; t <= s.steps(); ++t) {
        EXPECT_GT(s.beta(t), 0.0);
        EXPECT_LT(s.beta(t), 1.0);
        prod *= 1.0 - s.beta(t);
        EXPECT_NEAR(s.alpha_bar(t), prod, 1e-6 * prod);
        EXPECT_GT(s.alpha_bar(t), 0.0);
        EXPECT_LT(s.alpha_bar(t), 1.0);
        if (t > 1) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
}

TEST(Schedule, RejectsBadRanges) {
    EXPECT_THROW(NoiseSchedule::linear(0), RangeError);
    EXPECT_THROW(NoiseSchedule::linear(10, 0.0, 0.1), RangeError);
    EXPECT_THROW(NoiseSchedule::linear(10, 0.2, 0.1), RangeError);
    EXPECT_THROW(NoiseSchedule::linear(10, 0.1, 1.0), RangeError);
    auto s = NoiseSchedule::linear();
    EXPECT_THROW(s.alpha_bar(0), RangeError);
    EXPECT_THROW(s.alpha_bar(1001), RangeError);
}

TEST(ForwardDiffuse, ScalarExamples) {
    auto one = TensorD::scalar(1.0);
    EXPECT_NEAR(forward_diffuse_ab(one, 0.64, one).item(), 1.4, 1e-12);
    EXPECT_NEAR(forward_diffuse_ab(one, 0.64, TensorD::scalar(0.0)).item(), 0.8, 1e-12);
    EXPECT_EQ(forward_diffuse_ab(TensorD::scalar(2.5), 1.0, one).item(), 2.5);
    auto s = NoiseSchedule::linear();
    EXPECT_THROW(forward_diffuse(one, 0, one, s), RangeError);
    EXPECT_THROW(forward_diffuse(TensorD::zeros({2}), 1, TensorD::zeros({3}), s), ShapeError);
}

TEST(OneStepDenoise, ScalarExamples) {
    EXPECT_NEAR(one_step_denoise_ab(TensorD::scalar(1.4), 0.64, TensorD::scalar(1.0)).item(), 1.0, 1e-12);
    EXPECT_NEAR(one_step_denoise_ab(TensorD::scalar(1.6), 0.64, TensorD::scalar(0.0)).item(), 2.0, 1e-12);
    EXPECT_THROW(one_step_denoise_ab(TensorD::scalar(1.0), 0.0, TensorD::scalar(0.0)), RangeError);
}

TEST(OneStepDenoise, InvertsForwardDiffusionEverywhere) {
    auto s = NoiseSchedule::linear();
    Rng rng(21);
    // Double precision: at t = 999 the inverse amplifies rounding by 1/sqrt(alpha_bar) ~ 157.
    for (std::size_t t : {1, 250, 500, 999}) {
        auto z0 = TensorD::randn({2, 4, 8, 8}, rng);
        auto eps = TensorD::randn({2, 4, 8, 8}, rng);
        auto back = one_step_denoise(forward_diffuse(z0, t, eps, s), t, eps, s);
        EXPECT_LE(max_abs_diff(back, z0), 1e-5) << "t=" << t;
    }
}

TEST(ExtractResidual, Examples) {
    auto s = NoiseSchedule::linear();
    Rng rng(5);
    auto z0 = TensorD::randn({1, 4, 4, 4}, rng);
    auto eps = TensorD::randn({1, 4, 4, 4}, rng);
    auto zt = forward_diffuse(z0, 300, eps, s);
    EXPECT_LE(max_abs_diff(extract_residual(zt, z0, 300, s), eps), 1e-6);
    auto pure = scale(z0, std::sqrt(s.alpha_bar(300)));
    EXPECT_LE(max_abs_diff(extract_residual(pure, z0, 300, s), TensorD::zeros(z0.shape())), 1e-12);
    EXPECT_NEAR(extract_residual_ab(TensorD::scalar(1.4), TensorD::scalar(1.0), 0.64).item(), 1.0, 1e-12);
    EXPECT_THROW(extract_residual_ab(TensorD::scalar(1.0), TensorD::scalar(1.0), 1.0), RangeError);
}

TEST(TheoreticalSim, Examples) {
    auto s = NoiseSchedule::from_betas({0.75});
    EXPECT_DOUBLE_EQ(theoretical_sim(1, s), 0.5);
    auto d = NoiseSchedule::linear();
    EXPECT_DOUBLE_EQ(theoretical_sim(10, d), std::sqrt(d.alpha_bar(10)));
}

TEST(TheoreticalSim, MonteCarloUnitNormNoise) {
    Rng rng(0xC05);
    const std::size_t dim = 4096;
    for (double ab : {0.1, 0.5, 0.9}) {
        double acc = 0.0;
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> z(dim), e(dim);
            double nz = 0.0, ne = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                z[i] = rng.normal();
                e[i] = rng.normal();
                nz += z[i] * z[i];
                ne += e[i] * e[i];
            }
            double dot_xz = 0.0, nx = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                double x = std::sqrt(ab) * z[i] / std::sqrt(nz) + std::sqrt(1 - ab) * e[i] / std::sqrt(ne);
                dot_xz += x * z[i] / std::sqrt(nz);
                nx += x * x;
            }
            acc += dot_xz / std::sqrt(nx);
        }
        EXPECT_NEAR(acc / 1000.0, std::sqrt(ab), 0.01) << "alpha_bar=" << ab;
    }
}

TEST(MapRateToTimestep, Boundaries) {
    auto s = NoiseSchedule::linear();
    EXPECT_EQ(map_rate_to_timestep(1.0, s), 1u);
    EXPECT_EQ(map_rate_to_timestep(std::sqrt(s.alpha_bar(1)), s), 1u);
    EXPECT_EQ(map_rate_to_timestep(0.0, s), 1000u);
    EXPECT_EQ(map_rate_to_timestep(-0.4, s), 1000u);
}

TEST(MapRateToTimestep, DdpmPointNinety) {
    auto s = NoiseSchedule::linear();
    // Exhaustive scan and bisection agree; frozen value from numpy.
    EXPECT_EQ(map_rate_to_timestep(0.9, s), 141u);
    EXPECT_EQ(bisect_timestep(0.9, s), 141u);
    EXPECT_LE(s.alpha_bar(141), 0.81);
    EXPECT_GT(s.alpha_bar(140), 0.81);
}

TEST(MapRateToTimestep, MatchesOraclesAndIsMonotone) {
    auto s = NoiseSchedule::linear();
    Rng rng(77);
    for (int i = 0; i < 1000; ++i) {
        double f = rng.uniform(-1.0, 1.0);
        auto t = map_rate_to_timestep(f, s);
        EXPECT_EQ(t, scan_timestep(f, s));
        EXPECT_EQ(t, bisect_timestep(f, s));
    }
    std::size_t prev = map_rate_to_timestep(-1.0, s);
    for (int i = 0; i <= 4000; ++i) {
        double f = -1.0 + 2.0 * i / 4000.0;
        auto t = map_rate_to_timestep(f, s);
        EXPECT_LE(t, prev);
        prev = t;
    }
}

TEST(MapRateToTimestep, TieGoesToSmallerTimestep) {
    // sqrt(alpha_bar) = 0.5 and 0.25 exactly; F = 0.375 is equidistant.
    auto s = NoiseSchedule::from_betas({0.75, 0.75});
    ASSERT_EQ(std::sqrt(s.alpha_bar(2)), 0.25);
    EXPECT_EQ(map_rate_to_timestep(0.375, s), 1u);
}

TEST(EmpiricalSim, IdentityAndNegation) {
    Rng rng(8);
    std::vector<Tensor> latents;
    for (int i = 0; i < 5; ++i) latents.push_back(Tensor::randn({1, 4, 4, 4}, rng));
    EXPECT_NEAR(measure_empirical_sim(latents, [](const Tensor& z) { return z; }), 1.0, 1e-6);
    EXPECT_NEAR(measure_empirical_sim(latents, [](const Tensor& z) { return neg(z); }), -1.0, 1e-6);
}

TEST(EmpiricalSim, OrthogonalEqualNormPerturbation) {
    Rng rng(9);
    std::vector<TensorD> latents;
    for (int i = 0; i < 100; ++i) latents.push_back(TensorD::randn({1, 4, 2, 2}, rng));
    // Per site: rotate channel pairs (a, b) -> (-b, a); orthogonal, equal norm.
    auto perturb = [](const TensorD& z) {
        std::vector<double> out(z.numel());
        const std::size_t hw = z.dim(2) * z.dim(3);
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t c = 0; c < 4; c += 2) {
                double a = z[c * hw + p], b = z[(c + 1) * hw + p];
                out[c * hw + p] = a - b;
                out[(c + 1) * hw + p] = b + a;
            }
        return TensorD::from_vector(z.shape(), std::move(out));
    };
    EXPECT_NEAR(measure_empirical_sim(latents, perturb), 1.0 / std::sqrt(2.0), 0.02);
}

TEST(EmpiricalSim, ZeroNormSitesSkippedThenRejected) {
    auto z = TensorD::full({1, 2, 10, 10}, 1.0);
    auto zero_one_site = [](const TensorD& x) {
        auto y = x.clone();
        auto d = y.mutable_data();
        d[0] = d[100] = 0.0;
        return y;
    };
    EXPECT_NEAR(measure_empirical_sim(std::vector<TensorD>{z}, zero_one_site), 1.0, 1e-12);
    auto zero_two_sites = [](const TensorD& x) {
        auto y = x.clone();
        auto d = y.mutable_data();
        d[0] = d[100] = d[1] = d[101] = 0.0;
        return y;
    };
    EXPECT_THROW(measure_empirical_sim(std::vector<TensorD>{z}, zero_two_sites), NumericError);
    EXPECT_THROW(measure_empirical_sim(std::vector<TensorD>{}, zero_one_site), RangeError);
}

TEST(RateTimestepMapTest, CalibrateRoundTripAndArgmin) {
    RateTimestepMap map(NoiseSchedule::linear());
    map.calibrate({.rate_id = 0, .downsample = 1, .codebook_size = 256}, 0.93, 256);
    map.calibrate({.rate_id = 1, .downsample = 2, .codebook_size = 256}, 0.81, 256);
    map.calibrate({.rate_id = 2, .downsample = 2, .codebook_size = 16}, -0.2, 300);
    EXPECT_TRUE(map.argmin_holds());
    EXPECT_EQ(map.timestep(2), 1000u);
    EXPECT_GE(map.timestep(1), map.timestep(0));
    auto text = map.to_text();
    auto back = RateTimestepMap::from_text(text);
    EXPECT_EQ(back.to_text(), text);
    EXPECT_TRUE(back.argmin_holds());
    EXPECT_EQ(back.at(1).rate, (RateConfig{.rate_id = 1, .downsample = 2, .codebook_size = 256}));
    EXPECT_THROW(map.at(7), RangeError);
    EXPECT_THROW(RateTimestepMap::from_text("garbage"), FormatError);
}
