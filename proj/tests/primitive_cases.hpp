#pragma once

// One generator + function per differentiable primitive. Inputs are drawn so
// that no coordinate sits within finite-difference reach of a kink.

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oscar/ops.hpp"

namespace oscar::testing {

struct PrimitiveCase {
    std::string name;
    std::function<std::vector<TensorD>(Rng&)> make;
    std::function<TensorD(const std::vector<TensorD>&)> fn;
};

inline TensorD away_from(TensorD x, double kink, double margin) {
    auto d = x.mutable_data();
    for (auto& v : d)
        if (std::abs(v - kink) < margin) v = kink + (v < kink ? -margin : margin);
    return x;
}

inline std::vector<PrimitiveCase> primitive_cases() {
    using V = std::vector<TensorD>;
    std::vector<PrimitiveCase> c;
    auto two = [](Shape a, Shape b) { return [a, b](Rng& r) { return V{param(a, r), param(b, r)}; }; };
    auto one = [](Shape a) { return [a](Rng& r) { return V{param(a, r)}; }; };
    auto pos = [](Shape a) { return [a](Rng& r) { return V{positive_param(a, r)}; }; };

    c.push_back({"add_broadcast", two({2, 3, 4}, {3, 1}), [](const V& p) { return add(p[0], p[1]); }});
    c.push_back({"sub_broadcast", two({2, 3}, {1, 3}), [](const V& p) { return sub(p[0], p[1]); }});
    c.push_back({"mul_broadcast", two({2, 3, 2, 2}, {1, 3, 1, 1}), [](const V& p) { return mul(p[0], p[1]); }});
    c.push_back({"div", [](Rng& r) { return V{param({5}, r), positive_param({5}, r)}; },
                 [](const V& p) { return div(p[0], p[1]); }});
    c.push_back({"scale", one({4}), [](const V& p) { return scale(p[0], -1.7); }});
    c.push_back({"add_scalar", one({4}), [](const V& p) { return add_scalar(p[0], 0.3); }});
    c.push_back({"neg", one({4}), [](const V& p) { return neg(p[0]); }});
    c.push_back({"square", one({6}), [](const V& p) { return square(p[0]); }});
    c.push_back({"sqrt", pos({6}), [](const V& p) { return sqrt(p[0]); }});
    c.push_back({"log", pos({6}), [](const V& p) { return log(p[0]); }});
    c.push_back({"exp", one({6}), [](const V& p) { return exp(p[0]); }});
    c.push_back({"sigmoid", one({6}), [](const V& p) { return sigmoid(p[0]); }});
    c.push_back({"silu", one({6}), [](const V& p) { return silu(p[0]); }});
    c.push_back({"softplus", one({6}), [](const V& p) { return softplus(p[0]); }});
    c.push_back({"clamp",
                 [](Rng& r) {
                     auto x = scale(param({8}, r), 2.0).detach();
                     x = away_from(away_from(x, -1.0, 1e-2), 1.0, 1e-2);
                     return V{x.set_requires_grad(true)};
                 },
                 [](const V& p) { return clamp(p[0], -1.0, 1.0); }});
    c.push_back({"sum", one({3, 4}), [](const V& p) { return sum(p[0]); }});
    c.push_back({"mean", one({3, 4}), [](const V& p) { return mean(p[0]); }});
    c.push_back({"sum_dim", one({2, 3, 4}), [](const V& p) { return sum_dim(p[0], 1); }});
    c.push_back({"mean_dim", one({2, 3, 4}), [](const V& p) { return mean_dim(p[0], 2, false); }});
    c.push_back({"dot", two({5}, {5}), [](const V& p) { return dot(p[0], p[1]); }});
    c.push_back({"l2_norm", one({5}), [](const V& p) { return l2_norm(p[0]); }});
    c.push_back({"weighted_sum", [](Rng& r) { return V{param({}, r), param({}, r), param({}, r)}; },
                 [](const V& p) { return weighted_sum<double>({p[0], p[1], p[2]}, {1.0, 0.5, 2.0}); }});
    c.push_back({"reshape", one({2, 6}), [](const V& p) { return reshape(p[0], {3, 4}); }});
    c.push_back({"transpose", one({2, 3, 4}), [](const V& p) { return transpose(p[0]); }});
    c.push_back({"concat", two({2, 1, 3}, {2, 2, 3}), [](const V& p) { return concat<double>({p[0], p[1]}, 1); }});
    c.push_back({"upsample_nearest", one({1, 2, 2, 3}), [](const V& p) { return upsample_nearest(p[0], 2); }});
    c.push_back({"pad_replicate", one({1, 2, 3, 3}), [](const V& p) { return pad_replicate(p[0], 1); }});
    c.push_back({"matmul", two({3, 4}, {4, 2}), [](const V& p) { return matmul(p[0], p[1]); }});
    c.push_back({"matmul_batched", two({2, 3, 4}, {2, 4, 2}), [](const V& p) { return matmul(p[0], p[1]); }});
    c.push_back({"conv2d_3x3", [](Rng& r) { return V{param({2, 2, 5, 5}, r), param({3, 2, 3, 3}, r), param({3}, r)}; },
                 [](const V& p) { return conv2d(p[0], p[1], p[2], 1, 1); }});
    c.push_back({"conv2d_stride2", [](Rng& r) { return V{param({1, 2, 6, 6}, r), param({2, 2, 3, 3}, r), param({2}, r)}; },
                 [](const V& p) { return conv2d(p[0], p[1], p[2], 2, 1); }});
    c.push_back({"conv2d_1x1", [](Rng& r) { return V{param({2, 3, 3, 3}, r), param({2, 3, 1, 1}, r)}; },
                 [](const V& p) { return conv2d(p[0], p[1]); }});
    c.push_back({"group_norm", [](Rng& r) { return V{param({2, 3, 3, 3}, r), param({3}, r), param({3}, r)}; },
                 [](const V& p) { return group_norm(p[0], p[1], p[2]); }});
    c.push_back({"softmax", one({2, 3, 5}), [](const V& p) { return softmax(p[0]); }});
    c.push_back({"mse", two({2, 3}, {2, 3}), [](const V& p) { return mse(p[0], p[1]); }});
    return c;
}

}  // namespace oscar::testing
