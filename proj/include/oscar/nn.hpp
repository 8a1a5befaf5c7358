#pragma once

// Layer building blocks. Each layer owns its parameter tensors and exposes
// them through collect(), keyed by a dotted path that doubles as the
// checkpoint record name.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "oscar/checkpoint.hpp"
#include "oscar/ops.hpp"

namespace oscar::nn {

/// Low-rank additive update scale * B * A on a frozen weight viewed as
/// [out, in]. B starts at zero so the adapted weight equals the base weight.
template <class Real>
struct LoraAdapter {
    BasicTensor<Real> a;  // [rank, in]
    BasicTensor<Real> b;  // [out, rank]
    double scale = 1.0;

    static LoraAdapter create(std::size_t out, std::size_t in, std::size_t rank, double alpha, Rng& rng) {
        if (rank == 0) throw RangeError("lora: rank must be >= 1");
        LoraAdapter l;
        l.a = BasicTensor<Real>::randn({rank, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        l.b = BasicTensor<Real>::zeros({out, rank});
        l.a.set_requires_grad(true);
        l.b.set_requires_grad(true);
        l.scale = alpha / static_cast<double>(rank);
        return l;
    }

    std::size_t rank() const { return a.dim(0); }
};

/// base + scale * reshape(B A, base.shape).
template <class Real>
BasicTensor<Real> lora_apply(const BasicTensor<Real>& base, const LoraAdapter<Real>& lora) {
    const std::size_t out = base.dim(0), in = base.numel() / out;
    if (lora.b.dim(0) != out || lora.a.dim(1) != in || lora.a.dim(0) != lora.b.dim(1))
        throw ShapeError("lora_apply: adapter " + shape_str(lora.b.shape()) + " x " + shape_str(lora.a.shape()) +
                         " does not fit weight " + shape_str(base.shape()));
    return add(base, reshape(scale(matmul(lora.b, lora.a), lora.scale), base.shape()));
}

template <class Real>
void set_trainable(ParamList<Real>& params, bool on) {
    for (auto& p : params) p.tensor.set_requires_grad(on);
}

template <class Real>
class Conv2d {
   public:
    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng,
           double init_gain = 1.0)
        : stride_(stride), pad_(pad) {
        const double fan_in = static_cast<double>(in * kernel * kernel);
        weight_ = BasicTensor<Real>::randn({out, in, kernel, kernel}, rng, init_gain / std::sqrt(fan_in));
        bias_ = BasicTensor<Real>::zeros({out});
        weight_.set_requires_grad(true);
        bias_.set_requires_grad(true);
    }

    BasicTensor<Real> effective_weight() const { return lora_ ? lora_apply(weight_, *lora_) : weight_; }

    BasicTensor<Real> operator()(const BasicTensor<Real>& x) const {
        return conv2d(x, effective_weight(), bias_, stride_, pad_);
    }

    void attach_lora(std::size_t rank, double alpha, Rng& rng) {
        lora_ = LoraAdapter<Real>::create(weight_.dim(0), weight_.numel() / weight_.dim(0), rank, alpha, rng);
    }
    bool has_lora() const { return lora_.has_value(); }
    LoraAdapter<Real>* lora() { return lora_ ? &*lora_ : nullptr; }

    void collect(ParamList<Real>& out, const std::string& prefix) const {
        out.push_back({prefix + ".weight", weight_});
        out.push_back({prefix + ".bias", bias_});
    }
    void collect_lora(ParamList<Real>& out, const std::string& prefix) const {
        if (!lora_) return;
        out.push_back({prefix + ".lora_a", lora_->a});
        out.push_back({prefix + ".lora_b", lora_->b});
    }

    BasicTensor<Real>& weight() { return weight_; }
    BasicTensor<Real>& bias() { return bias_; }

   private:
    BasicTensor<Real> weight_, bias_;
    std::size_t stride_ = 1, pad_ = 0;
    std::optional<LoraAdapter<Real>> lora_;
};

/// y = x W^T + b with W [out, in]; x is [N, in].
template <class Real>
class Linear {
   public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng) {
        weight_ = BasicTensor<Real>::randn({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        bias_ = BasicTensor<Real>::zeros({out});
        weight_.set_requires_grad(true);
        bias_.set_requires_grad(true);
    }

    BasicTensor<Real> operator()(const BasicTensor<Real>& x) const {
        auto w = lora_ ? lora_apply(weight_, *lora_) : weight_;
        return add(matmul(x, transpose(w)), bias_);
    }

    void attach_lora(std::size_t rank, double alpha, Rng& rng) {
        lora_ = LoraAdapter<Real>::create(weight_.dim(0), weight_.dim(1), rank, alpha, rng);
    }

    void collect(ParamList<Real>& out, const std::string& prefix) const {
        out.push_back({prefix + ".weight", weight_});
        out.push_back({prefix + ".bias", bias_});
    }
    void collect_lora(ParamList<Real>& out, const std::string& prefix) const {
        if (!lora_) return;
        out.push_back({prefix + ".lora_a", lora_->a});
        out.push_back({prefix + ".lora_b", lora_->b});
    }

   private:
    BasicTensor<Real> weight_, bias_;
    std::optional<LoraAdapter<Real>> lora_;
};

/// Single-group normalization with per-channel affine.
template <class Real>
class GroupNorm {
   public:
    GroupNorm() = default;
    explicit GroupNorm(std::size_t channels)
        : gamma_(BasicTensor<Real>::full({channels}, Real(1))), beta_(BasicTensor<Real>::zeros({channels})) {
        gamma_.set_requires_grad(true);
        beta_.set_requires_grad(true);
    }
    BasicTensor<Real> operator()(const BasicTensor<Real>& x) const { return group_norm(x, gamma_, beta_); }
    void collect(ParamList<Real>& out, const std::string& prefix) const {
        out.push_back({prefix + ".gamma", gamma_});
        out.push_back({prefix + ".beta", beta_});
    }

   private:
    BasicTensor<Real> gamma_, beta_;
};

/// 64-dim style sinusoidal embedding of integer timesteps -> [N, dim].
template <class Real>
BasicTensor<Real> timestep_embedding(const std::vector<std::size_t>& timesteps, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<Real> out(timesteps.size() * dim, Real(0));
    for (std::size_t n = 0; n < timesteps.size(); ++n)
        for (std::size_t i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            double arg = static_cast<double>(timesteps[n]) * freq;
            out[n * dim + i] = static_cast<Real>(std::sin(arg));
            out[n * dim + half + i] = static_cast<Real>(std::cos(arg));
        }
    return BasicTensor<Real>::from_vector({timesteps.size(), dim}, std::move(out));
}

/// GN -> SiLU -> conv -> (+ time MLP) -> GN -> SiLU -> conv, plus a skip
/// (1x1 conv when the channel count changes).
template <class Real>
class ResBlock {
   public:
    ResBlock() = default;
    ResBlock(std::size_t in, std::size_t out, std::size_t temb_dim, Rng& rng)
        : norm1_(in), conv1_(in, out, 3, 1, 1, rng), norm2_(out), conv2_(out, out, 3, 1, 1, rng, 0.5), temb_dim_(temb_dim) {
        if (in != out) skip_ = Conv2d<Real>(in, out, 1, 1, 0, rng);
        if (temb_dim > 0) {
            temb1_ = Linear<Real>(temb_dim, out, rng);
            temb2_ = Linear<Real>(out, out, rng);
        }
    }

    BasicTensor<Real> operator()(const BasicTensor<Real>& x, const BasicTensor<Real>& temb = {}) const {
        auto h = conv1_(silu(norm1_(x)));
        if (temb_dim_ > 0) {
            auto e = temb2_(silu(temb1_(temb)));  // [N, out]
            h = add(h, reshape(e, {e.dim(0), e.dim(1), 1, 1}));
        }
        h = conv2_(silu(norm2_(h)));
        return add(skip_ ? (*skip_)(x) : x, h);
    }

    void collect(ParamList<Real>& out, const std::string& p) const {
        norm1_.collect(out, p + ".norm1");
        conv1_.collect(out, p + ".conv1");
        norm2_.collect(out, p + ".norm2");
        conv2_.collect(out, p + ".conv2");
        if (skip_) skip_->collect(out, p + ".skip");
        if (temb_dim_ > 0) {
            temb1_.collect(out, p + ".temb1");
            temb2_.collect(out, p + ".temb2");
        }
    }

    template <class Fn>
    void for_each_adaptable(const std::string& p, Fn&& fn) {
        visit_adaptable(*this, p, fn);
    }
    template <class Fn>
    void for_each_adaptable(const std::string& p, Fn&& fn) const {
        visit_adaptable(*this, p, fn);
    }

   private:
    template <class Self, class Fn>
    static void visit_adaptable(Self& self, const std::string& p, Fn& fn) {
        fn(p + ".conv1", self.conv1_);
        fn(p + ".conv2", self.conv2_);
        if (self.skip_) fn(p + ".skip", *self.skip_);
        if (self.temb_dim_ > 0) {
            fn(p + ".temb1", self.temb1_);
            fn(p + ".temb2", self.temb2_);
        }
    }

    GroupNorm<Real> norm1_;
    Conv2d<Real> conv1_;
    GroupNorm<Real> norm2_;
    Conv2d<Real> conv2_;
    std::optional<Conv2d<Real>> skip_;
    std::size_t temb_dim_ = 0;
    Linear<Real> temb1_, temb2_;
};

/// Single-head spatial self-attention with a residual connection.
template <class Real>
class SelfAttention {
   public:
    SelfAttention() = default;
    SelfAttention(std::size_t channels, Rng& rng)
        : norm_(channels), q_(channels, channels, 1, 1, 0, rng), k_(channels, channels, 1, 1, 0, rng),
          v_(channels, channels, 1, 1, 0, rng), proj_(channels, channels, 1, 1, 0, rng, 0.5) {}

    BasicTensor<Real> operator()(const BasicTensor<Real>& x) const {
        const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        auto h = norm_(x);
        auto q = reshape(q_(h), {n, c, hw});
        auto k = reshape(k_(h), {n, c, hw});
        auto v = reshape(v_(h), {n, c, hw});
        auto scores = scale(matmul(transpose(q), k), 1.0 / std::sqrt(static_cast<double>(c)));  // [n, hw, hw]
        auto attn = softmax(scores);
        auto mixed = matmul(v, transpose(attn));  // [n, c, hw]
        return add(x, proj_(reshape(mixed, x.shape())));
    }

    void collect(ParamList<Real>& out, const std::string& p) const {
        norm_.collect(out, p + ".norm");
        q_.collect(out, p + ".q");
        k_.collect(out, p + ".k");
        v_.collect(out, p + ".v");
        proj_.collect(out, p + ".proj");
    }

   private:
    GroupNorm<Real> norm_;
    Conv2d<Real> q_, k_, v_, proj_;
};

template <class Real>
void save_params(Checkpoint& ck, const ParamList<Real>& params) {
    for (const auto& p : params) ck.put(p.name, p.tensor);
}

template <class Real>
void load_params(const Checkpoint& ck, ParamList<Real>& params) {
    for (auto& p : params) ck.load_into(p.name, p.tensor);
}

}  // namespace oscar::nn
