#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "oscar/nn.hpp"
#include "oscar/vq.hpp"

namespace oscar {

struct VaeConfig {
    std::size_t latent_channels = 4;
    std::size_t factor = 4;  // power of two; one stride-2 stage per factor of 2
    std::size_t width = 16;
};

/// Deterministic conv autoencoder standing in for a frozen pretrained VAE.
template <class Real>
class TinyVae {
   public:
    TinyVae() = default;
    TinyVae(const VaeConfig& config, Rng& rng) : config_(config) {
        if (config.factor < 1 || (config.factor & (config.factor - 1)) != 0)
            throw RangeError("vae: spatial factor must be a power of two");
        std::size_t levels = 0;
        while ((std::size_t{1} << levels) < config.factor) ++levels;
        const std::size_t w = config.width, deep = 2 * w;
        enc_in_ = nn::Conv2d<Real>(3, w, 3, 1, 1, rng);
        for (std::size_t l = 0; l < levels; ++l) {
            std::size_t cin = l == 0 ? w : deep;
            enc_down_.emplace_back(cin, deep, 3, 2, 1, rng);
        }
        enc_res_ = nn::ResBlock<Real>(deep, deep, 0, rng);
        enc_out_ = nn::Conv2d<Real>(deep, config.latent_channels, 3, 1, 1, rng);
        dec_in_ = nn::Conv2d<Real>(config.latent_channels, deep, 3, 1, 1, rng);
        dec_res_ = nn::ResBlock<Real>(deep, deep, 0, rng);
        for (std::size_t l = 0; l < levels; ++l) {
            std::size_t cout = l + 1 == levels ? w : deep;
            dec_up_.emplace_back(deep, cout, 3, 1, 1, rng);
        }
        dec_out_ = nn::Conv2d<Real>(levels ? w : deep, 3, 3, 1, 1, rng);
    }

    const VaeConfig& config() const { return config_; }
    std::size_t factor() const { return config_.factor; }

    /// [N,3,H,W] -> [N,M,H/f,W/f]; H and W must be multiples of f.
    BasicTensor<Real> encode(const BasicTensor<Real>& image) const {
        const auto& s = image.shape();
        if (s.size() != 4 || s[1] != 3) throw ShapeError("vae_encode: expected [N,3,H,W], got " + shape_str(s));
        if (s[2] % config_.factor || s[3] % config_.factor)
            throw ShapeError("vae_encode: image " + shape_str(s) + " not divisible by factor " +
                             std::to_string(config_.factor));
        auto h = silu(enc_in_(image));
        for (const auto& d : enc_down_) h = silu(d(h));
        return enc_out_(enc_res_(h));
    }

    BasicTensor<Real> decode(const BasicTensor<Real>& latent) const {
        const auto& s = latent.shape();
        if (s.size() != 4 || s[1] != config_.latent_channels)
            throw ShapeError("vae_decode: expected [N," + std::to_string(config_.latent_channels) + ",h,w], got " +
                             shape_str(s));
        auto h = dec_res_(silu(dec_in_(latent)));
        for (const auto& u : dec_up_) h = silu(u(upsample_nearest(h, 2)));
        return dec_out_(h);
    }

    ParamList<Real> parameters() const {
        ParamList<Real> out;
        enc_in_.collect(out, "vae.enc_in");
        for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect(out, "vae.enc_down" + std::to_string(i));
        enc_res_.collect(out, "vae.enc_res");
        enc_out_.collect(out, "vae.enc_out");
        dec_in_.collect(out, "vae.dec_in");
        dec_res_.collect(out, "vae.dec_res");
        for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect(out, "vae.dec_up" + std::to_string(i));
        dec_out_.collect(out, "vae.dec_out");
        return out;
    }

    void freeze() {
        auto p = parameters();
        nn::set_trainable(p, false);
        frozen_ = true;
    }
    bool frozen() const { return frozen_; }

   private:
    VaeConfig config_;
    nn::Conv2d<Real> enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<nn::Conv2d<Real>> enc_down_, dec_up_;
    nn::ResBlock<Real> enc_res_, dec_res_;
    bool frozen_ = false;
};

struct HyperConfig {
    std::size_t width = 32;
    std::size_t latent_channels = 4;
    double ema_decay = 0.99;
    double laplace_eps = 1e-5;
};

template <class Real>
struct HyperOutputs {
    BasicTensor<Real> z_tilde;  // back-end output, latent shaped
    QuantizeResult codes;
    BasicTensor<Real> z_e;  // front-end output before quantization
    BasicTensor<Real> z_q;  // selected code vectors (constant)
};

/// Rate-specific hyper-encoder: front-end (residual blocks + stride-s
/// downsample to M code channels), VQ codebook, back-end (attention at the
/// quantized resolution, nearest upsample, residual blocks back to the latent
/// channels).
template <class Real>
class HyperEncoderNet {
   public:
    HyperEncoderNet() = default;
    HyperEncoderNet(const RateConfig& rate, const HyperConfig& config, Rng& rng)
        : rate_(rate), config_(config), codebook_(rate.codebook_size, rate.code_dim, config.ema_decay, config.laplace_eps) {
        rate.validate();
        const std::size_t w = config.width, c = config.latent_channels;
        front_in_ = nn::Conv2d<Real>(c, w, 3, 1, 1, rng);
        front_res_ = nn::ResBlock<Real>(w, w, 0, rng);
        front_down_ = nn::Conv2d<Real>(w, w, 3, rate.downsample, 1, rng);
        front_out_ = nn::Conv2d<Real>(w, rate.code_dim, 1, 1, 0, rng);
        back_in_ = nn::Conv2d<Real>(rate.code_dim, w, 3, 1, 1, rng);
        back_attn_ = nn::SelfAttention<Real>(w, rng);
        back_res1_ = nn::ResBlock<Real>(w, w, 0, rng);
        back_res2_ = nn::ResBlock<Real>(w, w, 0, rng);
        back_out_ = nn::Conv2d<Real>(w, c, 3, 1, 1, rng);
    }

    const RateConfig& rate() const { return rate_; }
    int rate_id() const { return rate_.rate_id; }
    Codebook<Real>& codebook() { return codebook_; }
    const Codebook<Real>& codebook() const { return codebook_; }

    /// Latent [N,C,h,w] -> code-space features [N,M,h/s,w/s].
    BasicTensor<Real> front(const BasicTensor<Real>& latent) const {
        const auto& s = latent.shape();
        if (s.size() != 4 || s[1] != config_.latent_channels || s[2] % rate_.downsample || s[3] % rate_.downsample)
            throw ShapeError("hyper front-end: latent " + shape_str(s) + " incompatible with downsample " +
                             std::to_string(rate_.downsample));
        auto h = front_res_(front_in_(latent));
        return front_out_(silu(front_down_(h)));
    }

    /// Code-space grid -> latent-shaped reconstruction z~.
    BasicTensor<Real> back(const BasicTensor<Real>& quantized) const {
        auto h = back_attn_(back_in_(quantized));
        h = upsample_nearest(h, rate_.downsample);
        return back_out_(back_res2_(back_res1_(h)));
    }

    /// Full pass. With quantize = false the back-end sees the unquantized
    /// features (codebook bypass baseline).
    HyperOutputs<Real> forward(const BasicTensor<Real>& latent, bool quantize = true) const {
        HyperOutputs<Real> out;
        out.z_e = front(latent);
        if (quantize) {
            auto q = quantize_grid(out.z_e, codebook_);
            out.codes = std::move(q.codes);
            out.z_q = q.z_q;
            out.z_tilde = back(q.quantized);
        } else {
            out.z_q = out.z_e.detach();
            out.z_tilde = back(out.z_e);
        }
        return out;
    }

    /// Reconstruction from transmitted indices (decoder side).
    BasicTensor<Real> decode_indices(const QuantizeResult& codes) const { return back(codebook_.lookup(codes)); }

    ParamList<Real> parameters() const {
        ParamList<Real> out;
        const std::string p = "hyper/" + std::to_string(rate_.rate_id);
        front_in_.collect(out, p + ".front_in");
        front_res_.collect(out, p + ".front_res");
        front_down_.collect(out, p + ".front_down");
        front_out_.collect(out, p + ".front_out");
        back_in_.collect(out, p + ".back_in");
        back_attn_.collect(out, p + ".back_attn");
        back_res1_.collect(out, p + ".back_res1");
        back_res2_.collect(out, p + ".back_res2");
        back_out_.collect(out, p + ".back_out");
        return out;
    }

    std::string codebook_prefix() const { return "codebook/" + std::to_string(rate_.rate_id); }

   private:
    RateConfig rate_;
    HyperConfig config_;
    Codebook<Real> codebook_;
    nn::Conv2d<Real> front_in_, front_down_, front_out_, back_in_, back_out_;
    nn::ResBlock<Real> front_res_, back_res1_, back_res2_;
    nn::SelfAttention<Real> back_attn_;
};

struct DenoiserConfig {
    std::size_t latent_channels = 4;
    std::size_t width = 32;
    std::size_t temb_dim = 64;
    bool zero_init_out = false;
};

/// Two-level U-Net predicting the noise component, conditioned on the
/// timestep through per-block MLPs over a sinusoidal embedding.
template <class Real>
class Denoiser {
   public:
    Denoiser() = default;
    Denoiser(const DenoiserConfig& config, Rng& rng) : config_(config) {
        const std::size_t w = config.width, c = config.latent_channels, e = config.temb_dim;
        conv_in_ = nn::Conv2d<Real>(c, w, 3, 1, 1, rng);
        res_hi_ = nn::ResBlock<Real>(w, w, e, rng);
        down_ = nn::Conv2d<Real>(w, 2 * w, 3, 2, 1, rng);
        res_lo_ = nn::ResBlock<Real>(2 * w, 2 * w, e, rng);
        up_ = nn::Conv2d<Real>(2 * w, w, 3, 1, 1, rng);
        res_out_ = nn::ResBlock<Real>(2 * w, w, e, rng);
        norm_out_ = nn::GroupNorm<Real>(w);
        conv_out_ = nn::Conv2d<Real>(w, c, 3, 1, 1, rng, config.zero_init_out ? 0.0 : 1.0);
    }

    const DenoiserConfig& config() const { return config_; }

    /// eps prediction for z at timestep t (shared by the batch).
    BasicTensor<Real> operator()(const BasicTensor<Real>& z, std::size_t t) const {
        return (*this)(z, std::vector<std::size_t>(z.dim(0), t));
    }

    BasicTensor<Real> operator()(const BasicTensor<Real>& z, const std::vector<std::size_t>& timesteps) const {
        const auto& s = z.shape();
        if (s.size() != 4 || s[1] != config_.latent_channels || s[2] % 2 || s[3] % 2)
            throw ShapeError("denoiser: latent " + shape_str(s) + " needs " + std::to_string(config_.latent_channels) +
                             " channels and even spatial dims");
        if (timesteps.size() != s[0]) throw ShapeError("denoiser: one timestep per batch element required");
        ++forward_calls_;
        auto temb = nn::timestep_embedding<Real>(timesteps, config_.temb_dim);
        auto h0 = res_hi_(conv_in_(z), temb);
        auto h1 = res_lo_(down_(h0), temb);
        auto up = up_(upsample_nearest(h1, 2));
        auto h2 = res_out_(concat<Real>({up, h0}, 1), temb);
        return conv_out_(silu(norm_out_(h2)));
    }

    ParamList<Real> parameters() const {
        ParamList<Real> out;
        conv_in_.collect(out, "denoiser.conv_in");
        res_hi_.collect(out, "denoiser.res_hi");
        down_.collect(out, "denoiser.down");
        res_lo_.collect(out, "denoiser.res_lo");
        up_.collect(out, "denoiser.up");
        res_out_.collect(out, "denoiser.res_out");
        norm_out_.collect(out, "denoiser.norm_out");
        conv_out_.collect(out, "denoiser.conv_out");
        return out;
    }

    /// Attaches adapters to every conv and projection weight.
    void attach_lora(std::size_t rank, double alpha, Rng& rng) {
        for_each_adaptable([&](const std::string&, auto& layer) { layer.attach_lora(rank, alpha, rng); });
        lora_rank_ = rank;
        lora_alpha_ = alpha;
    }
    std::size_t lora_rank() const { return lora_rank_; }
    double lora_alpha() const { return lora_alpha_; }

    ParamList<Real> lora_parameters() const {
        ParamList<Real> out;
        visit_adaptable(*this, [&](const std::string& name, const auto& layer) { layer.collect_lora(out, name); });
        return out;
    }

    void freeze_base() {
        auto p = parameters();
        nn::set_trainable(p, false);
    }

    std::size_t forward_calls() const { return forward_calls_; }
    void reset_forward_calls() { forward_calls_ = 0; }

   private:
    template <class Fn>
    void for_each_adaptable(Fn&& fn) {
        visit_adaptable(*this, fn);
    }

    template <class Self, class Fn>
    static void visit_adaptable(Self& self, Fn&& fn) {
        fn("denoiser.conv_in", self.conv_in_);
        self.res_hi_.for_each_adaptable("denoiser.res_hi", fn);
        fn("denoiser.down", self.down_);
        self.res_lo_.for_each_adaptable("denoiser.res_lo", fn);
        fn("denoiser.up", self.up_);
        self.res_out_.for_each_adaptable("denoiser.res_out", fn);
        fn("denoiser.conv_out", self.conv_out_);
    }

    DenoiserConfig config_;
    nn::Conv2d<Real> conv_in_, down_, up_, conv_out_;
    nn::ResBlock<Real> res_hi_, res_lo_, res_out_;
    nn::GroupNorm<Real> norm_out_;
    std::size_t lora_rank_ = 0;
    double lora_alpha_ = 0.0;
    mutable std::size_t forward_calls_ = 0;
};

struct DiscriminatorConfig {
    std::size_t latent_channels = 4;
    std::size_t width = 32;
};

/// Three strided convs on latents, spatially averaged to one logit per image.
template <class Real>
class LatentDiscriminator {
   public:
    LatentDiscriminator() = default;
    LatentDiscriminator(const DiscriminatorConfig& config, Rng& rng) {
        const std::size_t w = config.width;
        c1_ = nn::Conv2d<Real>(config.latent_channels, w, 3, 2, 1, rng);
        c2_ = nn::Conv2d<Real>(w, 2 * w, 3, 2, 1, rng);
        c3_ = nn::Conv2d<Real>(2 * w, 1, 3, 1, 1, rng);
    }

    /// [N,C,h,w] -> [N] logits.
    BasicTensor<Real> operator()(const BasicTensor<Real>& latent) const {
        auto h = c3_(silu(c2_(silu(c1_(latent)))));
        const std::size_t n = h.dim(0), hw = h.dim(2) * h.dim(3);
        return reshape(mean_dim(reshape(h, {n, hw}), 1), {n});
    }

    ParamList<Real> parameters() const {
        ParamList<Real> out;
        c1_.collect(out, "disc.c1");
        c2_.collect(out, "disc.c2");
        c3_.collect(out, "disc.c3");
        return out;
    }

   private:
    nn::Conv2d<Real> c1_, c2_, c3_;
};

}  // namespace oscar
