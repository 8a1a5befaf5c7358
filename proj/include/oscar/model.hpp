#pragma once

// The codec model bundle: frozen VAE with its latent scale, the shared
// denoiser (plus LoRA adapters once stage 2 starts), one hyper-encoder per
// rate, the latent discriminator, and the rate -> timestep calibration.
//
// On disk a model is a directory:
//   manifest.txt     architecture and rate list ("key = value")
//   weights.oscw     every tensor in the checkpoint chunk format
//   calibration.txt  rate -> timestep map

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "oscar/config.hpp"
#include "oscar/diffusion.hpp"
#include "oscar/networks.hpp"

namespace oscar {

struct ModelConfig {
    VaeConfig vae{.latent_channels = 4, .factor = 4, .width = 16};
    HyperConfig hyper{.width = 32};
    DenoiserConfig denoiser{.width = 32, .temb_dim = 64};
    DiscriminatorConfig disc{.width = 16};
    std::size_t lora_rank = 4;
    double lora_alpha = 4.0;
    std::size_t diffusion_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    void validate() const {
        if (hyper.latent_channels != vae.latent_channels || denoiser.latent_channels != vae.latent_channels ||
            disc.latent_channels != vae.latent_channels)
            throw RangeError("model: all networks must agree on the latent channel count");
        if (lora_rank == 0) throw RangeError("model: lora rank must be >= 1");
    }
};

class OscarModel {
   public:
    static constexpr const char* kFormat = "oscar-model 1";

    OscarModel() = default;
    OscarModel(const ModelConfig& config, Rng& rng)
        : config_(config),
          vae_(config.vae, rng),
          denoiser_(config.denoiser, rng),
          disc_(config.disc, rng),
          calibration_(NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)) {
        config.validate();
    }

    // Tensors are shared handles, so an implicit copy would alias weights.
    // Use clone() for an independent model.
    OscarModel(const OscarModel&) = delete;
    OscarModel& operator=(const OscarModel&) = delete;
    OscarModel(OscarModel&&) noexcept = default;
    OscarModel& operator=(OscarModel&&) noexcept = default;

    const ModelConfig& config() const { return config_; }

    TinyVae<float>& vae() { return vae_; }
    const TinyVae<float>& vae() const { return vae_; }
    Denoiser<float>& denoiser() { return denoiser_; }
    const Denoiser<float>& denoiser() const { return denoiser_; }
    LatentDiscriminator<float>& discriminator() { return disc_; }
    const LatentDiscriminator<float>& discriminator() const { return disc_; }

    RateTimestepMap& calibration() { return calibration_; }
    const RateTimestepMap& calibration() const { return calibration_; }
    const NoiseSchedule& schedule() const { return calibration_.schedule(); }

    /// Latent normalization: z = (encode(x) - shift_c) * scale, so cached
    /// latents are zero-mean per channel with unit pooled variance.
    double latent_scale() const { return latent_scale_; }
    const std::vector<float>& latent_shift() const { return latent_shift_; }
    void set_latent_scale(double s) {
        if (!(s > 0.0) || !std::isfinite(s)) throw NumericError("latent scale must be positive and finite");
        latent_scale_ = static_cast<float>(s);  // stored as f32 in the checkpoint
    }
    void set_latent_shift(std::vector<float> shift) {
        if (shift.size() != config_.vae.latent_channels)
            throw ShapeError("latent shift needs one value per latent channel");
        for (float v : shift)
            if (!std::isfinite(v)) throw NumericError("latent shift must be finite");
        latent_shift_ = std::move(shift);
    }

    /// Training progress marker: init, vae, denoiser, stage1, calibrated, stage2.
    const std::string& stage() const { return stage_; }
    void set_stage(std::string s) { stage_ = std::move(s); }

    std::vector<RateConfig> rates() const {
        std::vector<RateConfig> out;
        for (const auto& [id, h] : hypers_) out.push_back(h.rate());
        return out;
    }
    bool has_rate(int rate_id) const { return hypers_.count(rate_id) > 0; }

    HyperEncoderNet<float>& hyper(int rate_id) { return hypers_.at(checked(rate_id)); }
    const HyperEncoderNet<float>& hyper(int rate_id) const { return hypers_.at(checked(rate_id)); }

    HyperEncoderNet<float>& add_rate(RateConfig rate, Rng& rng) {
        rate.latent_factor = config_.vae.factor;
        rate.validate();
        if (has_rate(rate.rate_id)) throw RangeError("rate id " + std::to_string(rate.rate_id) + " already exists");
        return hypers_.emplace(rate.rate_id, HyperEncoderNet<float>(rate, config_.hyper, rng)).first->second;
    }

    /// Image [N,3,H,W] -> scaled latent.
    Tensor encode_latent(const Tensor& image) const { return scale(sub(vae_.encode(image), shift_tensor()), latent_scale_); }
    Tensor decode_latent(const Tensor& latent) const {
        return vae_.decode(add(scale(latent, 1.0 / latent_scale_), shift_tensor()));
    }

    /// One-step estimate of the clean latent from z~ at the rate's timestep.
    /// Odd latent grids (inference only) are edge-padded to even for the
    /// U-Net and the prediction is cropped back.
    Tensor denoise(const Tensor& z_tilde, int rate_id) const {
        const std::size_t t = calibration_.timestep(rate_id);
        if (z_tilde.rank() == 4 && (z_tilde.dim(2) % 2 || z_tilde.dim(3) % 2)) {
            if (grad_enabled()) throw ShapeError("denoise: odd latent grids are only supported without gradients");
            auto eps = crop_even(denoiser_(pad_even(z_tilde), t), z_tilde.dim(2), z_tilde.dim(3));
            return one_step_denoise(z_tilde, t, eps, schedule());
        }
        return one_step_denoise(z_tilde, t, denoiser_(z_tilde, t), schedule());
    }

    void attach_lora(Rng& rng) {
        if (denoiser_.lora_rank() == 0) denoiser_.attach_lora(config_.lora_rank, config_.lora_alpha, rng);
    }
    bool has_lora() const { return denoiser_.lora_rank() > 0; }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        nn::save_params(ck, vae_.parameters());
        ck.put("vae/latent_scale", Shape{1}, {static_cast<float>(latent_scale_)});
        ck.put("vae/latent_shift", Shape{latent_shift_.size()}, latent_shift_);
        nn::save_params(ck, denoiser_.parameters());
        nn::save_params(ck, denoiser_.lora_parameters());
        nn::save_params(ck, disc_.parameters());
        for (const auto& [id, h] : hypers_) {
            nn::save_params(ck, h.parameters());
            h.codebook().save(ck, h.codebook_prefix());
        }
        return ck;
    }

    void load_checkpoint(const Checkpoint& ck) {
        auto load = [&](ParamList<float> p) { nn::load_params(ck, p); };
        load(vae_.parameters());
        latent_scale_ = ck.at("vae/latent_scale").values.at(0);
        set_latent_shift(ck.at("vae/latent_shift").values);
        load(denoiser_.parameters());
        load(denoiser_.lora_parameters());
        load(disc_.parameters());
        for (auto& [id, h] : hypers_) {
            load(h.parameters());
            h.codebook().load(ck, h.codebook_prefix());
        }
    }

    /// FNV-1a over the serialized weights followed by the calibration text,
    /// so a bitstream only decodes against the exact model that produced it.
    std::uint64_t fingerprint() const {
        auto bytes = to_checkpoint().serialize();
        auto text = calibration_.to_text();
        bytes.insert(bytes.end(), text.begin(), text.end());
        return fingerprint_bytes(bytes);
    }

    std::string manifest() const {
        const auto& c = config_;
        std::string out;
        auto line = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
        auto num = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        line("format", kFormat);
        line("stage", stage_);
        line("latent_channels", std::to_string(c.vae.latent_channels));
        line("factor", std::to_string(c.vae.factor));
        line("vae_width", std::to_string(c.vae.width));
        line("hyper_width", std::to_string(c.hyper.width));
        line("ema_decay", num(c.hyper.ema_decay));
        line("laplace_eps", num(c.hyper.laplace_eps));
        line("denoiser_width", std::to_string(c.denoiser.width));
        line("temb_dim", std::to_string(c.denoiser.temb_dim));
        line("disc_width", std::to_string(c.disc.width));
        line("lora_rank", std::to_string(c.lora_rank));
        line("lora_alpha", num(c.lora_alpha));
        line("lora_attached", has_lora() ? "true" : "false");
        line("diffusion_steps", std::to_string(c.diffusion_steps));
        line("beta_start", num(c.beta_start));
        line("beta_end", num(c.beta_end));
        for (const auto& r : rates())
            line("rate", std::to_string(r.rate_id) + ", " + std::to_string(r.downsample) + ", " +
                             std::to_string(r.codebook_size) + ", " + std::to_string(r.code_dim));
        return out;
    }

    /// Rebuilds the architecture a manifest describes, with placeholder weights.
    static OscarModel from_manifest(const KeyValues& kv) {
        if (kv.get("format") != kFormat) throw FormatError("model manifest: unsupported format '" + kv.get("format") + "'");
        ModelConfig c;
        c.vae.latent_channels = kv.as<std::size_t>("latent_channels");
        c.hyper.latent_channels = c.denoiser.latent_channels = c.disc.latent_channels = c.vae.latent_channels;
        c.vae.factor = kv.as<std::size_t>("factor");
        c.vae.width = kv.as<std::size_t>("vae_width");
        c.hyper.width = kv.as<std::size_t>("hyper_width");
        c.hyper.ema_decay = kv.as<double>("ema_decay");
        c.hyper.laplace_eps = kv.as<double>("laplace_eps");
        c.denoiser.width = kv.as<std::size_t>("denoiser_width");
        c.denoiser.temb_dim = kv.as<std::size_t>("temb_dim");
        c.disc.width = kv.as<std::size_t>("disc_width");
        c.lora_rank = kv.as<std::size_t>("lora_rank");
        c.lora_alpha = kv.as<double>("lora_alpha");
        c.diffusion_steps = kv.as<std::size_t>("diffusion_steps");
        c.beta_start = kv.as<double>("beta_start");
        c.beta_end = kv.as<double>("beta_end");
        Rng rng(0);
        OscarModel m(c, rng);
        m.stage_ = kv.get("stage");
        if (kv.as<bool>("lora_attached")) m.attach_lora(rng);
        for (const auto& spec : kv.get_all("rate")) {
            auto f = KeyValues::split(spec, ',');
            if (f.size() != 4) throw FormatError("model manifest: rate needs 'id, s, V, M', got '" + spec + "'");
            RateConfig r;
            r.rate_id = kv.convert<int>("rate", f[0]);
            r.downsample = kv.convert<std::size_t>("rate", f[1]);
            r.codebook_size = kv.convert<std::size_t>("rate", f[2]);
            r.code_dim = kv.convert<std::size_t>("rate", f[3]);
            m.add_rate(r, rng);
        }
        return m;
    }

    /// Independent copy: no tensor storage is shared with this model.
    OscarModel clone() const {
        auto m = from_manifest(KeyValues::parse(manifest(), "manifest"));
        m.load_checkpoint(to_checkpoint());
        m.calibration_ = calibration_;
        if (vae_.frozen()) m.vae_.freeze();
        return m;
    }

    void save(const std::string& dir) const {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (!fs::is_directory(dir)) throw IoError("cannot create model directory '" + dir + "'");
        to_checkpoint().save((fs::path(dir) / "weights.oscw").string());
        calibration_.save((fs::path(dir) / "calibration.txt").string());
        std::ofstream out(fs::path(dir) / "manifest.txt", std::ios::trunc);
        if (!out) throw IoError("cannot write manifest in '" + dir + "'");
        out << manifest();
    }

    static OscarModel load(const std::string& dir) {
        namespace fs = std::filesystem;
        if (!fs::is_directory(dir)) throw IoError("model directory '" + dir + "' does not exist");
        auto m = from_manifest(KeyValues::load((fs::path(dir) / "manifest.txt").string()));
        m.load_checkpoint(Checkpoint::load((fs::path(dir) / "weights.oscw").string()));
        m.calibration_ = RateTimestepMap::load((fs::path(dir) / "calibration.txt").string(), m.config_.vae.factor);
        if (m.stage_ != "init") m.vae_.freeze();
        return m;
    }

   private:
    static Tensor pad_even(const Tensor& z) {
        const std::size_t planes = z.dim(0) * z.dim(1), h = z.dim(2), w = z.dim(3), H = h + h % 2, W = w + w % 2;
        std::vector<float> out(planes * H * W);
        auto src = z.data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    out[(p * H + y) * W + x] = src[(p * h + std::min(y, h - 1)) * w + std::min(x, w - 1)];
        return Tensor::from_vector({z.dim(0), z.dim(1), H, W}, std::move(out));
    }

    static Tensor crop_even(const Tensor& z, std::size_t h, std::size_t w) {
        const std::size_t planes = z.dim(0) * z.dim(1), H = z.dim(2), W = z.dim(3);
        std::vector<float> out(planes * h * w);
        auto src = z.data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) out[(p * h + y) * w + x] = src[(p * H + y) * W + x];
        return Tensor::from_vector({z.dim(0), z.dim(1), h, w}, std::move(out));
    }

    Tensor shift_tensor() const { return Tensor::from_vector({1, latent_shift_.size(), 1, 1}, latent_shift_); }

    int checked(int rate_id) const {
        if (!has_rate(rate_id)) throw RangeError("model has no rate " + std::to_string(rate_id));
        return rate_id;
    }

    ModelConfig config_;
    TinyVae<float> vae_;
    double latent_scale_ = 1.0;
    std::vector<float> latent_shift_ = std::vector<float>(config_.vae.latent_channels, 0.0f);
    Denoiser<float> denoiser_;
    LatentDiscriminator<float> disc_;
    std::map<int, HyperEncoderNet<float>> hypers_;
    RateTimestepMap calibration_;
    std::string stage_ = "init";
};

}  // namespace oscar
