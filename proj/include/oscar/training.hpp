#pragma once

// Training stages, in order: VAE reconstruction pretrain, denoiser noise
// pretrain, stage 1 (all hyper-encoders aligned in parallel), calibration of
// the rate -> timestep map, stage 2 (joint fine-tuning of hyper-encoders and
// denoiser adapters with a latent discriminator), and unseen-rate adaptation.
//
// The VAE is frozen after its pretrain, so every later stage runs on a latent
// cache computed once per image set.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oscar/config.hpp"
#include "oscar/image.hpp"
#include "oscar/losses.hpp"
#include "oscar/model.hpp"
#include "oscar/optim.hpp"

namespace oscar {

struct TrainConfig {
    std::uint64_t seed = 0;
    std::string corpus = "synthetic";  // or a folder of PPM files
    std::size_t corpus_size = 500;
    std::size_t heldout_size = 256;
    std::size_t patch_size = 32;
    std::vector<RateConfig> rates = {{.rate_id = 0, .downsample = 1, .codebook_size = 256},
                                     {.rate_id = 1, .downsample = 2, .codebook_size = 256},
                                     {.rate_id = 2, .downsample = 2, .codebook_size = 16}};
    std::size_t batch_size = 16;

    std::size_t vae_iters = 1500;
    double vae_lr = 2e-3;
    std::size_t denoiser_iters = 3000;
    std::size_t denoiser_batch = 32;
    double denoiser_lr = 1e-3;

    std::size_t stage1_iters = 2000;
    double stage1_lr = 1e-3;

    std::size_t stage2_iters = 5000;
    double stage2_lr = 2e-4;
    double stage2_weight_decay = 1e-5;
    LossWeights weights;

    std::size_t adapt_iters = 1000;
    double adapt_mix = 0.5;
    double adapt_warmup_fraction = 0.1;

    std::size_t checkpoint_every = 500;
    ModelConfig model;

    void validate() const {
        if (rates.empty()) throw RangeError("train config: rate set is empty");
        for (std::size_t i = 0; i < rates.size(); ++i) {
            rates[i].validate();
            for (std::size_t j = 0; j < i; ++j)
                if (rates[i].rate_id == rates[j].rate_id)
                    throw RangeError("train config: duplicate rate id " + std::to_string(rates[i].rate_id));
        }
        if (batch_size == 0 || denoiser_batch == 0) throw RangeError("train config: batch size must be positive");
        if (patch_size == 0 || patch_size % (2 * model.vae.factor))
            throw RangeError("train config: patch size must give an even latent grid (multiple of 2 x VAE factor)");
        for (const auto& r : rates)
            if ((patch_size / model.vae.factor) % r.downsample)
                throw RangeError("train config: latent grid not divisible by downsample of rate " + std::to_string(r.rate_id));
        if (!(adapt_mix >= 0.0 && adapt_mix <= 1.0)) throw RangeError("train config: adapt_mix must lie in [0, 1]");
        if (checkpoint_every == 0) throw RangeError("train config: checkpoint_every must be positive");
        weights.validate();
        model.validate();
    }

    static std::string rates_text(const std::vector<RateConfig>& rates) {
        std::string out;
        for (const auto& r : rates) {
            if (!out.empty()) out += ", ";
            out += std::to_string(r.rate_id) + ":" + std::to_string(r.downsample) + ":" + std::to_string(r.codebook_size) +
                   ":" + std::to_string(r.code_dim);
        }
        return out;
    }

    /// "id:s:V[:M]" items separated by commas.
    static std::vector<RateConfig> parse_rates(const std::string& text) {
        std::vector<RateConfig> out;
        KeyValues conv;
        for (const auto& item : KeyValues::split(text, ',')) {
            auto f = KeyValues::split(item, ':');
            if (f.size() != 3 && f.size() != 4) throw FormatError("rates: expected id:s:V[:M], got '" + item + "'");
            RateConfig r;
            r.rate_id = conv.convert<int>("rates", f[0]);
            r.downsample = conv.convert<std::size_t>("rates", f[1]);
            r.codebook_size = conv.convert<std::size_t>("rates", f[2]);
            if (f.size() == 4) r.code_dim = conv.convert<std::size_t>("rates", f[3]);
            out.push_back(r);
        }
        return out;
    }

    static TrainConfig from_key_values(const KeyValues& kv) {
        static const std::vector<std::string> known = {
            "seed", "corpus", "corpus_size", "heldout_size", "patch_size", "rates", "batch_size", "vae_iters",
            "vae_lr", "denoiser_iters", "denoiser_batch", "denoiser_lr", "stage1_iters", "stage1_lr", "stage2_iters",
            "stage2_lr", "stage2_weight_decay", "lambda_perceptual", "lambda_adversarial", "adapt_iters", "adapt_mix",
            "adapt_warmup_fraction", "checkpoint_every", "vae_width", "hyper_width", "denoiser_width", "temb_dim",
            "disc_width", "lora_rank", "lora_alpha", "ema_decay"};
        if (auto unknown = kv.unknown_keys(known); !unknown.empty())
            throw FormatError("train config: unknown key '" + unknown.front() + "'");
        TrainConfig c;
        c.seed = kv.as<std::uint64_t>("seed", c.seed);
        c.corpus = kv.as<std::string>("corpus", c.corpus);
        c.corpus_size = kv.as<std::size_t>("corpus_size", c.corpus_size);
        c.heldout_size = kv.as<std::size_t>("heldout_size", c.heldout_size);
        c.patch_size = kv.as<std::size_t>("patch_size", c.patch_size);
        if (kv.contains("rates")) c.rates = parse_rates(kv.get("rates"));
        c.batch_size = kv.as<std::size_t>("batch_size", c.batch_size);
        c.vae_iters = kv.as<std::size_t>("vae_iters", c.vae_iters);
        c.vae_lr = kv.as<double>("vae_lr", c.vae_lr);
        c.denoiser_iters = kv.as<std::size_t>("denoiser_iters", c.denoiser_iters);
        c.denoiser_batch = kv.as<std::size_t>("denoiser_batch", c.denoiser_batch);
        c.denoiser_lr = kv.as<double>("denoiser_lr", c.denoiser_lr);
        c.stage1_iters = kv.as<std::size_t>("stage1_iters", c.stage1_iters);
        c.stage1_lr = kv.as<double>("stage1_lr", c.stage1_lr);
        c.stage2_iters = kv.as<std::size_t>("stage2_iters", c.stage2_iters);
        c.stage2_lr = kv.as<double>("stage2_lr", c.stage2_lr);
        c.stage2_weight_decay = kv.as<double>("stage2_weight_decay", c.stage2_weight_decay);
        c.weights.perceptual = kv.as<double>("lambda_perceptual", c.weights.perceptual);
        c.weights.adversarial = kv.as<double>("lambda_adversarial", c.weights.adversarial);
        c.adapt_iters = kv.as<std::size_t>("adapt_iters", c.adapt_iters);
        c.adapt_mix = kv.as<double>("adapt_mix", c.adapt_mix);
        c.adapt_warmup_fraction = kv.as<double>("adapt_warmup_fraction", c.adapt_warmup_fraction);
        c.checkpoint_every = kv.as<std::size_t>("checkpoint_every", c.checkpoint_every);
        c.model.vae.width = kv.as<std::size_t>("vae_width", c.model.vae.width);
        c.model.hyper.width = kv.as<std::size_t>("hyper_width", c.model.hyper.width);
        c.model.hyper.ema_decay = kv.as<double>("ema_decay", c.model.hyper.ema_decay);
        c.model.denoiser.width = kv.as<std::size_t>("denoiser_width", c.model.denoiser.width);
        c.model.denoiser.temb_dim = kv.as<std::size_t>("temb_dim", c.model.denoiser.temb_dim);
        c.model.disc.width = kv.as<std::size_t>("disc_width", c.model.disc.width);
        c.model.lora_rank = kv.as<std::size_t>("lora_rank", c.model.lora_rank);
        c.model.lora_alpha = kv.as<double>("lora_alpha", c.model.lora_alpha);
        c.validate();
        return c;
    }

    static TrainConfig load(const std::string& path) { return from_key_values(KeyValues::load(path)); }
};

/// One row per (iteration, rate) of a training stage.
struct TrainRow {
    std::string stage;
    std::size_t iteration = 0;
    int rate_id = -1;  // -1 for rate-independent stages
    double cosine = 0.0, commitment = 0.0, perceptual = 0.0, generator = 0.0, discriminator = 0.0, total = 0.0;
    double f_sim = 0.0;  // running estimate for the rate
};

struct CalibrationSnapshot {
    std::string stage;
    std::size_t iteration = 0;
    std::string text;
};

class TrainReport {
   public:
    static constexpr const char* kCsvHeader =
        "stage,iteration,rate_id,loss_cosine,loss_commitment,loss_perceptual,loss_gan_g,loss_gan_d,loss_total,f_sim";

    /// Rows of one stage must have non-decreasing iteration indices.
    void add(TrainRow row) {
        for (auto it = rows_.rbegin(); it != rows_.rend(); ++it)
            if (it->stage == row.stage) {
                if (row.iteration < it->iteration) throw RangeError("train report: iteration went backwards");
                break;
            }
        rows_.push_back(std::move(row));
    }
    void snapshot(CalibrationSnapshot s) { snapshots_.push_back(std::move(s)); }

    const std::vector<TrainRow>& rows() const { return rows_; }
    const std::vector<CalibrationSnapshot>& snapshots() const { return snapshots_; }

    std::vector<TrainRow> rows_for(const std::string& stage, int rate_id) const {
        std::vector<TrainRow> out;
        for (const auto& r : rows_)
            if (r.stage == stage && r.rate_id == rate_id) out.push_back(r);
        return out;
    }

    /// max - min of the running F_sim over the final `fraction` of a stage.
    double stability_band(const std::string& stage, int rate_id, double fraction = 0.2) const {
        auto rows = rows_for(stage, rate_id);
        if (rows.empty()) throw RangeError("train report: no rows for stage '" + stage + "'");
        std::size_t start = rows.size() - std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * rows.size())));
        double lo = rows[start].f_sim, hi = lo;
        for (std::size_t i = start; i < rows.size(); ++i) lo = std::min(lo, rows[i].f_sim), hi = std::max(hi, rows[i].f_sim);
        return hi - lo;
    }

    std::string to_csv() const {
        std::string out = std::string(kCsvHeader) + "\n";
        char buf[320];
        for (const auto& r : rows_) {
            std::snprintf(buf, sizeof buf, "%s,%zu,%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n", r.stage.c_str(), r.iteration,
                          r.rate_id, r.cosine, r.commitment, r.perceptual, r.generator, r.discriminator, r.total, r.f_sim);
            out += buf;
        }
        return out;
    }

    void save_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write report '" + path + "'");
        out << to_csv();
    }

   private:
    std::vector<TrainRow> rows_;
    std::vector<CalibrationSnapshot> snapshots_;
};

/// Training and held-out image sets plus their latent caches.
struct TrainingData {
    std::vector<Image> train, heldout;
    Tensor train_images, heldout_images;    // [N,3,P,P]
    Tensor train_latents, heldout_latents;  // [N,C,P/f,P/f], empty until the VAE is trained

    static constexpr std::uint64_t kHeldoutStream = 1ULL << 32;

    static TrainingData from_config(const TrainConfig& cfg) {
        TrainingData d;
        if (cfg.corpus == "synthetic") {
            d.train = synthetic_corpus(cfg.corpus_size, cfg.patch_size, cfg.seed);
            d.heldout = synthetic_corpus(cfg.heldout_size, cfg.patch_size, cfg.seed, kHeldoutStream);
        } else {
            Rng rng(cfg.seed, 7);
            auto all = folder_corpus(cfg.corpus, cfg.corpus_size + cfg.heldout_size, cfg.patch_size, rng).patches;
            d.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.corpus_size));
            d.heldout.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.corpus_size), all.end());
        }
        if (d.train.empty()) throw RangeError("training corpus is empty");
        d.train_images = to_tensor(d.train);
        if (!d.heldout.empty()) d.heldout_images = to_tensor(d.heldout);
        return d;
    }

    void encode(const OscarModel& model) {
        train_latents = encode_all(model, train_images);
        if (!heldout.empty()) heldout_latents = encode_all(model, heldout_images);
    }

    static Tensor encode_all(const OscarModel& model, const Tensor& images, std::size_t chunk = 64) {
        NoGradGuard no_grad;
        std::vector<Tensor> parts;
        for (std::size_t i = 0; i < images.dim(0); i += chunk)
            parts.push_back(model.encode_latent(slice_rows(images, i, std::min(images.dim(0), i + chunk))));
        return parts.size() == 1 ? parts[0] : concat<float>(parts, 0);
    }

    /// Rows [begin, end) of the leading axis as a new constant tensor.
    static Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
        const std::size_t row = t.numel() / t.dim(0);
        auto src = t.data().subspan(begin * row, (end - begin) * row);
        Shape s = t.shape();
        s[0] = end - begin;
        return Tensor::from_vector(s, std::vector<float>(src.begin(), src.end()));
    }

    static Tensor gather(const Tensor& t, const std::vector<std::size_t>& rows) {
        const std::size_t row = t.numel() / t.dim(0);
        std::vector<float> out;
        out.reserve(rows.size() * row);
        auto src = t.data();
        for (auto r : rows) out.insert(out.end(), src.begin() + r * row, src.begin() + (r + 1) * row);
        Shape s = t.shape();
        s[0] = rows.size();
        return Tensor::from_vector(s, std::move(out));
    }

    /// Per-image latents as single-element batches, for measurement helpers.
    static std::vector<Tensor> batches(const Tensor& t, std::size_t chunk = 32) {
        std::vector<Tensor> out;
        for (std::size_t i = 0; i < t.dim(0); i += chunk) out.push_back(slice_rows(t, i, std::min(t.dim(0), i + chunk)));
        return out;
    }
};

/// Epoch-shuffled minibatch indices; order depends only on the rng.
class BatchSampler {
   public:
    BatchSampler(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(std::min(batch, n)), rng_(rng) {
        if (n == 0) throw RangeError("batch sampler: empty data set");
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        out.reserve(batch_);
        while (out.size() < batch_) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

   private:
    void reshuffle() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
        pos_ = 0;
    }

    std::size_t n_, batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

namespace detail {

inline void require_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericError(what);
}

/// Keeps the last finite model state and restores it on divergence.
class DivergenceGuard {
   public:
    DivergenceGuard(OscarModel& model, std::string stage, std::size_t every)
        : model_(model), stage_(std::move(stage)), every_(every), good_(model.to_checkpoint()) {}

    void maybe_snapshot(std::size_t iteration) {
        if ((iteration + 1) % every_ == 0) {
            good_ = model_.to_checkpoint();
            good_iteration_ = iteration + 1;
        }
    }

    [[noreturn]] void abort(std::size_t iteration, const std::string& what) {
        model_.load_checkpoint(good_);
        throw NumericError(stage_ + " diverged at iteration " + std::to_string(iteration) + " (" + what +
                           "); model restored to iteration " + std::to_string(good_iteration_));
    }

   private:
    OscarModel& model_;
    std::string stage_;
    std::size_t every_;
    Checkpoint good_;
    std::size_t good_iteration_ = 0;
};

inline Rng stage_rng(const TrainConfig& cfg, std::uint64_t stage) { return Rng(cfg.seed, 0x5EED0000 + stage); }

}  // namespace detail

/// Reconstruction-only VAE training; freezes the VAE and sets the latent
/// shift and scale so cached latents are zero-mean per channel with unit
/// pooled variance.
inline void pretrain_vae(OscarModel& model, TrainingData& data, const TrainConfig& cfg, TrainReport& report) {
    if (data.train.empty()) throw RangeError("pretrain_vae: empty corpus");
    if (model.vae().frozen()) throw RangeError("pretrain_vae: VAE is already frozen");
    auto params = model.vae().parameters();
    Optimizer<float> opt({.lr = cfg.vae_lr, .kind = OptimizerKind::kAdam});
    BatchSampler sampler(data.train.size(), cfg.batch_size, detail::stage_rng(cfg, 1));
    detail::DivergenceGuard guard(model, "vae pretrain", cfg.checkpoint_every);
    for (std::size_t it = 0; it < cfg.vae_iters; ++it) {
        auto x = TrainingData::gather(data.train_images, sampler.next());
        auto loss = mse(model.vae().decode(model.vae().encode(x)), x);
        double v = loss.item();
        if (!std::isfinite(v)) guard.abort(it, "non-finite reconstruction loss");
        zero_grads(params);
        backward(loss);
        opt.step(params);
        report.add({.stage = "vae", .iteration = it, .total = v});
        guard.maybe_snapshot(it);
    }
    model.vae().freeze();
    const std::size_t channels = model.config().vae.latent_channels;
    model.set_latent_scale(1.0);
    model.set_latent_shift(std::vector<float>(channels, 0.0f));
    auto raw = TrainingData::encode_all(model, data.train_images);
    const std::size_t plane = raw.dim(2) * raw.dim(3);
    std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
    for (std::size_t i = 0; i < raw.numel(); ++i) {
        const std::size_t c = (i / plane) % channels;
        sum[c] += raw[i];
        sq[c] += double(raw[i]) * raw[i];
    }
    const double per_channel = static_cast<double>(raw.numel() / channels);
    std::vector<float> shift(channels);
    double var = 0.0;  // pooled within-channel variance
    for (std::size_t c = 0; c < channels; ++c) {
        const double m = sum[c] / per_channel;
        shift[c] = static_cast<float>(m);
        var += (sq[c] / per_channel - m * m) / static_cast<double>(channels);
    }
    if (!(var > 0.0)) throw NumericError("pretrain_vae: latents have zero variance");
    model.set_latent_shift(std::move(shift));
    model.set_latent_scale(1.0 / std::sqrt(var));
    model.set_stage("vae");
    data.encode(model);
}

/// Standard noise-prediction training of the denoiser on cached latents, with
/// timesteps drawn uniformly from [1, T] per element.
inline void pretrain_denoiser(OscarModel& model, const TrainingData& data, const TrainConfig& cfg, TrainReport& report) {
    if (data.train_latents.numel() == 0) throw RangeError("pretrain_denoiser: latents not encoded (train the VAE first)");
    auto params = model.denoiser().parameters();
    Optimizer<float> opt({.lr = cfg.denoiser_lr, .kind = OptimizerKind::kAdam});
    Rng rng = detail::stage_rng(cfg, 2);
    BatchSampler sampler(data.train_latents.dim(0), cfg.denoiser_batch, rng.fork(1));
    detail::DivergenceGuard guard(model, "denoiser pretrain", cfg.checkpoint_every);
    const auto& sched = model.schedule();
    for (std::size_t it = 0; it < cfg.denoiser_iters; ++it) {
        auto z0 = TrainingData::gather(data.train_latents, sampler.next());
        const std::size_t n = z0.dim(0), per = z0.numel() / n;
        std::vector<std::size_t> ts(n);
        std::vector<float> eps(z0.numel()), zt(z0.numel());
        auto src = z0.data();
        for (std::size_t i = 0; i < n; ++i) {
            ts[i] = 1 + rng.below(sched.steps());
            const double a = sched.alpha_bar(ts[i]), sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
            for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
                eps[j] = static_cast<float>(rng.normal());
                zt[j] = static_cast<float>(sa * src[j] + sn * eps[j]);
            }
        }
        auto target = Tensor::from_vector(z0.shape(), std::move(eps));
        auto loss = mse(model.denoiser()(Tensor::from_vector(z0.shape(), std::move(zt)), ts), target);
        double v = loss.item();
        if (!std::isfinite(v)) guard.abort(it, "non-finite noise loss");
        zero_grads(params);
        backward(loss);
        opt.step(params);
        report.add({.stage = "denoiser", .iteration = it, .total = v});
        guard.maybe_snapshot(it);
    }
    model.set_stage("denoiser");
}

struct Stage1Result {
    std::map<int, double> f_sim;           // final running estimate per rate
    std::map<int, double> stability_band;  // over the final 20% of iterations
};

namespace detail {

/// Stage-1 loop over the given rates. Codebooks of `fresh` rates are seeded
/// by k-means++ from the first batch's front-end outputs.
inline Stage1Result run_stage1(OscarModel& model, const Tensor& latents, const std::vector<int>& rate_ids,
                               const std::vector<int>& fresh, std::size_t iters, const TrainConfig& cfg, Rng rng,
                               TrainReport& report, const std::string& stage) {
    if (!model.vae().frozen()) throw RangeError(stage + ": requires a frozen VAE");
    if (latents.numel() == 0) throw RangeError(stage + ": empty latent set");
    BatchSampler sampler(latents.dim(0), cfg.batch_size, rng.fork(1));
    Rng revive = rng.fork(2), seed = rng.fork(3);
    std::map<int, Optimizer<float>> opts;
    std::map<int, ParamList<float>> params;
    for (int id : rate_ids) {
        opts.emplace(id, Optimizer<float>({.lr = cfg.stage1_lr, .kind = OptimizerKind::kAdam}));
        params[id] = model.hyper(id).parameters();
    }
    DivergenceGuard guard(model, stage, cfg.checkpoint_every);
    std::map<int, double> running;
    for (std::size_t it = 0; it < iters; ++it) {
        auto z = TrainingData::gather(latents, sampler.next());
        for (int id : rate_ids) {
            auto& h = model.hyper(id);
            if (it == 0 && std::find(fresh.begin(), fresh.end(), id) != fresh.end()) {
                NoGradGuard no_grad;
                h.codebook().init_kmeanspp(site_vectors(h.front(z)), seed);
            }
            auto out = h.forward(z);
            auto cos = cosine_alignment_loss(z, out.z_tilde);
            auto com = commitment_loss(out.z_e, out.z_q);
            auto loss = add(cos, com);
            const double lc = cos.item(), lm = com.item();
            if (!std::isfinite(lc) || !std::isfinite(lm)) guard.abort(it, "rate " + std::to_string(id) + " loss is not finite");
            zero_grads(params[id]);
            backward(loss);
            opts.at(id).step(params[id]);
            h.codebook().ema_update(site_vectors(out.z_e.detach()), out.codes.indices, &revive);
            double f = -lc;
            running[id] = it == 0 ? f : 0.99 * running[id] + 0.01 * f;
            report.add({.stage = stage, .iteration = it, .rate_id = id, .cosine = lc, .commitment = lm,
                        .total = lc + lm, .f_sim = running[id]});
        }
        guard.maybe_snapshot(it);
    }
    Stage1Result res;
    for (int id : rate_ids) {
        res.f_sim[id] = running.count(id) ? running[id] : 0.0;
        if (iters > 0) res.stability_band[id] = report.stability_band(stage, id);
    }
    return res;
}

}  // namespace detail

/// Stage 1: every configured rate's hyper-encoder minimizes its alignment
/// loss in parallel; codebooks follow EMA updates. Adds missing rates.
inline Stage1Result train_stage1(OscarModel& model, const TrainingData& data, const TrainConfig& cfg, TrainReport& report) {
    cfg.validate();
    Rng rng = detail::stage_rng(cfg, 3);
    Rng init = rng.fork(10);
    std::vector<int> ids, fresh;
    for (const auto& r : cfg.rates) {
        if (!model.has_rate(r.rate_id)) {
            model.add_rate(r, init);
            fresh.push_back(r.rate_id);
        }
        ids.push_back(r.rate_id);
    }
    auto res = detail::run_stage1(model, data.train_latents, ids, fresh, cfg.stage1_iters, cfg, rng, report, "stage1");
    model.set_stage("stage1");
    return res;
}

/// Measures F_sim of each listed rate (all rates when empty) over the held-out
/// latents and stores the argmin timestep.
inline const RateTimestepMap& calibrate_mapping(OscarModel& model, const Tensor& heldout_latents,
                                                std::vector<int> rate_ids = {}) {
    if (heldout_latents.numel() == 0 || heldout_latents.dim(0) == 0) throw RangeError("calibrate: empty latent set");
    if (rate_ids.empty())
        for (const auto& r : model.rates()) rate_ids.push_back(r.rate_id);
    auto batches = TrainingData::batches(heldout_latents);
    for (int id : rate_ids) {
        const auto& h = model.hyper(id);
        double f = measure_empirical_sim(batches, [&](const Tensor& z) { return h.forward(z).z_tilde; });
        model.calibration().calibrate(h.rate(), f, heldout_latents.dim(0));
    }
    if (model.stage() == "stage1") model.set_stage("calibrated");
    return model.calibration();
}

/// Picks the rate trained at one stage-2 iteration.
using RatePicker = std::function<int(Rng&)>;

inline RatePicker uniform_picker(std::vector<int> ids) {
    return [ids = std::move(ids)](Rng& rng) { return ids[rng.below(ids.size())]; };
}

/// New rate with probability p, otherwise uniform over the existing ones.
inline RatePicker mixing_picker(int fresh, std::vector<int> existing, double p) {
    return [=](Rng& rng) { return existing.empty() || rng.uniform() < p ? fresh : existing[rng.below(existing.size())]; };
}

struct Stage2Step {
    Tensor cosine, commitment, repa, perceptual, generator, discriminator, total;
    QuantizeResult codes;
    Tensor z_e;
};

/// Forward pass of one stage-2 iteration at rate `rate_id`.
inline Stage2Step stage2_forward(const OscarModel& model, const Tensor& z0, const Tensor& images, int rate_id,
                                 const LossWeights& w) {
    const auto& h = model.hyper(rate_id);
    auto out = h.forward(z0);
    auto z_hat = model.denoise(out.z_tilde, rate_id);
    auto recon = model.decode_latent(z_hat);
    Stage2Step s;
    s.cosine = cosine_alignment_loss(z0, out.z_tilde);
    s.commitment = commitment_loss(out.z_e, out.z_q);
    s.repa = add(s.cosine, s.commitment);
    s.perceptual = perceptual_loss(images, recon);
    auto gan = gan_losses(z0, z_hat, model.discriminator());
    s.generator = gan.generator;
    s.discriminator = gan.discriminator;
    s.total = stage2_total(s.repa, s.perceptual, s.generator, w);
    s.codes = std::move(out.codes);
    s.z_e = out.z_e;
    return s;
}

namespace detail {

inline void run_stage2(OscarModel& model, const TrainingData& data, std::size_t iters, const RatePicker& pick,
                       const TrainConfig& cfg, Rng rng, TrainReport& report, const std::string& stage) {
    for (const auto& r : model.rates())
        if (!model.calibration().contains(r.rate_id))
            throw RangeError(stage + ": rate " + std::to_string(r.rate_id) + " has no calibration entry");
    if (data.train_latents.numel() == 0) throw RangeError(stage + ": latents not encoded");
    Rng lora_rng = rng.fork(4);
    model.attach_lora(lora_rng);
    model.denoiser().freeze_base();
    const OptimizerConfig ocfg{.lr = cfg.stage2_lr, .weight_decay = cfg.stage2_weight_decay, .kind = OptimizerKind::kAdamW};
    std::map<int, Optimizer<float>> hyper_opt;
    std::map<int, ParamList<float>> hyper_params;
    for (const auto& r : model.rates()) {
        hyper_opt.emplace(r.rate_id, Optimizer<float>(ocfg));
        hyper_params[r.rate_id] = model.hyper(r.rate_id).parameters();
    }
    auto lora = model.denoiser().lora_parameters();
    auto disc = model.discriminator().parameters();
    Optimizer<float> lora_opt(ocfg), disc_opt(ocfg);
    BatchSampler sampler(data.train_latents.dim(0), cfg.batch_size, rng.fork(1));
    Rng pick_rng = rng.fork(2), revive = rng.fork(3);
    DivergenceGuard guard(model, stage, cfg.checkpoint_every);
    std::map<int, double> running;
    for (std::size_t it = 0; it < iters; ++it) {
        const int id = pick(pick_rng);
        auto rows = sampler.next();
        auto z0 = TrainingData::gather(data.train_latents, rows);
        auto x = TrainingData::gather(data.train_images, rows);
        auto s = stage2_forward(model, z0, x, id, cfg.weights);
        const double total = s.total.item();
        if (!std::isfinite(total)) guard.abort(it, "rate " + std::to_string(id) + " total loss is not finite");
        // Generator step: hyper-encoder of the sampled rate + denoiser adapters.
        zero_grads(hyper_params[id]);
        zero_grads(lora);
        backward(s.total);
        hyper_opt.at(id).step(hyper_params[id]);
        lora_opt.step(lora);
        model.hyper(id).codebook().ema_update(site_vectors(s.z_e.detach()), s.codes.indices, &revive);
        // Discriminator step on the same batch (fake side detached).
        zero_grads(disc);
        const double ld = s.discriminator.item();
        if (!std::isfinite(ld)) guard.abort(it, "discriminator loss is not finite");
        backward(s.discriminator);
        disc_opt.step(disc);
        const double lc = s.cosine.item();
        running[id] = running.count(id) ? 0.99 * running[id] - 0.01 * lc : -lc;
        report.add({.stage = stage, .iteration = it, .rate_id = id, .cosine = lc, .commitment = s.commitment.item(),
                    .perceptual = s.perceptual.item(), .generator = s.generator.item(), .discriminator = ld,
                    .total = total, .f_sim = running[id]});
        if ((it + 1) % cfg.checkpoint_every == 0)
            report.snapshot({stage, it + 1, model.calibration().to_text()});
        guard.maybe_snapshot(it);
    }
}

}  // namespace detail

/// Stage 2: per iteration one rate drawn uniformly; the generator step updates
/// that rate's hyper-encoder and the denoiser adapters, then the
/// discriminator takes one step. VAE and base denoiser weights stay frozen.
inline void train_stage2(OscarModel& model, const TrainingData& data, const TrainConfig& cfg, TrainReport& report) {
    cfg.validate();
    std::vector<int> ids;
    for (const auto& r : model.rates()) ids.push_back(r.rate_id);
    if (ids.empty()) throw RangeError("stage2: model has no rates");
    detail::run_stage2(model, data, cfg.stage2_iters, uniform_picker(ids), cfg, detail::stage_rng(cfg, 4), report, "stage2");
    model.set_stage("stage2");
}

/// Adds a rate to a trained model: stage-1 warmup of the new hyper-encoder
/// alone, calibration of the new rate, then continued stage 2 drawing the new
/// rate with probability adapt_mix.
inline void adapt_unseen_rate(OscarModel& model, const RateConfig& rate, const TrainingData& data,
                              const TrainConfig& cfg, TrainReport& report) {
    cfg.validate();
    if (model.has_rate(rate.rate_id)) throw RangeError("adapt: rate id " + std::to_string(rate.rate_id) + " is already in use");
    if ((cfg.patch_size / model.config().vae.factor) % rate.downsample)
        throw RangeError("adapt: training latent grid is not divisible by downsample " + std::to_string(rate.downsample));
    std::vector<int> existing;
    for (const auto& r : model.rates()) existing.push_back(r.rate_id);
    Rng rng = detail::stage_rng(cfg, 5 + static_cast<std::uint64_t>(rate.rate_id));
    Rng init = rng.fork(10);
    model.add_rate(rate, init);
    const auto warmup = static_cast<std::size_t>(std::ceil(cfg.adapt_warmup_fraction * static_cast<double>(cfg.stage1_iters)));
    detail::run_stage1(model, data.train_latents, {rate.rate_id}, {rate.rate_id}, warmup, cfg, rng.fork(1), report,
                       "adapt_warmup");
    calibrate_mapping(model, data.heldout_latents.numel() ? data.heldout_latents : data.train_latents, {rate.rate_id});
    detail::run_stage2(model, data, cfg.adapt_iters, mixing_picker(rate.rate_id, existing, cfg.adapt_mix), cfg,
                       rng.fork(2), report, "adapt");
}

}  // namespace oscar
