#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oscar/ops.hpp"
#include "oscar/rate.hpp"

namespace oscar {

/// beta_t and alpha_bar_t = prod_{i<=t}(1 - beta_i) for t = 1..T. Tables are
/// stored 0-based; accessors take the 1-based timestep.
class NoiseSchedule {
   public:
    NoiseSchedule() = default;

    /// Linear betas from beta_start to beta_end.
    static NoiseSchedule linear(std::size_t steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
        if (steps < 1) throw RangeError("noise schedule: T must be >= 1");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw RangeError("noise schedule: need 0 < beta_start <= beta_end < 1");
        std::vector<double> betas(steps);
        for (std::size_t i = 0; i < steps; ++i) {
            double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
            betas[i] = beta_start + frac * (beta_end - beta_start);
        }
        NoiseSchedule s = from_betas(std::move(betas));
        s.beta_start_ = beta_start;
        s.beta_end_ = beta_end;
        return s;
    }

    static NoiseSchedule from_betas(std::vector<double> betas) {
        if (betas.empty()) throw RangeError("noise schedule: T must be >= 1");
        NoiseSchedule s;
        double prod = 1.0;
        for (double b : betas) {
            if (!(b > 0.0 && b < 1.0)) throw RangeError("noise schedule: every beta must lie in (0, 1)");
            prod *= 1.0 - b;
            s.alpha_bars_.push_back(prod);
        }
        s.beta_start_ = betas.front();
        s.beta_end_ = betas.back();
        s.betas_ = std::move(betas);
        return s;
    }

    std::size_t steps() const { return betas_.size(); }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }
    double beta(std::size_t t) const { return betas_.at(check(t) - 1); }
    double alpha_bar(std::size_t t) const { return alpha_bars_.at(check(t) - 1); }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }
    const std::vector<double>& betas() const { return betas_; }

    std::size_t check(std::size_t t) const {
        if (t < 1 || t > betas_.size())
            throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) + "]");
        return t;
    }

   private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
    double beta_start_ = 0.0;
    double beta_end_ = 0.0;
};

/// sqrt(a) * z0 + sqrt(1 - a) * eps for an explicit alpha_bar.
template <class Real>
BasicTensor<Real> forward_diffuse_ab(const BasicTensor<Real>& z0, double alpha_bar, const BasicTensor<Real>& eps) {
    if (z0.shape() != eps.shape()) throw ShapeError("forward_diffuse: noise shape " + shape_str(eps.shape()) +
                                                    " vs latent " + shape_str(z0.shape()));
    return add(scale(z0, std::sqrt(alpha_bar)), scale(eps, std::sqrt(1.0 - alpha_bar)));
}

template <class Real>
BasicTensor<Real> forward_diffuse(const BasicTensor<Real>& z0, std::size_t t, const BasicTensor<Real>& eps,
                                  const NoiseSchedule& schedule) {
    return forward_diffuse_ab(z0, schedule.alpha_bar(t), eps);
}

/// x0-prediction: (z_t - sqrt(1 - a) * eps_pred) / sqrt(a).
template <class Real>
BasicTensor<Real> one_step_denoise_ab(const BasicTensor<Real>& z_t, double alpha_bar, const BasicTensor<Real>& eps_pred) {
    if (z_t.shape() != eps_pred.shape()) throw ShapeError("one_step_denoise: prediction shape " +
                                                          shape_str(eps_pred.shape()) + " vs " + shape_str(z_t.shape()));
    if (!(alpha_bar > 0.0)) throw RangeError("one_step_denoise: alpha_bar must be positive");
    return scale(sub(z_t, scale(eps_pred, std::sqrt(1.0 - alpha_bar))), 1.0 / std::sqrt(alpha_bar));
}

template <class Real>
BasicTensor<Real> one_step_denoise(const BasicTensor<Real>& z_t, std::size_t t, const BasicTensor<Real>& eps_pred,
                                   const NoiseSchedule& schedule) {
    return one_step_denoise_ab(z_t, schedule.alpha_bar(t), eps_pred);
}

/// Residual noise implied by the decomposition z~ = sqrt(a) z0 + sqrt(1-a) eps.
template <class Real>
BasicTensor<Real> extract_residual_ab(const BasicTensor<Real>& z_tilde, const BasicTensor<Real>& z0, double alpha_bar) {
    if (z_tilde.shape() != z0.shape())
        throw ShapeError("extract_residual: shapes " + shape_str(z_tilde.shape()) + " vs " + shape_str(z0.shape()));
    if (!(alpha_bar < 1.0)) throw RangeError("extract_residual: alpha_bar must be < 1");
    return scale(sub(z_tilde, scale(z0, std::sqrt(alpha_bar))), 1.0 / std::sqrt(1.0 - alpha_bar));
}

template <class Real>
BasicTensor<Real> extract_residual(const BasicTensor<Real>& z_tilde, const BasicTensor<Real>& z0, std::size_t t,
                                   const NoiseSchedule& schedule) {
    return extract_residual_ab(z_tilde, z0, schedule.alpha_bar(t));
}

/// Expected cosine similarity between a diffused latent and its clean source.
inline double theoretical_sim(std::size_t t, const NoiseSchedule& schedule) {
    return std::sqrt(schedule.alpha_bar(t));
}

/// argmin_t |sqrt(alpha_bar_t) - max(F, 0)| by exhaustive scan; ties go to the
/// smallest t.
inline std::size_t map_rate_to_timestep(double f_sim, const NoiseSchedule& schedule) {
    const double target = std::max(f_sim, 0.0);
    std::size_t best = 1;
    double best_gap = std::abs(std::sqrt(schedule.alpha_bars()[0]) - target);
    for (std::size_t t = 2; t <= schedule.steps(); ++t) {
        double gap = std::abs(std::sqrt(schedule.alpha_bars()[t - 1]) - target);
        if (gap < best_gap) {
            best_gap = gap;
            best = t;
        }
    }
    return best;
}

/// Per-site cosine similarity statistics of two NCHW tensors, with the
/// channel axis as the vector axis.
struct SiteCosine {
    double sum = 0.0;
    std::size_t sites = 0;
    std::size_t skipped = 0;  // sites where either vector has zero norm
};

template <class Real>
SiteCosine site_cosine(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    if (a.shape() != b.shape() || a.rank() != 4)
        throw ShapeError("site cosine: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    SiteCosine out;
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
            double d = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double x = av[(i * c + ch) * hw + p], y = bv[(i * c + ch) * hw + p];
                d += x * y;
                na += x * x;
                nb += y * y;
            }
            ++out.sites;
            if (na == 0.0 || nb == 0.0) {
                ++out.skipped;
                continue;
            }
            out.sum += d / std::sqrt(na * nb);
        }
    return out;
}

/// Mean site-wise cosine similarity between each latent and its quantized
/// reconstruction. `quantizer` maps an NCHW latent to a same-shaped tensor.
/// Zero-norm sites are skipped; more than 1% skipped is an error.
template <class Real, class Quantizer>
double measure_empirical_sim(const std::vector<BasicTensor<Real>>& latents, Quantizer&& quantizer) {
    if (latents.empty()) throw RangeError("measure_empirical_sim: empty latent set");
    NoGradGuard no_grad;
    SiteCosine total;
    for (const auto& z0 : latents) {
        auto zq = quantizer(z0);
        auto s = site_cosine(z0, zq);
        total.sum += s.sum;
        total.sites += s.sites;
        total.skipped += s.skipped;
    }
    if (total.skipped * 100 > total.sites)
        throw NumericError("measure_empirical_sim: " + std::to_string(total.skipped) + " of " +
                           std::to_string(total.sites) + " sites have zero norm");
    return total.sum / static_cast<double>(total.sites - total.skipped);
}

struct RateTimestepEntry {
    RateConfig rate;
    double f_sim = 0.0;
    std::size_t timestep = 1;
    std::size_t samples = 0;
};

/// Calibrated bit-rate -> pseudo timestep map plus the schedule it refers to.
class RateTimestepMap {
   public:
    RateTimestepMap() = default;
    explicit RateTimestepMap(NoiseSchedule schedule) : schedule_(std::move(schedule)) {}

    const NoiseSchedule& schedule() const { return schedule_; }

    /// Records a measured similarity and its argmin timestep.
    const RateTimestepEntry& calibrate(const RateConfig& rate, double f_sim, std::size_t samples) {
        if (!(f_sim >= -1.0 - 1e-9 && f_sim <= 1.0 + 1e-9))
            throw RangeError("calibration: similarity " + std::to_string(f_sim) + " outside [-1, 1]");
        RateTimestepEntry e{rate, f_sim, map_rate_to_timestep(f_sim, schedule_), samples};
        return entries_[rate.rate_id] = e;
    }

    void set(const RateTimestepEntry& e) { entries_[e.rate.rate_id] = e; }
    bool contains(int rate_id) const { return entries_.count(rate_id) > 0; }
    const RateTimestepEntry& at(int rate_id) const {
        auto it = entries_.find(rate_id);
        if (it == entries_.end()) throw RangeError("rate " + std::to_string(rate_id) + " is not calibrated");
        return it->second;
    }
    std::size_t timestep(int rate_id) const { return at(rate_id).timestep; }
    const std::map<int, RateTimestepEntry>& entries() const { return entries_; }

    /// True when every stored timestep is an argmin for its similarity.
    bool argmin_holds() const {
        for (const auto& [id, e] : entries_) {
            double target = std::max(e.f_sim, 0.0);
            double mine = std::abs(std::sqrt(schedule_.alpha_bar(e.timestep)) - target);
            for (double ab : schedule_.alpha_bars())
                if (std::abs(std::sqrt(ab) - target) < mine) return false;
        }
        return true;
    }

    /// Plain text: header "T, beta_start, beta_end", then one line per rate:
    /// "rate_id, s, V, M, F_sim, t".
    std::string to_text() const {
        std::string out;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%zu, %.9g, %.9g\n", schedule_.steps(), schedule_.beta_start(),
                      schedule_.beta_end());
        out += buf;
        for (const auto& [id, e] : entries_) {
            std::snprintf(buf, sizeof buf, "%d, %zu, %zu, %zu, %.9f, %zu\n", id, e.rate.downsample, e.rate.codebook_size,
                          e.rate.code_dim, e.f_sim, e.timestep);
            out += buf;
        }
        return out;
    }

    static RateTimestepMap from_text(const std::string& text, std::size_t latent_factor = 4) {
        std::istringstream in(text);
        std::string line;
        auto fields = [](const std::string& l) {
            std::vector<std::string> out;
            std::stringstream ss(l);
            std::string f;
            while (std::getline(ss, f, ',')) out.push_back(f);
            return out;
        };
        if (!std::getline(in, line)) throw FormatError("calibration: empty file");
        auto head = fields(line);
        if (head.size() != 3) throw FormatError("calibration: header needs 'T, beta_start, beta_end'");
        RateTimestepMap map;
        try {
            map.schedule_ = NoiseSchedule::linear(std::stoul(head[0]), std::stod(head[1]), std::stod(head[2]));
            while (std::getline(in, line)) {
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                auto f = fields(line);
                if (f.size() != 6) throw FormatError("calibration: malformed record '" + line + "'");
                RateTimestepEntry e;
                e.rate.rate_id = std::stoi(f[0]);
                e.rate.downsample = std::stoul(f[1]);
                e.rate.codebook_size = std::stoul(f[2]);
                e.rate.code_dim = std::stoul(f[3]);
                e.rate.latent_factor = latent_factor;
                e.f_sim = std::stod(f[4]);
                e.timestep = map.schedule_.check(std::stoul(f[5]));
                map.entries_[e.rate.rate_id] = e;
            }
        } catch (const std::logic_error& ex) {
            throw FormatError(std::string("calibration: unparsable number (") + ex.what() + ")");
        }
        return map;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write calibration file '" + path + "'");
        out << to_text();
    }

    static RateTimestepMap load(const std::string& path, std::size_t latent_factor = 4) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read calibration file '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return from_text(ss.str(), latent_factor);
    }

   private:
    NoiseSchedule schedule_ = NoiseSchedule::linear();
    std::map<int, RateTimestepEntry> entries_;
};

}  // namespace oscar
