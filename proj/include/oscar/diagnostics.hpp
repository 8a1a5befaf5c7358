#pragma once

// Statistical diagnostics: moment statistics and QQ series of residual noise,
// rate-distortion tables, and plain SVG plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "oscar/codec.hpp"
#include "oscar/training.hpp"

namespace oscar {

struct MomentStats {
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0;  // unbiased
    double skewness = 0.0;  // m3 / m2^1.5, population moments
    double excess_kurtosis = 0.0;  // m4 / m2^2 - 3
};

inline MomentStats moment_stats(std::span<const double> x) {
    if (x.size() < 4) throw RangeError("moment_stats: need at least 4 samples, got " + std::to_string(x.size()));
    MomentStats s;
    s.count = x.size();
    const double n = static_cast<double>(x.size());
    double sum = 0.0;
    for (double v : x) {
        if (!std::isfinite(v)) throw NumericError("moment_stats: non-finite sample");
        sum += v;
    }
    s.mean = sum / n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : x) {
        const double d = v - s.mean, d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    s.variance = m2 / (n - 1.0);
    m2 /= n, m3 /= n, m4 /= n;
    if (m2 > 0.0) {
        s.skewness = m3 / std::pow(m2, 1.5);
        s.excess_kurtosis = m4 / (m2 * m2) - 3.0;
    }
    return s;
}

/// Acklam's rational approximation of the standard normal quantile
/// (relative error below 1.2e-9 on (0, 1)).
inline double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw RangeError("inverse_normal_cdf: p must lie in (0, 1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double lo = 0.02425, hi = 1.0 - lo;
    if (p < lo) {
        double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > hi) {
        double q = std::sqrt(-2.0 * std::log1p(-p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    double q = p - 0.5, r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

struct QqSeries {
    std::vector<double> theoretical;  // Phi^-1((i - 0.5) / n)
    std::vector<double> empirical;    // sorted samples

    /// Least-squares slope of empirical on theoretical quantiles.
    double slope() const {
        const double n = static_cast<double>(theoretical.size());
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < theoretical.size(); ++i) mx += theoretical[i], my += empirical[i];
        mx /= n, my /= n;
        double sxy = 0.0, sxx = 0.0;
        for (std::size_t i = 0; i < theoretical.size(); ++i) {
            sxy += (theoretical[i] - mx) * (empirical[i] - my);
            sxx += (theoretical[i] - mx) * (theoretical[i] - mx);
        }
        return sxy / sxx;
    }
};

inline QqSeries qq_data(std::span<const double> samples) {
    if (samples.size() < 10) throw RangeError("qq_data: need at least 10 samples, got " + std::to_string(samples.size()));
    QqSeries q;
    q.empirical.assign(samples.begin(), samples.end());
    std::sort(q.empirical.begin(), q.empirical.end());
    const double n = static_cast<double>(samples.size());
    q.theoretical.resize(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        q.theoretical[i] = inverse_normal_cdf((static_cast<double>(i + 1) - 0.5) / n);
    return q;
}

/// Moment and QQ-slope bands a residual sample must meet to count as Gaussian.
struct GaussianityBands {
    double max_abs_skew = 0.3;
    double max_abs_excess_kurtosis = 0.6;
    double slope_lo = 0.9, slope_hi = 1.1;

    bool holds(const MomentStats& s, double slope) const {
        return std::abs(s.skewness) <= max_abs_skew && std::abs(s.excess_kurtosis) <= max_abs_excess_kurtosis &&
               slope >= slope_lo && slope <= slope_hi;
    }
};

struct ResidualSummary {
    MomentStats stats;  // of the standardized residuals
    QqSeries qq;
    double qq_slope = 0.0;
    double raw_mean = 0.0, raw_std = 0.0;  // pooled, before standardization
};

/// Standardizes pooled samples by their mean and unbiased standard deviation.
inline ResidualSummary summarize_residuals(std::vector<double> pooled) {
    auto raw = moment_stats(pooled);
    const double sd = std::sqrt(raw.variance);
    if (!(sd > 0.0)) throw NumericError("residual report: pooled residuals have zero variance");
    for (auto& v : pooled) v = (v - raw.mean) / sd;
    ResidualSummary r;
    r.raw_mean = raw.mean;
    r.raw_std = sd;
    r.stats = moment_stats(pooled);
    r.qq = qq_data(pooled);
    r.qq_slope = r.qq.slope();
    return r;
}

struct ResidualReport {
    int rate_id = 0;
    std::size_t timestep = 0;
    ResidualSummary trained, untrained;

    static constexpr const char* kCsvHeader = "model,rate_id,timestep,n,raw_mean,raw_std,skewness,excess_kurtosis,qq_slope";

    std::string to_csv() const {
        std::string out = std::string(kCsvHeader) + "\n";
        char buf[256];
        for (const auto* which : {"trained", "untrained"}) {
            const auto& s = std::string(which) == "trained" ? trained : untrained;
            std::snprintf(buf, sizeof buf, "%s,%d,%zu,%zu,%.8g,%.8g,%.8g,%.8g,%.8g\n", which, rate_id, timestep,
                          s.stats.count, s.raw_mean, s.raw_std, s.stats.skewness, s.stats.excess_kurtosis, s.qq_slope);
            out += buf;
        }
        return out;
    }
};

/// Pooled residuals (z~ - sqrt(a) z0) / sqrt(1 - a) at the rate's timestep.
inline std::vector<double> pooled_residuals(const HyperEncoderNet<float>& hyper, const Tensor& latents, std::size_t t,
                                            const NoiseSchedule& schedule) {
    NoGradGuard no_grad;
    std::vector<double> pooled;
    pooled.reserve(latents.numel());
    for (const auto& z0 : TrainingData::batches(latents)) {
        auto eps = extract_residual(hyper.forward(z0).z_tilde, z0, t, schedule);
        pooled.insert(pooled.end(), eps.data().begin(), eps.data().end());
    }
    return pooled;
}

/// Residual statistics of the trained hyper-encoder against a freshly
/// initialized one (codebook seeded as at the start of training).
inline ResidualReport residual_report(const OscarModel& model, const Tensor& latents, int rate_id,
                                      std::uint64_t baseline_seed = 1) {
    if (latents.numel() == 0 || latents.dim(0) == 0) throw RangeError("residual report: empty latent set");
    ResidualReport rep;
    rep.rate_id = rate_id;
    rep.timestep = model.calibration().timestep(rate_id);
    const auto& trained = model.hyper(rate_id);
    rep.trained = summarize_residuals(pooled_residuals(trained, latents, rep.timestep, model.schedule()));
    Rng rng(baseline_seed, 0xBA5E);
    HyperEncoderNet<float> fresh(trained.rate(), model.config().hyper, rng);
    {
        NoGradGuard no_grad;
        auto first = TrainingData::slice_rows(latents, 0, std::min<std::size_t>(16, latents.dim(0)));
        fresh.codebook().init_kmeanspp(site_vectors(fresh.front(first)), rng);
    }
    rep.untrained = summarize_residuals(pooled_residuals(fresh, latents, rep.timestep, model.schedule()));
    return rep;
}

inline double psnr_db(double mse) {
    if (!(mse >= 0.0)) throw NumericError("psnr: negative or NaN MSE");
    if (mse == 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

struct RdRow {
    int rate_id = 0;
    double bpp_theoretical = 0.0, bpp_measured = 0.0, mse = 0.0, psnr_db = 0.0, cosine_sim_latent = 0.0;
    std::size_t n_images = 0;
};

struct RdTable {
    std::vector<RdRow> rows;
    std::size_t skipped = 0;  // unreadable inputs

    static constexpr const char* kCsvHeader =
        "rate_id,bpp_theoretical,bpp_measured,mse,psnr_db,cosine_sim_latent,n_images";

    std::string to_csv() const {
        std::string out = std::string(kCsvHeader) + "\n";
        char buf[256];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%.6f,%.8g,%zu\n", r.rate_id, r.bpp_theoretical,
                          r.bpp_measured, r.mse, r.psnr_db, r.cosine_sim_latent, r.n_images);
            out += buf;
        }
        return out;
    }

    const RdRow& at(int rate_id) const {
        for (const auto& r : rows)
            if (r.rate_id == rate_id) return r;
        throw RangeError("rd table: no row for rate " + std::to_string(rate_id));
    }
};

/// Full codec round trip per image and rate: bitstream size, reconstruction
/// MSE, and latent cosine similarity between z0 and z~.
inline RdTable rd_eval(const OscarModel& model, const std::vector<Image>& images, std::vector<int> rate_ids = {}) {
    if (images.empty()) throw RangeError("rd_eval: no images");
    if (rate_ids.empty())
        for (const auto& r : model.rates()) rate_ids.push_back(r.rate_id);
    const auto fp = model.fingerprint();
    RdTable table;
    NoGradGuard no_grad;
    for (int id : rate_ids) {
        const auto& rate = model.hyper(id).rate();
        RdRow row;
        row.rate_id = id;
        row.bpp_theoretical = rate.theoretical_bpp();
        double mse = 0.0, bpp = 0.0, cos = 0.0;
        for (const auto& img : images) {
            auto b = compress(model, img, id);
            bpp += 8.0 * static_cast<double>(b.serialize().size()) / (static_cast<double>(img.height) * img.width);
            mse += image_mse(img, decompress(model, b, fp));
            auto z0 = model.encode_latent(to_tensor(std::vector<Image>{pad_replicate_to(img, rate.cell())}));
            auto s = site_cosine(z0, decode_latent_tilde(model, b));
            cos += s.sum / static_cast<double>(s.sites - s.skipped);
        }
        const double n = static_cast<double>(images.size());
        row.n_images = images.size();
        row.mse = mse / n;
        row.psnr_db = psnr_db(row.mse);
        row.bpp_measured = bpp / n;
        row.cosine_sim_latent = cos / n;
        table.rows.push_back(row);
    }
    return table;
}

/// rd_eval over PPM files; unreadable files are skipped and counted.
inline RdTable rd_eval_files(const OscarModel& model, const std::vector<std::string>& paths, std::vector<int> rate_ids = {}) {
    std::vector<Image> images;
    std::size_t skipped = 0;
    for (const auto& p : paths) {
        try {
            images.push_back(read_ppm(p));
        } catch (const Error&) {
            ++skipped;
        }
    }
    if (images.empty()) throw IoError("rd_eval: all " + std::to_string(paths.size()) + " inputs were unreadable");
    auto table = rd_eval(model, images, std::move(rate_ids));
    table.skipped = skipped;
    return table;
}

/// Mean MSE when the back-end is fed the unquantized front-end features
/// (no codebook), with the rest of the decoder unchanged.
inline double bypass_mse(const OscarModel& model, const std::vector<Image>& images, int rate_id) {
    if (images.empty()) throw RangeError("bypass_mse: no images");
    NoGradGuard no_grad;
    const auto& h = model.hyper(rate_id);
    double mse = 0.0;
    for (const auto& img : images) {
        auto z0 = model.encode_latent(to_tensor(std::vector<Image>{pad_replicate_to(img, h.rate().cell())}));
        auto z_hat = model.denoise(h.forward(z0, false).z_tilde, rate_id);
        auto recon = crop(from_tensor(model.decode_latent(z_hat)), 0, 0, img.height, img.width);
        mse += image_mse(img, recon);
    }
    return mse / static_cast<double>(images.size());
}

enum class PlotKind { kQq, kRd, kSimVsT };

struct PlotSeries {
    std::vector<double> x, y;
    std::string title;
};

namespace detail {

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace detail

/// Scatter plot on a 1000 x 1000 viewBox with axes and ticks. QQ plots share
/// one range on both axes and draw the identity line; sim-vs-t plots draw the
/// sqrt(alpha_bar_t) curve of `schedule`. Large series are thinned evenly.
inline std::string emit_svg(const PlotSeries& series, PlotKind kind, const NoiseSchedule& schedule = NoiseSchedule::linear()) {
    if (series.x.empty() || series.x.size() != series.y.size()) throw RangeError("emit_svg: empty or ragged series");
    constexpr double left = 100, right = 960, top = 40, bottom = 900;
    double x0 = *std::min_element(series.x.begin(), series.x.end()), x1 = *std::max_element(series.x.begin(), series.x.end());
    double y0 = *std::min_element(series.y.begin(), series.y.end()), y1 = *std::max_element(series.y.begin(), series.y.end());
    if (kind == PlotKind::kQq) x0 = y0 = std::min(x0, y0), x1 = y1 = std::max(x1, y1);
    if (kind == PlotKind::kSimVsT) x0 = 0.0, x1 = static_cast<double>(schedule.steps()), y0 = 0.0, y1 = 1.0;
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (right - left); };
    auto py = [&](double y) { return bottom - (y - y0) / (y1 - y0) * (bottom - top); };
    std::string svg =
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"0 0 1000 1000\" width=\"1000\" height=\"1000\">\n"
        "<rect x=\"0\" y=\"0\" width=\"1000\" height=\"1000\" fill=\"white\"/>\n";
    auto line = [&](double ax, double ay, double bx, double by, const char* style) {
        svg += "<line x1=\"" + detail::fmt("%.3f", ax) + "\" y1=\"" + detail::fmt("%.3f", ay) + "\" x2=\"" +
               detail::fmt("%.3f", bx) + "\" y2=\"" + detail::fmt("%.3f", by) + "\" " + style + "/>\n";
    };
    auto text = [&](double x, double y, const std::string& s, const char* anchor) {
        std::string esc;
        for (char c : s) esc += c == '<' ? std::string("&lt;") : c == '>' ? std::string("&gt;") : c == '&' ? std::string("&amp;") : std::string(1, c);
        svg += "<text x=\"" + detail::fmt("%.1f", x) + "\" y=\"" + detail::fmt("%.1f", y) + "\" font-size=\"18\" text-anchor=\"" +
               anchor + "\">" + esc + "</text>\n";
    };
    line(left, bottom, right, bottom, "stroke=\"black\"");
    line(left, bottom, left, top, "stroke=\"black\"");
    for (int i = 0; i <= 4; ++i) {
        double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
        line(px(fx), bottom, px(fx), bottom + 8, "stroke=\"black\"");
        text(px(fx), bottom + 30, detail::fmt("%.3g", fx), "middle");
        line(left - 8, py(fy), left, py(fy), "stroke=\"black\"");
        text(left - 12, py(fy) + 6, detail::fmt("%.3g", fy), "end");
    }
    const char* xlabel = kind == PlotKind::kQq ? "theoretical quantile" : kind == PlotKind::kRd ? "bpp" : "timestep t";
    const char* ylabel = kind == PlotKind::kQq ? "empirical quantile" : kind == PlotKind::kRd ? "distortion" : "cosine similarity";
    text((left + right) / 2, 970, xlabel, "middle");
    svg += "<text x=\"30\" y=\"" + detail::fmt("%.1f", (top + bottom) / 2) + "\" font-size=\"18\" text-anchor=\"middle\" transform=\"rotate(-90 30 " +
           detail::fmt("%.1f", (top + bottom) / 2) + ")\">" + ylabel + "</text>\n";
    if (!series.title.empty()) text((left + right) / 2, 28, series.title, "middle");
    if (kind == PlotKind::kQq) line(px(x0), py(x0), px(x1), py(x1), "stroke=\"red\" stroke-width=\"2\"");
    if (kind == PlotKind::kSimVsT) {
        std::string pts;
        for (std::size_t t = 1; t <= schedule.steps(); t += std::max<std::size_t>(1, schedule.steps() / 200))
            pts += detail::fmt("%.3f", px(static_cast<double>(t))) + "," + detail::fmt("%.3f", py(std::sqrt(schedule.alpha_bar(t)))) + " ";
        svg += "<polyline fill=\"none\" stroke=\"red\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    }
    const std::size_t n = series.x.size(), limit = 2000;
    const std::size_t shown = std::min(n, limit);
    std::string pts;
    for (std::size_t k = 0; k < shown; ++k) {
        std::size_t i = shown == n ? k : (k * (n - 1)) / (shown - 1);
        svg += "<circle cx=\"" + detail::fmt("%.3f", px(series.x[i])) + "\" cy=\"" + detail::fmt("%.3f", py(series.y[i])) +
               "\" r=\"3\" fill=\"steelblue\"/>\n";
        if (kind == PlotKind::kRd) pts += detail::fmt("%.3f", px(series.x[i])) + "," + detail::fmt("%.3f", py(series.y[i])) + " ";
    }
    if (kind == PlotKind::kRd) svg += "<polyline fill=\"none\" stroke=\"steelblue\" points=\"" + pts + "\"/>\n";
    svg += "</svg>\n";
    return svg;
}

}  // namespace oscar
