#pragma once

// Evaluation-only full-reference metrics: MSE, PSNR, VIFP, SSIM, reported
// per item and as batch means in that column order.

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "s2i/loss.hpp"
#include "s2i/tensor.hpp"

namespace s2i {

// 10*log10(L^2/mse); mse == 0 maps to the +infinity sentinel.
inline double psnr_from_mse(double mse_value, double l_range) {
    if (mse_value < 0.0) throw RangeError("psnr: negative mse");
    if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(l_range * l_range / mse_value);
}

template <typename S>
double psnr(const BasicTensor<S>& x, const BasicTensor<S>& y, double l_range) {
    return psnr_from_mse(mse(x, y), l_range);
}

namespace detail {

struct Plane {
    int64_t h = 0, w = 0;
    std::vector<double> v;
    double& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i) * w + j]; }
    double at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i) * w + j]; }
};

inline Plane valid_conv(const Plane& x, const std::vector<double>& win, int k) {
    Plane out;
    out.h = x.h - k + 1;
    out.w = x.w - k + 1;
    out.v.resize(static_cast<size_t>(out.h) * out.w);
    for (int64_t i = 0; i < out.h; ++i)
        for (int64_t j = 0; j < out.w; ++j) {
            double acc = 0.0;
            for (int u = 0; u < k; ++u)
                for (int v2 = 0; v2 < k; ++v2)
                    acc += win[static_cast<size_t>(u) * k + v2] * x.at(i + u, j + v2);
            out.at(i, j) = acc;
        }
    return out;
}

inline Plane decimate2(const Plane& x) {
    Plane out;
    out.h = (x.h + 1) / 2;
    out.w = (x.w + 1) / 2;
    out.v.resize(static_cast<size_t>(out.h) * out.w);
    for (int64_t i = 0; i < out.h; ++i)
        for (int64_t j = 0; j < out.w; ++j) out.at(i, j) = x.at(i * 2, j * 2);
    return out;
}

template <typename S>
Plane to_plane(const BasicTensor<S>& t, const char* name) {
    auto [h, w] = plane_dims(t, name);
    Plane p;
    p.h = h;
    p.w = w;
    p.v.resize(static_cast<size_t>(h) * w);
    const S* d = t.data().data() + (t.numel() - h * w);
    for (size_t i = 0; i < p.v.size(); ++i) p.v[i] = static_cast<double>(d[i]);
    return p;
}

}  // namespace detail

struct VifpParams {
    int levels = 4;
    int window_size = 11;
    double window_sigma = 11.0 / 5.0;
    double noise_variance = 2.0;  // on the [0,255] scale; rescaled by (l_range/255)^2
    double l_range = 1.0;
};

// Pixel-domain visual information fidelity over a Gaussian scale pyramid.
// Reference-first: vifp(ref, dist) is not symmetric in its arguments.
template <typename S>
double vifp(const BasicTensor<S>& ref, const BasicTensor<S>& dist, const VifpParams& p = VifpParams()) {
    detail::check_same_shape(ref, dist, "vifp");
    if (p.levels < 1) throw ConfigError("vifp: levels must be >= 1");
    auto [h, w] = detail::plane_dims(ref, "vifp");
    const int64_t min_side = std::min(h, w);
    if (min_side < (int64_t{1} << p.levels) * p.window_size)
        throw ShapeError(detail::str("vifp: image ", h, "x", w, " too small for ", p.levels,
                                     " levels with window ", p.window_size));

    const std::vector<double> win = gaussian_window(p.window_size, p.window_sigma);
    const double sigma_nsq = p.noise_variance * (p.l_range / 255.0) * (p.l_range / 255.0);
    const double eps = 1e-10;

    detail::Plane r = detail::to_plane(ref, "vifp");
    detail::Plane d = detail::to_plane(dist, "vifp");

    double num = 0.0, den = 0.0;
    for (int scale = 1; scale <= p.levels; ++scale) {
        if (scale > 1) {
            r = detail::decimate2(detail::valid_conv(r, win, p.window_size));
            d = detail::decimate2(detail::valid_conv(d, win, p.window_size));
        }
        const auto mu1 = detail::valid_conv(r, win, p.window_size);
        const auto mu2 = detail::valid_conv(d, win, p.window_size);

        detail::Plane rr = r, dd = d, rd = r;
        for (size_t i = 0; i < rr.v.size(); ++i) {
            rr.v[i] = r.v[i] * r.v[i];
            dd.v[i] = d.v[i] * d.v[i];
            rd.v[i] = r.v[i] * d.v[i];
        }
        const auto m11 = detail::valid_conv(rr, win, p.window_size);
        const auto m22 = detail::valid_conv(dd, win, p.window_size);
        const auto m12 = detail::valid_conv(rd, win, p.window_size);

        for (size_t i = 0; i < mu1.v.size(); ++i) {
            double sigma1_sq = m11.v[i] - mu1.v[i] * mu1.v[i];
            double sigma2_sq = m22.v[i] - mu2.v[i] * mu2.v[i];
            double sigma12 = m12.v[i] - mu1.v[i] * mu2.v[i];
            sigma1_sq = std::max(sigma1_sq, 0.0);
            sigma2_sq = std::max(sigma2_sq, 0.0);

            double gscale = sigma12 / (sigma1_sq + eps);
            double sv_sq = sigma2_sq - gscale * sigma12;
            if (sigma1_sq < eps) {
                gscale = 0.0;
                sv_sq = sigma2_sq;
                sigma1_sq = 0.0;
            }
            if (sigma2_sq < eps) {
                gscale = 0.0;
                sv_sq = 0.0;
            }
            if (gscale < 0.0) {
                sv_sq = sigma2_sq;
                gscale = 0.0;
            }
            sv_sq = std::max(sv_sq, eps);

            num += std::log10(1.0 + gscale * gscale * sigma1_sq / (sv_sq + sigma_nsq));
            den += std::log10(1.0 + sigma1_sq / sigma_nsq);
        }
    }
    if (den < 1e-12) return num < 1e-12 ? 1.0 : 0.0;  // constant reference carries no information
    return num / den;
}

// Largest level count admissible for an h x w image, 0 if even one level won't fit.
inline int vifp_max_levels(int64_t h, int64_t w, int window_size = 11) {
    int levels = 0;
    const int64_t min_side = std::min(h, w);
    while (min_side >= (int64_t{1} << (levels + 1)) * window_size) ++levels;
    return levels;
}

struct ItemMetrics {
    double mse = 0.0;
    double psnr = 0.0;
    double vifp = 0.0;
    double ssim = 0.0;
};

struct MetricsParams {
    double l_range = 1.0;
    SSIMParams ssim = SSIMParams();
    VifpParams vifp;
    int vifp_levels = 0;  // 0 = auto (largest feasible; NaN if none fits)
};

struct MetricsReport {
    std::vector<ItemMetrics> items;
    ItemMetrics means;
    double l_range = 1.0;
    int vifp_levels = 0;
};

// Per-item metrics plus batch means over aligned reconstruction/target lists.
template <typename S>
MetricsReport evaluate(const std::vector<TensorPtr<S>>& x_hat, const std::vector<TensorPtr<S>>& y,
                       MetricsParams params = MetricsParams()) {
    if (x_hat.size() != y.size())
        throw ShapeError(detail::str("evaluate: misaligned batch, ", x_hat.size(), " reconstructions vs ",
                                     y.size(), " targets"));
    if (x_hat.empty()) throw ShapeError("evaluate: empty batch");

    auto [h, w] = detail::plane_dims(*y.front(), "evaluate");
    int levels = params.vifp_levels > 0 ? params.vifp_levels
                                        : vifp_max_levels(h, w, params.vifp.window_size);
    VifpParams vp = params.vifp;
    vp.levels = levels;
    vp.l_range = params.l_range;

    MetricsReport report;
    report.l_range = params.l_range;
    report.vifp_levels = levels;
    report.items.reserve(x_hat.size());
    double sum_mse = 0, sum_psnr = 0, sum_vifp = 0, sum_ssim = 0;
    for (size_t i = 0; i < x_hat.size(); ++i) {
        detail::check_same_shape(*x_hat[i], *y[i], "evaluate");
        ItemMetrics m;
        m.mse = mse(*x_hat[i], *y[i]);
        m.psnr = psnr_from_mse(m.mse, params.l_range);
        m.vifp = levels >= 1 ? vifp(*y[i], *x_hat[i], vp) : std::numeric_limits<double>::quiet_NaN();
        m.ssim = ssim(*x_hat[i], *y[i], params.ssim);
        sum_mse += m.mse;
        sum_psnr += m.psnr;
        sum_vifp += m.vifp;
        sum_ssim += m.ssim;
        report.items.push_back(m);
    }
    const double n = static_cast<double>(x_hat.size());
    report.means = {sum_mse / n, sum_psnr / n, sum_vifp / n, sum_ssim / n};
    return report;
}

namespace detail {

inline std::string metric_cell(double v) {
    std::ostringstream os;
    if (std::isinf(v))
        os << (v > 0 ? "inf" : "-inf");
    else if (std::isnan(v))
        os << "nan";
    else
        os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

}  // namespace detail

// Aligned text table, one row per label, columns in Table-1 order.
inline std::string format_metrics_table(const std::vector<std::pair<std::string, ItemMetrics>>& rows) {
    size_t label_w = 8;
    for (const auto& [label, m] : rows) label_w = std::max(label_w, label.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(label_w) + 2) << "Method" << std::right << std::setw(10)
       << "MSE" << std::setw(10) << "PSNR" << std::setw(10) << "VIFP" << std::setw(10) << "SSIM" << "\n";
    for (const auto& [label, m] : rows) {
        os << std::left << std::setw(static_cast<int>(label_w) + 2) << label << std::right << std::setw(10)
           << detail::metric_cell(m.mse) << std::setw(10) << detail::metric_cell(m.psnr) << std::setw(10)
           << detail::metric_cell(m.vifp) << std::setw(10) << detail::metric_cell(m.ssim) << "\n";
    }
    return os.str();
}

inline std::string format_metrics_table(const MetricsReport& report, const std::string& label = "model") {
    return format_metrics_table({{label, report.means}});
}

}  // namespace s2i
