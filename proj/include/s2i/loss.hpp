#pragma once

// Composite training objective: SSIM term plus receptive-field-weighted MSE,
// mixed by mu. Evaluation-path functions compute in double on raw buffers;
// *_op functions build the differentiable graph used for training.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "s2i/tensor.hpp"

namespace s2i {

struct SSIMParams {
    double c1 = 0.01 * 0.01;  // (0.01 * L)^2
    double c2 = 0.03 * 0.03;  // (0.03 * L)^2
    double c3 = 0.5 * 0.03 * 0.03;  // c2 / 2
    double alpha = 1.0;
    double beta = 1.0;
    double gamma_exp = 1.0;
    int window_size = 11;
    double window_sigma = 1.5;
    double l_range = 1.0;

    static SSIMParams for_range(double l) {
        SSIMParams p;
        p.l_range = l;
        p.c1 = (0.01 * l) * (0.01 * l);
        p.c2 = (0.03 * l) * (0.03 * l);
        p.c3 = p.c2 / 2.0;
        return p;
    }

    bool collapsed_form() const { return alpha == 1.0 && beta == 1.0 && gamma_exp == 1.0 && c3 == c2 / 2.0; }

    void validate() const {
        if (c1 <= 0.0 || c2 <= 0.0) throw ConfigError("ssim: c1 and c2 must be > 0");
        if (window_size < 1 || window_size % 2 == 0)
            throw ConfigError(detail::str("ssim: window size must be odd and >= 1, got ", window_size));
        if (window_sigma <= 0.0) throw ConfigError("ssim: window sigma must be > 0");
        if (l_range <= 0.0) throw ConfigError("ssim: dynamic range must be > 0");
    }
};

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size) * size);
    const int half = size / 2;
    double total = 0.0;
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const double dy = r - half, dx = c - half;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            w[static_cast<size_t>(r) * size + c] = v;
            total += v;
        }
    for (double& v : w) v /= total;
    return w;
}

namespace detail {

template <typename S>
void check_image_range(const BasicTensor<S>& x, double l_range, const char* name) {
    const double tol = 1e-5 * l_range;
    for (S v : x.data()) {
        const double d = static_cast<double>(v);
        if (!(d >= -tol && d <= l_range + tol))
            throw RangeError(str(name, ": pixel value ", d, " outside [0, ", l_range, "]"));
    }
}

struct LocalStats {
    int64_t oh, ow;
    std::vector<double> mu_x, mu_y, var_x, var_y, cov_xy;
};

template <typename S>
LocalStats local_stats(const BasicTensor<S>& x, const BasicTensor<S>& y, int win, double sigma,
                       const char* name) {
    check_same_shape(x, y, name);
    auto [h, w] = plane_dims(x, name);
    if (win > h || win > w)
        throw ShapeError(str(name, ": window ", win, " larger than image ", h, "x", w));
    const std::vector<double> g = gaussian_window(win, sigma);
    LocalStats st;
    st.oh = h - win + 1;
    st.ow = w - win + 1;
    const size_t n = static_cast<size_t>(st.oh) * st.ow;
    st.mu_x.resize(n);
    st.mu_y.resize(n);
    st.var_x.resize(n);
    st.var_y.resize(n);
    st.cov_xy.resize(n);
    const S* xd = x.data().data() + (x.numel() - h * w);
    const S* yd = y.data().data() + (y.numel() - h * w);
    for (int64_t i = 0; i < st.oh; ++i)
        for (int64_t j = 0; j < st.ow; ++j) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int u = 0; u < win; ++u)
                for (int v = 0; v < win; ++v) {
                    const double wg = g[static_cast<size_t>(u) * win + v];
                    const double xv = xd[(i + u) * w + (j + v)];
                    const double yv = yd[(i + u) * w + (j + v)];
                    mx += wg * xv;
                    my += wg * yv;
                    mxx += wg * xv * xv;
                    myy += wg * yv * yv;
                    mxy += wg * xv * yv;
                }
            const size_t o = static_cast<size_t>(i) * st.ow + j;
            st.mu_x[o] = mx;
            st.mu_y[o] = my;
            st.var_x[o] = mxx - mx * mx;
            st.var_y[o] = myy - my * my;
            st.cov_xy[o] = mxy - mx * my;
        }
    return st;
}

}  // namespace detail

struct SSIMComponents {
    BasicTensor<double> l, c, s;  // luminance, contrast, structure maps over window positions
};

// Per-window comparison maps of the three SSIM measurements.
template <typename S>
SSIMComponents ssim_components(const BasicTensor<S>& x, const BasicTensor<S>& y, const SSIMParams& p) {
    p.validate();
    detail::check_image_range(x, p.l_range, "ssim");
    detail::check_image_range(y, p.l_range, "ssim");
    auto st = detail::local_stats(x, y, p.window_size, p.window_sigma, "ssim");
    SSIMComponents out{BasicTensor<double>({st.oh, st.ow}), BasicTensor<double>({st.oh, st.ow}),
                       BasicTensor<double>({st.oh, st.ow})};
    for (size_t o = 0; o < st.mu_x.size(); ++o) {
        const double mx = st.mu_x[o], my = st.mu_y[o];
        const double sx = std::sqrt(std::max(0.0, st.var_x[o]));
        const double sy = std::sqrt(std::max(0.0, st.var_y[o]));
        out.l.data()[o] = (2.0 * mx * my + p.c1) / (mx * mx + my * my + p.c1);
        out.c.data()[o] = (2.0 * sx * sy + p.c2) / (sx * sx + sy * sy + p.c2);
        out.s.data()[o] = (st.cov_xy[o] + p.c3) / (sx * sy + p.c3);
    }
    return out;
}

// Mean SSIM via the component product l^alpha * c^beta * s^gamma.
template <typename S>
double ssim_from_components(const BasicTensor<S>& x, const BasicTensor<S>& y, const SSIMParams& p) {
    auto comp = ssim_components(x, y, p);
    double acc = 0.0;
    for (int64_t o = 0; o < comp.l.numel(); ++o) {
        double term;
        if (p.alpha == 1.0 && p.beta == 1.0 && p.gamma_exp == 1.0)
            term = comp.l.data()[o] * comp.c.data()[o] * comp.s.data()[o];
        else
            term = std::pow(comp.l.data()[o], p.alpha) * std::pow(comp.c.data()[o], p.beta) *
                   std::pow(comp.s.data()[o], p.gamma_exp);
        acc += term;
    }
    return acc / static_cast<double>(comp.l.numel());
}

// Mean SSIM via the closed form, valid under alpha=beta=gamma=1 and c3=c2/2.
template <typename S>
double ssim_closed_form(const BasicTensor<S>& x, const BasicTensor<S>& y, const SSIMParams& p) {
    p.validate();
    if (!p.collapsed_form())
        throw ConfigError("ssim: closed form requires alpha=beta=gamma=1 and c3=c2/2");
    detail::check_image_range(x, p.l_range, "ssim");
    detail::check_image_range(y, p.l_range, "ssim");
    auto st = detail::local_stats(x, y, p.window_size, p.window_sigma, "ssim");
    double acc = 0.0;
    for (size_t o = 0; o < st.mu_x.size(); ++o) {
        const double mx = st.mu_x[o], my = st.mu_y[o];
        const double num = (2.0 * mx * my + p.c1) * (2.0 * st.cov_xy[o] + p.c2);
        const double den = (mx * mx + my * my + p.c1) * (st.var_x[o] + st.var_y[o] + p.c2);
        acc += num / den;
    }
    return acc / static_cast<double>(st.mu_x.size());
}

template <typename S>
double ssim(const BasicTensor<S>& x, const BasicTensor<S>& y, const SSIMParams& p = SSIMParams()) {
    return p.collapsed_form() ? ssim_closed_form(x, y, p) : ssim_from_components(x, y, p);
}

// Mean SSIM over window positions whose value in `mask` is nonzero; mask is
// given over window positions (same extents as the component maps).
template <typename S>
double ssim_masked(const BasicTensor<S>& x, const BasicTensor<S>& y, const SSIMParams& p,
                   const BasicTensor<uint8_t>& mask) {
    auto comp = ssim_components(x, y, p);
    if (mask.shape() != comp.l.shape())
        throw ShapeError(detail::str("ssim_masked: mask shape ", detail::shape_str(mask.shape()),
                                     " vs component maps ", detail::shape_str(comp.l.shape())));
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t o = 0; o < comp.l.numel(); ++o) {
        if (!mask.data()[o]) continue;
        acc += comp.l.data()[o] * comp.c.data()[o] * comp.s.data()[o];
        ++count;
    }
    if (count == 0) throw ConfigError("ssim_masked: empty mask");
    return acc / static_cast<double>(count);
}

template <typename S>
double mse(const BasicTensor<S>& x, const BasicTensor<S>& y) {
    detail::check_same_shape(x, y, "mse");
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(x.data()[i]) - static_cast<double>(y.data()[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(x.numel());
}

// ---- receptive-field weight matrix (Gaussian importance map) --------------

template <typename S = float>
struct BasicWeightMatrix {
    TensorPtr<S> w;  // [H, W], non-negative; mean 1 under "mean1" normalization
    std::vector<std::array<double, 2>> centers;  // (row, col)
    double sigma_rf = 0.0;
    std::string combine = "max";  // "max" | "sum" across centers
    std::string norm = "mean1";   // "mean1" | "none"
};

using WeightMatrix = BasicWeightMatrix<float>;

template <typename S = float>
BasicWeightMatrix<S> make_weight_matrix(int64_t h, int64_t w,
                                        const std::vector<std::array<double, 2>>& centers, double sigma_rf,
                                        const std::string& combine = "max",
                                        const std::string& norm = "mean1") {
    if (h < 1 || w < 1) throw ConfigError("weight matrix: empty image");
    if (sigma_rf <= 0.0) throw ConfigError("weight matrix: sigma_rf must be > 0");
    if (centers.empty()) throw ConfigError("weight matrix: at least one center required");
    if (combine != "max" && combine != "sum")
        throw ConfigError(detail::str("weight matrix: unknown combine mode '", combine, "'"));
    if (norm != "mean1" && norm != "none")
        throw ConfigError(detail::str("weight matrix: unknown normalization '", norm, "'"));
    for (const auto& c : centers)
        if (c[0] < 0 || c[0] > static_cast<double>(h - 1) || c[1] < 0 || c[1] > static_cast<double>(w - 1))
            throw ConfigError(detail::str("weight matrix: center (", c[0], ",", c[1], ") outside ", h, "x",
                                          w, " image"));

    BasicWeightMatrix<S> wm;
    wm.centers = centers;
    wm.sigma_rf = sigma_rf;
    wm.combine = combine;
    wm.norm = norm;
    std::vector<double> buf(static_cast<size_t>(h) * w, 0.0);
    for (const auto& c : centers)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const double di = i - c[0], dj = j - c[1];
                const double v = std::exp(-(di * di + dj * dj) / (2.0 * sigma_rf * sigma_rf));
                double& cell = buf[static_cast<size_t>(i) * w + j];
                cell = combine == "max" ? std::max(cell, v) : cell + v;
            }
    if (norm == "mean1") {
        double m = 0.0;
        for (double v : buf) m += v;
        m /= static_cast<double>(buf.size());
        for (double& v : buf) v /= m;
    }
    wm.w = make_tensor<S>({h, w});
    for (size_t i = 0; i < buf.size(); ++i) wm.w->data()[i] = static_cast<S>(buf[i]);
    return wm;
}

template <typename S = float>
BasicWeightMatrix<S> make_weight_matrix(int64_t h, int64_t w, std::array<double, 2> center, double sigma_rf,
                                        const std::string& norm = "mean1") {
    return make_weight_matrix<S>(h, w, std::vector<std::array<double, 2>>{center}, sigma_rf, "max", norm);
}

// Uniform weights: weighted_mse with this collapses to plain mse.
template <typename S = float>
BasicWeightMatrix<S> uniform_weight_matrix(int64_t h, int64_t w) {
    BasicWeightMatrix<S> wm;
    wm.w = make_tensor<S>({h, w}, S(1));
    wm.sigma_rf = 0.0;
    wm.norm = "mean1";
    return wm;
}

// Window-position mask of the RF region: cells whose unnormalized Gaussian
// response (max across centers) is at least `threshold`, evaluated at window
// centers. Used for region-restricted SSIM evaluation.
template <typename S>
BasicTensor<uint8_t> rf_region_mask(const BasicWeightMatrix<S>& wm, int64_t h, int64_t w, int window_size,
                                    double threshold = 0.5) {
    const int64_t oh = h - window_size + 1, ow = w - window_size + 1;
    if (oh < 1 || ow < 1) throw ShapeError("rf_region_mask: window larger than image");
    if (wm.centers.empty()) throw ConfigError("rf_region_mask: weight matrix has no centers");
    BasicTensor<uint8_t> mask({oh, ow});
    const double half = (window_size - 1) / 2.0;
    for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
            const double pi = i + half, pj = j + half;
            double best = 0.0;
            for (const auto& c : wm.centers) {
                const double di = pi - c[0], dj = pj - c[1];
                best = std::max(best, std::exp(-(di * di + dj * dj) / (2.0 * wm.sigma_rf * wm.sigma_rf)));
            }
            mask.data()[static_cast<size_t>(i) * ow + j] = best >= threshold ? 1 : 0;
        }
    return mask;
}

template <typename S>
double weighted_mse(const BasicTensor<S>& x, const BasicTensor<S>& y, const BasicWeightMatrix<S>& wm) {
    detail::check_same_shape(x, y, "weighted_mse");
    auto [h, w] = detail::plane_dims(x, "weighted_mse");
    if (wm.w->dim(0) != h || wm.w->dim(1) != w)
        throw ShapeError(detail::str("weighted_mse: weight shape ", detail::shape_str(wm.w->shape()),
                                     " vs image ", h, "x", w));
    const S* xd = x.data().data();
    const S* yd = y.data().data();
    double acc = 0.0;
    for (int64_t i = 0; i < h * w; ++i) {
        const double d = static_cast<double>(xd[i]) - static_cast<double>(yd[i]);
        acc += static_cast<double>(wm.w->data()[i]) * d * d;
    }
    return acc / static_cast<double>(h * w);
}

// ---- differentiable graph versions ----------------------------------------

template <typename S = float>
TensorPtr<S> gaussian_window_tensor(int size, double sigma) {
    auto g = gaussian_window(size, sigma);
    std::vector<S> data(g.size());
    for (size_t i = 0; i < g.size(); ++i) data[i] = static_cast<S>(g[i]);
    return make_tensor<S>({1, 1, size, size}, std::move(data));
}

namespace detail {

template <typename S>
void check_batched_images(const TensorPtr<S>& x, const TensorPtr<S>& y, const char* name) {
    if (x->rank() != 4 || x->dim(1) != 1)
        throw ShapeError(str(name, ": expected [B,1,H,W], got ", shape_str(x->shape())));
    check_same_shape(*x, *y, name);
}

}  // namespace detail

// Mean SSIM over batch and window positions, closed form, differentiable in x_hat.
template <typename S>
TensorPtr<S> ssim_op(Graph<S>* g, const TensorPtr<S>& x_hat, const TensorPtr<S>& y, const SSIMParams& p) {
    p.validate();
    if (!p.collapsed_form())
        throw ConfigError("ssim_op: the training path implements the collapsed form "
                          "(alpha=beta=gamma=1, c3=c2/2)");
    detail::check_batched_images(x_hat, y, "ssim_op");
    const int64_t h = x_hat->dim(2), w = x_hat->dim(3);
    if (p.window_size > h || p.window_size > w)
        throw ShapeError(detail::str("ssim_op: window ", p.window_size, " larger than image ", h, "x", w));

    auto win = gaussian_window_tensor<S>(p.window_size, p.window_sigma);
    auto c1 = make_tensor<S>({1}, static_cast<S>(p.c1));
    auto c2 = make_tensor<S>({1}, static_cast<S>(p.c2));

    auto mu_x = conv2d(g, x_hat, win, 1, 0);
    auto mu_y = conv2d(g, y, win, 1, 0);
    auto mu_xx = mul(g, mu_x, mu_x);
    auto mu_yy = mul(g, mu_y, mu_y);
    auto mu_xy = mul(g, mu_x, mu_y);
    auto var_x = sub(g, conv2d(g, mul(g, x_hat, x_hat), win, 1, 0), mu_xx);
    auto var_y = sub(g, conv2d(g, mul(g, y, y), win, 1, 0), mu_yy);
    auto cov_xy = sub(g, conv2d(g, mul(g, x_hat, y), win, 1, 0), mu_xy);

    auto num = mul(g, add(g, affine(g, mu_xy, 2.0, 0.0), c1), add(g, affine(g, cov_xy, 2.0, 0.0), c2));
    auto den = mul(g, add(g, add(g, mu_xx, mu_yy), c1), add(g, add(g, var_x, var_y), c2));
    return mean(g, div(g, num, den));
}

// Mean over pixels of w(i,j) * (x_hat - y)^2; weight broadcasts over batch.
template <typename S>
TensorPtr<S> weighted_mse_op(Graph<S>* g, const TensorPtr<S>& x_hat, const TensorPtr<S>& y,
                             const TensorPtr<S>& weight_hw) {
    detail::check_batched_images(x_hat, y, "weighted_mse_op");
    auto d = sub(g, x_hat, y);
    auto d2 = mul(g, d, d);
    if (weight_hw) {
        if (weight_hw->rank() != 2 || weight_hw->dim(0) != x_hat->dim(2) ||
            weight_hw->dim(1) != x_hat->dim(3))
            throw ShapeError(detail::str("weighted_mse_op: weight shape ",
                                         detail::shape_str(weight_hw->shape()), " vs image ",
                                         x_hat->dim(2), "x", x_hat->dim(3)));
        d2 = mul(g, d2, reshape(static_cast<Graph<S>*>(nullptr), weight_hw,
                                {1, 1, weight_hw->dim(0), weight_hw->dim(1)}));
    }
    return mean(g, d2);
}

template <typename S = float>
struct BasicLossConfig {
    double mu = 0.5;
    SSIMParams ssim;
    BasicWeightMatrix<S> weight;  // empty w -> uniform weighting

    void validate() const {
        if (mu < 0.0 || mu > 1.0) throw ConfigError(detail::str("loss: mu must be in [0,1], got ", mu));
        ssim.validate();
    }
};

using LossConfig = BasicLossConfig<float>;

// L = mu * (1 - SSIM(x_hat, y)) + (1 - mu) * weighted MSE. Gradient flows to x_hat.
template <typename S>
TensorPtr<S> composite_loss(Graph<S>* g, const TensorPtr<S>& x_hat, const TensorPtr<S>& y,
                            const BasicLossConfig<S>& cfg) {
    cfg.validate();
    detail::check_batched_images(x_hat, y, "composite_loss");
    TensorPtr<S> total;
    if (cfg.mu > 0.0) {
        // mu * (1 - ssim)
        total = affine(g, ssim_op(g, x_hat, y, cfg.ssim), -cfg.mu, cfg.mu);
    }
    if (cfg.mu < 1.0) {
        auto wmse = weighted_mse_op(g, x_hat, y, cfg.weight.w);
        auto scaled = affine(g, wmse, 1.0 - cfg.mu, 0.0);
        total = total ? add(g, total, scaled) : scaled;
    }
    return total;
}

}  // namespace s2i
