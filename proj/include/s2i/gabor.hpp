#pragma once

// Analytic Gabor kernels and the multi-orientation multi-scale bank used as
// the decoder's first convolution layer.

#include <cmath>
#include <numbers>
#include <vector>

#include "s2i/tensor.hpp"

namespace s2i {

struct GaborParams {
    double theta = 0.0;    // orientation, radians
    double lambda = 4.0;   // wavelength, pixels
    double sigma = 2.24;   // Gaussian envelope std, pixels
    double gamma = 0.5;    // spatial aspect ratio
    double psi = 0.0;      // phase offset, radians
    int size = 7;          // odd kernel extent, pixels

    void validate() const {
        if (size < 3 || size % 2 == 0)
            throw ConfigError(detail::str("gabor: kernel size must be odd and >= 3, got ", size));
        if (lambda <= 0.0) throw ConfigError("gabor: lambda must be > 0");
        if (sigma <= 0.0) throw ConfigError("gabor: sigma must be > 0");
        if (gamma <= 0.0) throw ConfigError("gabor: gamma must be > 0");
    }
};

struct GaborBankConfig {
    int n_orientations = 4;
    int n_scales = 2;
    int size = 7;
    double base_lambda = 4.0;
    double lambda_ratio = 2.0;
    double psi = 0.0;
    double gamma = 0.5;
    bool trainable = false;
};

// Raw samples of g(x,y) = exp(-(x'^2 + gamma^2 y'^2)/(2 sigma^2)) * cos(2 pi x'/lambda + psi)
// with x' = x cos(theta) + y sin(theta), y' = -x sin(theta) + y cos(theta).
// Row index is y, column index is x, both centered on the kernel middle.
inline std::vector<double> gabor_samples(const GaborParams& p) {
    p.validate();
    const int half = p.size / 2;
    std::vector<double> k(static_cast<size_t>(p.size) * p.size);
    const double ct = std::cos(p.theta), st = std::sin(p.theta);
    for (int r = 0; r < p.size; ++r) {
        const double y = r - half;
        for (int c = 0; c < p.size; ++c) {
            const double x = c - half;
            const double xp = x * ct + y * st;
            const double yp = -x * st + y * ct;
            const double env = std::exp(-(xp * xp + p.gamma * p.gamma * yp * yp) / (2.0 * p.sigma * p.sigma));
            const double carrier = std::cos(2.0 * std::numbers::pi * xp / p.lambda + p.psi);
            k[static_cast<size_t>(r) * p.size + c] = env * carrier;
        }
    }
    return k;
}

// DC-removed, L2-normalized kernel. Pure function of params.
template <typename S = float>
TensorPtr<S> make_gabor_kernel(const GaborParams& p) {
    std::vector<double> k = gabor_samples(p);
    double mean = 0.0;
    for (double v : k) mean += v;
    mean /= static_cast<double>(k.size());
    double norm2 = 0.0;
    for (double& v : k) {
        v -= mean;
        norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (norm < 1e-12)
        throw ConfigError("gabor: degenerate kernel (zero after DC removal), check lambda vs size");
    std::vector<S> out(k.size());
    for (size_t i = 0; i < k.size(); ++i) out[i] = static_cast<S>(k[i] / norm);
    return make_tensor<S>({p.size, p.size}, std::move(out));
}

template <typename S = float>
struct BasicGaborBank {
    int n_orientations = 0;
    int n_scales = 0;
    TensorPtr<S> kernels;  // [n_orientations * n_scales, 1, size, size]
    std::vector<GaborParams> params;

    int count() const { return n_orientations * n_scales; }
    int size() const { return params.empty() ? 0 : params.front().size; }
};

using GaborBank = BasicGaborBank<float>;

// Scale-major, orientation-minor ordering: kernel index = s * n_orientations + o.
// theta_o = o*pi/n_orientations, lambda_s = base_lambda * ratio^s, sigma = 0.56*lambda.
template <typename S = float>
BasicGaborBank<S> make_gabor_bank(const GaborBankConfig& cfg) {
    if (cfg.n_orientations < 1 || cfg.n_scales < 1)
        throw ConfigError(detail::str("gabor bank: counts must be >= 1, got ", cfg.n_orientations,
                                      " orientations, ", cfg.n_scales, " scales"));
    BasicGaborBank<S> bank;
    bank.n_orientations = cfg.n_orientations;
    bank.n_scales = cfg.n_scales;
    const int n = cfg.n_orientations * cfg.n_scales;
    bank.kernels = make_tensor<S>({n, 1, cfg.size, cfg.size});
    bank.params.reserve(static_cast<size_t>(n));
    for (int s = 0; s < cfg.n_scales; ++s) {
        const double lambda = cfg.base_lambda * std::pow(cfg.lambda_ratio, s);
        for (int o = 0; o < cfg.n_orientations; ++o) {
            GaborParams p;
            p.theta = o * std::numbers::pi / cfg.n_orientations;
            p.lambda = lambda;
            p.sigma = 0.56 * lambda;  // one-octave bandwidth convention
            p.gamma = cfg.gamma;
            p.psi = cfg.psi;
            p.size = cfg.size;
            auto k = make_gabor_kernel<S>(p);
            const int idx = s * cfg.n_orientations + o;
            std::copy(k->data().begin(), k->data().end(),
                      bank.kernels->data().begin() + static_cast<size_t>(idx) * cfg.size * cfg.size);
            bank.params.push_back(p);
        }
    }
    return bank;
}

template <typename S = float>
BasicGaborBank<S> make_gabor_bank(int n_orientations, int n_scales, int size, double base_lambda,
                                  double lambda_ratio) {
    GaborBankConfig cfg;
    cfg.n_orientations = n_orientations;
    cfg.n_scales = n_scales;
    cfg.size = size;
    cfg.base_lambda = base_lambda;
    cfg.lambda_ratio = lambda_ratio;
    return make_gabor_bank<S>(cfg);
}

// First-layer conv weights [cout, cin, size, size]. Bank kernels tile the
// output channels (index o uses bank kernel o % count) and are replicated
// over input channels scaled by 1/cin, so the per-channel response scale is
// independent of cin. cin == 1 reproduces the bank kernels exactly.
// trainable=false keeps the weights out of optimizer updates.
template <typename S = float>
TensorPtr<S> init_first_layer(const BasicGaborBank<S>& bank, int cin, int cout, bool trainable) {
    const int n = bank.count();
    const int sz = bank.size();
    if (n == 0 || !bank.kernels) throw ConfigError("init_first_layer: empty bank");
    if (cin < 1 || cout < 1) throw ConfigError("init_first_layer: channel counts must be >= 1");
    if (cout % n != 0)
        throw ConfigError(detail::str("init_first_layer: out channels ", cout,
                                      " not a multiple of bank size ", n));
    auto w = make_tensor<S>({cout, cin, sz, sz});
    const S scale = static_cast<S>(1.0 / cin);
    const size_t ksz = static_cast<size_t>(sz) * sz;
    for (int o = 0; o < cout; ++o) {
        const S* src = bank.kernels->data().data() + static_cast<size_t>(o % n) * ksz;
        for (int c = 0; c < cin; ++c) {
            S* dst = w->data().data() + (static_cast<size_t>(o) * cin + c) * ksz;
            for (size_t i = 0; i < ksz; ++i) dst[i] = src[i] * scale;
        }
    }
    w->set_requires_grad(trainable);
    return w;
}

}  // namespace s2i
