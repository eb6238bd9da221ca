#pragma once

// Spike-train ingestion (CSV timestamps, binning, deterministic splits),
// image target preparation, and a synthetic linear-nonlinear-Poisson retina
// that produces paired (spike, image) data at desk scale.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "s2i/gabor.hpp"
#include "s2i/json_util.hpp"
#include "s2i/tensor.hpp"

namespace s2i {

// ---- PGM (P5, 8-bit) -------------------------------------------------------

template <typename S = float>
TensorPtr<S> load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(detail::str("cannot open ", path));
    auto next_token = [&](const char* what) {
        std::string tok;
        int ch;
        while ((ch = in.get()) != EOF) {
            if (ch == '#') {
                while ((ch = in.get()) != EOF && ch != '\n') {
                }
                continue;
            }
            if (!std::isspace(ch)) {
                tok.push_back(static_cast<char>(ch));
                while ((ch = in.peek()) != EOF && !std::isspace(ch) && ch != '#')
                    tok.push_back(static_cast<char>(in.get()));
                return tok;
            }
        }
        throw IoError(detail::str(path, ": truncated header, expected ", what));
    };
    if (next_token("magic") != "P5") throw IoError(detail::str(path, ": not a binary PGM (P5) file"));
    int64_t w, h, maxval;
    try {
        w = std::stoll(next_token("width"));
        h = std::stoll(next_token("height"));
        maxval = std::stoll(next_token("maxval"));
    } catch (const std::exception&) {
        throw IoError(detail::str(path, ": malformed PGM header"));
    }
    if (w < 1 || h < 1) throw IoError(detail::str(path, ": bad dimensions ", w, "x", h));
    if (maxval != 255) throw IoError(detail::str(path, ": only maxval 255 supported, got ", maxval));
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(in.gcount()) != raw.size())
        throw IoError(detail::str(path, ": truncated pixel data"));
    auto img = make_tensor<S>({h, w});
    for (size_t i = 0; i < raw.size(); ++i) img->data()[i] = static_cast<S>(raw[i] / 255.0);
    return img;
}

template <typename S>
void save_pgm(const BasicTensor<S>& img, const std::string& path) {
    auto [h, w] = detail::plane_dims(img, "save_pgm");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(detail::str("cannot open ", path, " for writing"));
    out << "P5\n" << w << " " << h << "\n255\n";
    const S* d = img.data().data() + (img.numel() - h * w);
    std::vector<unsigned char> raw(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < raw.size(); ++i) {
        const double v = std::clamp(static_cast<double>(d[i]), 0.0, 1.0);
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError(detail::str("write failed: ", path));
}

// ---- spike events ----------------------------------------------------------

struct SpikeEventFile {
    std::vector<int64_t> neuron_ids;               // original ids, one per row index
    std::vector<std::vector<double>> timestamps;   // seconds, non-decreasing per neuron
    double duration = 0.0;                          // seconds

    int64_t n_neurons() const { return static_cast<int64_t>(timestamps.size()); }
    int64_t total_events() const {
        int64_t n = 0;
        for (const auto& t : timestamps) n += static_cast<int64_t>(t.size());
        return n;
    }
};

// CSV format: header "neuron_id,timestamp_s", one event per row.
// expected_neurons > 0 pins the id space to [0, expected_neurons) so silent
// neurons keep their rows; 0 compacts the ids found in the file (sorted).
// duration_s < 0 falls back to the last timestamp.
inline SpikeEventFile load_csv_events(const std::string& path, int64_t expected_neurons = 0,
                                      double duration_s = -1.0) {
    std::ifstream in(path);
    if (!in) throw IoError(detail::str("cannot open ", path));
    std::string line;
    auto trim = [](std::string s) {
        while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
        return s;
    };
    if (!std::getline(in, line) || trim(line) != "neuron_id,timestamp_s")
        throw IoError(detail::str(path, ":1: expected header 'neuron_id,timestamp_s'"));

    std::vector<std::pair<int64_t, double>> events;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos)
            throw IoError(detail::str(path, ":", line_no, ": expected 'neuron_id,timestamp_s' row"));
        int64_t id;
        double ts;
        try {
            size_t used;
            id = std::stoll(line.substr(0, comma), &used);
            if (used != comma) throw std::invalid_argument("trailing");
            ts = std::stod(line.substr(comma + 1), &used);
            if (used != line.size() - comma - 1) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw IoError(detail::str(path, ":", line_no, ": malformed row '", line, "'"));
        }
        if (ts < 0.0) throw IoError(detail::str(path, ":", line_no, ": negative timestamp ", ts));
        if (expected_neurons > 0 && (id < 0 || id >= expected_neurons))
            throw IoError(detail::str(path, ":", line_no, ": neuron id ", id, " outside [0,",
                                      expected_neurons, ")"));
        events.emplace_back(id, ts);
    }

    SpikeEventFile out;
    if (expected_neurons > 0) {
        out.timestamps.resize(static_cast<size_t>(expected_neurons));
        out.neuron_ids.resize(static_cast<size_t>(expected_neurons));
        for (int64_t i = 0; i < expected_neurons; ++i) out.neuron_ids[static_cast<size_t>(i)] = i;
        for (const auto& [id, ts] : events) out.timestamps[static_cast<size_t>(id)].push_back(ts);
    } else {
        std::vector<int64_t> ids;
        for (const auto& [id, ts] : events) ids.push_back(id);
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        out.neuron_ids = ids;
        out.timestamps.resize(ids.size());
        for (const auto& [id, ts] : events) {
            const auto row = std::lower_bound(ids.begin(), ids.end(), id) - ids.begin();
            out.timestamps[static_cast<size_t>(row)].push_back(ts);
        }
    }
    double max_ts = 0.0;
    for (auto& t : out.timestamps) {
        std::sort(t.begin(), t.end());
        if (!t.empty()) max_ts = std::max(max_ts, t.back());
    }
    if (duration_s >= 0.0) {
        if (max_ts > duration_s)
            throw IoError(detail::str(path, ": timestamp ", max_ts, " beyond stated duration ", duration_s));
        out.duration = duration_s;
    } else {
        out.duration = max_ts;
    }
    return out;
}

inline void save_csv_events(const SpikeEventFile& events, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError(detail::str("cannot open ", path, " for writing"));
    out << "neuron_id,timestamp_s\n";
    out.precision(9);
    for (size_t n = 0; n < events.timestamps.size(); ++n)
        for (double ts : events.timestamps[n]) out << events.neuron_ids[n] << "," << ts << "\n";
    if (!out) throw IoError(detail::str("write failed: ", path));
}

// counts[n,b] = #timestamps of neuron n in [t0 + b*bin, t0 + (b+1)*bin), right edge exclusive.
template <typename S = float>
TensorPtr<S> bin_spikes(const SpikeEventFile& events, double bin_ms, double window_ms, double t0_s = 0.0) {
    if (bin_ms <= 0.0) throw ConfigError(detail::str("bin_spikes: bin_ms must be > 0, got ", bin_ms));
    const double ratio = window_ms / bin_ms;
    const int64_t bins = std::llround(ratio);
    if (bins < 1 || std::abs(ratio - static_cast<double>(bins)) > 1e-9)
        throw ConfigError(detail::str("bin_spikes: window ", window_ms, " ms is not a multiple of bin ",
                                      bin_ms, " ms"));
    const double bin_s = bin_ms / 1000.0;
    const double window_s = window_ms / 1000.0;
    if (t0_s < 0.0 || t0_s + window_s > events.duration + 1e-9)
        throw RangeError(detail::str("bin_spikes: window [", t0_s, ",", t0_s + window_s,
                                     ") s exceeds recording duration ", events.duration, " s"));

    const int64_t n = events.n_neurons();
    auto counts = make_tensor<S>({n, bins});
    for (int64_t row = 0; row < n; ++row)
        for (double ts : events.timestamps[static_cast<size_t>(row)]) {
            int64_t b = static_cast<int64_t>(std::floor((ts - t0_s) / bin_s));
            // nudge onto exact half-open interval semantics at bin edges
            while (b > -1 && ts < t0_s + static_cast<double>(b) * bin_s) --b;
            while (ts >= t0_s + static_cast<double>(b + 1) * bin_s) ++b;
            if (b < 0 || b >= bins) continue;
            counts->data()[static_cast<size_t>(row * bins + b)] += S(1);
        }
    return counts;
}

// ---- paired dataset --------------------------------------------------------

template <typename S = float>
struct BasicPairedDataset {
    std::vector<TensorPtr<S>> spikes;   // each [N, T]
    std::vector<TensorPtr<S>> targets;  // each [H, W]
    std::vector<std::string> ids;
    std::string split_tag;

    size_t size() const { return ids.size(); }
};

using PairedDataset = BasicPairedDataset<float>;

namespace detail {

// Fisher-Yates with explicit modulo draws: identical permutations on every
// platform for a given seed.
inline std::vector<size_t> seeded_permutation(size_t n, uint64_t seed) {
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    std::mt19937_64 rng(seed);
    for (size_t i = n; i > 1; --i) {
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

}  // namespace detail

template <typename S>
std::pair<BasicPairedDataset<S>, BasicPairedDataset<S>> split(const BasicPairedDataset<S>& dataset,
                                                              double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw ConfigError(detail::str("split: fraction must be in (0,1), got ", fraction));
    const size_t n = dataset.size();
    const auto perm = detail::seeded_permutation(n, seed);
    const size_t n_train = static_cast<size_t>(std::floor(static_cast<double>(n) * fraction));
    BasicPairedDataset<S> train, test;
    train.split_tag = "train";
    test.split_tag = "test";
    for (size_t i = 0; i < n; ++i) {
        auto& dst = i < n_train ? train : test;
        dst.spikes.push_back(dataset.spikes[perm[i]]);
        dst.targets.push_back(dataset.targets[perm[i]]);
        dst.ids.push_back(dataset.ids[perm[i]]);
    }
    return {std::move(train), std::move(test)};
}

// Permutes items; the spike<->target pairing within an item is preserved.
template <typename S>
BasicPairedDataset<S> shuffle_frames(const BasicPairedDataset<S>& dataset, uint64_t seed) {
    const auto perm = detail::seeded_permutation(dataset.size(), seed);
    BasicPairedDataset<S> out;
    out.split_tag = dataset.split_tag;
    for (size_t i = 0; i < perm.size(); ++i) {
        out.spikes.push_back(dataset.spikes[perm[i]]);
        out.targets.push_back(dataset.targets[perm[i]]);
        out.ids.push_back(dataset.ids[perm[i]]);
    }
    return out;
}

// ---- image preparation -----------------------------------------------------

// Bilinear resize with half-pixel sample centers; output stays inside the
// input's value hull, so [0,1] images remain [0,1].
template <typename S>
TensorPtr<S> prepare_image(const BasicTensor<S>& raw, int64_t out_h, int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw ConfigError("prepare_image: output extents must be >= 1");
    auto [h, w] = detail::plane_dims(raw, "prepare_image");
    const S* src = raw.data().data() + (raw.numel() - h * w);
    auto out = make_tensor<S>({out_h, out_w});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (int64_t i = 0; i < out_h; ++i) {
        const double fy = std::clamp((i + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int64_t y0 = static_cast<int64_t>(std::floor(fy));
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (int64_t j = 0; j < out_w; ++j) {
            const double fx = std::clamp((j + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int64_t x0 = static_cast<int64_t>(std::floor(fx));
            const int64_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
            const double bot = (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
            out->data()[static_cast<size_t>(i * out_w + j)] = static_cast<S>((1.0 - wy) * top + wy * bot);
        }
    }
    return out;
}

// ---- synthetic retina ------------------------------------------------------

struct SynthNeuron {
    double row = 0.0, col = 0.0;  // receptive-field center, image coordinates
    double sigma = 4.0;           // Gaussian envelope std, pixels
    double theta = 0.0;           // preferred orientation, radians
    double lambda = 8.0;          // preferred wavelength, pixels
    double psi = 0.0;
    double aspect = 0.5;
    double gain = 60.0;           // Hz per unit rectified response
    double baseline_hz = 4.0;
};

struct SynthConfig {
    int64_t n_neurons = 36;
    int64_t img_h = 32, img_w = 32;
    double bin_ms = 5.0;
    double window_ms = 105.0;
    uint64_t seed = 1;
    std::vector<SynthNeuron> neurons;  // filled by default_synth_config when empty

    void validate() const {
        if (n_neurons < 1) throw ConfigError("synth: n_neurons must be >= 1");
        if (static_cast<int64_t>(neurons.size()) != n_neurons)
            throw ConfigError(detail::str("synth: neuron list has ", neurons.size(), " entries, expected ",
                                          n_neurons));
        if (img_h < 4 || img_w < 4) throw ConfigError("synth: image too small");
        for (const auto& nr : neurons) {
            if (nr.row < 0 || nr.row > static_cast<double>(img_h - 1) || nr.col < 0 ||
                nr.col > static_cast<double>(img_w - 1))
                throw ConfigError(detail::str("synth: rf center (", nr.row, ",", nr.col,
                                              ") outside image"));
            if (nr.sigma <= 0 || nr.lambda <= 0 || nr.aspect <= 0)
                throw ConfigError("synth: sigma, lambda, aspect must be > 0");
            if (nr.gain < 0 || nr.baseline_hz < 0) throw ConfigError("synth: rates must be >= 0");
        }
    }
};

// Jittered grid of Gabor-tuned neurons covering the image; orientations cycle
// through multiples of pi/4 and the envelope std matches the loss module's
// sigma_rf default (H/6).
inline SynthConfig default_synth_config(int64_t n_neurons, int64_t img_h, int64_t img_w, uint64_t seed) {
    SynthConfig cfg;
    cfg.n_neurons = n_neurons;
    cfg.img_h = img_h;
    cfg.img_w = img_w;
    cfg.seed = seed;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(n_neurons))));
    const int64_t rows = (n_neurons + cols - 1) / cols;
    const double cell_h = static_cast<double>(img_h) / static_cast<double>(rows);
    const double cell_w = static_cast<double>(img_w) / static_cast<double>(cols);
    std::uniform_real_distribution<double> jitter(-0.25, 0.25);
    const double sigma = static_cast<double>(std::min(img_h, img_w)) / 6.0;
    for (int64_t i = 0; i < n_neurons; ++i) {
        SynthNeuron nr;
        const int64_t r = i / cols, c = i % cols;
        nr.row = std::clamp((r + 0.5 + jitter(rng)) * cell_h, 0.0, static_cast<double>(img_h - 1));
        nr.col = std::clamp((c + 0.5 + jitter(rng)) * cell_w, 0.0, static_cast<double>(img_w - 1));
        nr.sigma = sigma;
        nr.theta = static_cast<double>(i % 4) * std::numbers::pi / 4.0;
        nr.lambda = 2.0 * sigma;
        nr.psi = 0.0;
        nr.aspect = 0.5;
        cfg.neurons.push_back(nr);
    }
    return cfg;
}

namespace detail {

// Clipped-to-image Gabor receptive field, re-centered to zero mean and unit
// L2 norm over its clipped support, so constant images drive no response.
struct RfKernel {
    int64_t r0, c0, h, w;
    std::vector<double> k;
};

inline RfKernel make_rf_kernel(const SynthNeuron& nr, int64_t img_h, int64_t img_w) {
    const int64_t half = static_cast<int64_t>(std::ceil(2.5 * nr.sigma));
    const int64_t cr = static_cast<int64_t>(std::llround(nr.row));
    const int64_t cc = static_cast<int64_t>(std::llround(nr.col));
    RfKernel rf;
    rf.r0 = std::max<int64_t>(0, cr - half);
    rf.c0 = std::max<int64_t>(0, cc - half);
    const int64_t r1 = std::min(img_h - 1, cr + half);
    const int64_t c1 = std::min(img_w - 1, cc + half);
    rf.h = r1 - rf.r0 + 1;
    rf.w = c1 - rf.c0 + 1;
    rf.k.resize(static_cast<size_t>(rf.h) * rf.w);
    const double ct = std::cos(nr.theta), st = std::sin(nr.theta);
    double mean = 0.0;
    for (int64_t i = 0; i < rf.h; ++i)
        for (int64_t j = 0; j < rf.w; ++j) {
            const double y = static_cast<double>(rf.r0 + i) - nr.row;
            const double x = static_cast<double>(rf.c0 + j) - nr.col;
            const double xp = x * ct + y * st;
            const double yp = -x * st + y * ct;
            const double env =
                std::exp(-(xp * xp + nr.aspect * nr.aspect * yp * yp) / (2.0 * nr.sigma * nr.sigma));
            const double v = env * std::cos(2.0 * std::numbers::pi * xp / nr.lambda + nr.psi);
            rf.k[static_cast<size_t>(i) * rf.w + j] = v;
            mean += v;
        }
    mean /= static_cast<double>(rf.k.size());
    double norm2 = 0.0;
    for (double& v : rf.k) {
        v -= mean;
        norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (norm > 1e-12)
        for (double& v : rf.k) v /= norm;
    return rf;
}

}  // namespace detail

// Deterministic firing rate (Hz) of one synthetic neuron viewing an image.
template <typename S>
double synth_rate(const BasicTensor<S>& image, const SynthNeuron& nr, int64_t img_h, int64_t img_w) {
    const auto rf = detail::make_rf_kernel(nr, img_h, img_w);
    const S* d = image.data().data() + (image.numel() - img_h * img_w);
    double resp = 0.0;
    for (int64_t i = 0; i < rf.h; ++i)
        for (int64_t j = 0; j < rf.w; ++j)
            resp += rf.k[static_cast<size_t>(i) * rf.w + j] *
                    static_cast<double>(d[(rf.r0 + i) * img_w + (rf.c0 + j)]);
    return nr.baseline_hz + nr.gain * std::max(0.0, resp);
}

template <typename S = float>
struct SynthDataset {
    BasicPairedDataset<S> data;
    std::vector<SpikeEventFile> events;  // one per item, aligned with data
    SynthConfig config;
};

// Linear-nonlinear-Poisson generation: per neuron, rate = baseline + gain *
// relu(<rf kernel, image>); per-bin counts ~ Poisson(rate * bin), realized as
// uniformly placed timestamps inside the bin. Fixed function of (images, cfg, seed).
template <typename S>
SynthDataset<S> synth_generate(const std::vector<TensorPtr<S>>& images, const SynthConfig& cfg) {
    cfg.validate();
    SynthDataset<S> out;
    out.config = cfg;
    const int64_t bins = std::llround(cfg.window_ms / cfg.bin_ms);
    if (bins < 1 || std::abs(cfg.window_ms / cfg.bin_ms - static_cast<double>(bins)) > 1e-9)
        throw ConfigError("synth: window_ms must be a positive multiple of bin_ms");
    const double bin_s = cfg.bin_ms / 1000.0;
    const double window_s = cfg.window_ms / 1000.0;

    std::vector<detail::RfKernel> rfs;
    rfs.reserve(cfg.neurons.size());
    for (const auto& nr : cfg.neurons) rfs.push_back(detail::make_rf_kernel(nr, cfg.img_h, cfg.img_w));

    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    char id_buf[32];

    for (size_t idx = 0; idx < images.size(); ++idx) {
        const auto& img = images[idx];
        {
            auto [h, w] = detail::plane_dims(*img, "synth_generate");
            if (h != cfg.img_h || w != cfg.img_w)
                throw ShapeError(detail::str("synth: image ", idx, " is ", h, "x", w, ", expected ",
                                             cfg.img_h, "x", cfg.img_w));
        }
        SpikeEventFile ev;
        ev.duration = window_s;
        ev.timestamps.resize(static_cast<size_t>(cfg.n_neurons));
        ev.neuron_ids.resize(static_cast<size_t>(cfg.n_neurons));
        auto counts = make_tensor<S>({cfg.n_neurons, bins});
        const S* d = img->data().data() + (img->numel() - cfg.img_h * cfg.img_w);
        for (int64_t n = 0; n < cfg.n_neurons; ++n) {
            ev.neuron_ids[static_cast<size_t>(n)] = n;
            const auto& rf = rfs[static_cast<size_t>(n)];
            double resp = 0.0;
            for (int64_t i = 0; i < rf.h; ++i)
                for (int64_t j = 0; j < rf.w; ++j)
                    resp += rf.k[static_cast<size_t>(i) * rf.w + j] *
                            static_cast<double>(d[(rf.r0 + i) * cfg.img_w + (rf.c0 + j)]);
            const auto& nr = cfg.neurons[static_cast<size_t>(n)];
            const double rate = nr.baseline_hz + nr.gain * std::max(0.0, resp);
            std::poisson_distribution<int> pois(rate * bin_s);
            auto& ts = ev.timestamps[static_cast<size_t>(n)];
            for (int64_t b = 0; b < bins; ++b) {
                const int k = rate > 0.0 ? pois(rng) : 0;
                counts->data()[static_cast<size_t>(n * bins + b)] = static_cast<S>(k);
                const double lo = static_cast<double>(b) * bin_s;
                for (int e = 0; e < k; ++e) ts.push_back(lo + unit(rng) * bin_s);
            }
            std::sort(ts.begin(), ts.end());
        }
        std::snprintf(id_buf, sizeof(id_buf), "img%05zu", idx);
        out.data.spikes.push_back(counts);
        out.data.targets.push_back(img);
        out.data.ids.emplace_back(id_buf);
        out.events.push_back(std::move(ev));
    }
    return out;
}

// ---- procedural stimuli ----------------------------------------------------

// Structured grayscale test images: smooth background plus a Gabor-windowed
// grating patch and a couple of blobs, normalized to [0,1]. Gives the bank
// orientation content and the losses local structure to discriminate.
template <typename S = float>
std::vector<TensorPtr<S>> procedural_stimuli(int64_t n, int64_t h, int64_t w, uint64_t seed) {
    std::vector<TensorPtr<S>> out;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int64_t idx = 0; idx < n; ++idx) {
        std::vector<double> img(static_cast<size_t>(h) * w, 0.0);
        // smooth ramp background
        const double gx = unit(rng) * 2.0 - 1.0, gy = unit(rng) * 2.0 - 1.0, g0 = unit(rng);
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
                img[static_cast<size_t>(i) * w + j] =
                    g0 + 0.3 * (gx * j / static_cast<double>(w) + gy * i / static_cast<double>(h));
        // oriented grating patch
        const double theta = std::floor(unit(rng) * 4.0) * std::numbers::pi / 4.0;
        const double lambda = 4.0 + unit(rng) * 6.0;
        const double phase = unit(rng) * 2.0 * std::numbers::pi;
        const double pr = unit(rng) * (h - 1), pc = unit(rng) * (w - 1);
        const double psig = 0.18 * std::min(h, w) + unit(rng) * 0.12 * std::min(h, w);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const double dy = i - pr, dx = j - pc;
                const double env = std::exp(-(dx * dx + dy * dy) / (2.0 * psig * psig));
                const double xp = dx * ct + dy * st;
                img[static_cast<size_t>(i) * w + j] +=
                    0.5 * env * std::sin(2.0 * std::numbers::pi * xp / lambda + phase);
            }
        // blobs
        const int blobs = 1 + static_cast<int>(unit(rng) * 2.0);
        for (int bidx = 0; bidx < blobs; ++bidx) {
            const double br = unit(rng) * (h - 1), bc = unit(rng) * (w - 1);
            const double bs = 0.05 * std::min(h, w) + unit(rng) * 0.1 * std::min(h, w);
            const double amp = unit(rng) - 0.5;
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    const double dy = i - br, dx = j - bc;
                    img[static_cast<size_t>(i) * w + j] +=
                        amp * std::exp(-(dx * dx + dy * dy) / (2.0 * bs * bs));
                }
        }
        double lo = img[0], hi = img[0];
        for (double v : img) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double span = hi - lo > 1e-9 ? hi - lo : 1.0;
        auto t = make_tensor<S>({h, w});
        for (size_t i = 0; i < img.size(); ++i) t->data()[i] = static_cast<S>((img[i] - lo) / span);
        out.push_back(t);
    }
    return out;
}

// ---- dataset manifest ------------------------------------------------------

inline Json synth_neuron_to_json(const SynthNeuron& nr) {
    return Json{{"row", nr.row},       {"col", nr.col},   {"sigma", nr.sigma},
                {"theta", nr.theta},   {"lambda", nr.lambda}, {"psi", nr.psi},
                {"aspect", nr.aspect}, {"gain", nr.gain}, {"baseline_hz", nr.baseline_hz}};
}

inline SynthNeuron synth_neuron_from_json(const Json& j, const std::string& where) {
    jsonio::check_keys(j, {"row", "col", "sigma", "theta", "lambda", "psi", "aspect", "gain",
                           "baseline_hz"}, where);
    SynthNeuron nr;
    nr.row = jsonio::get<double>(j, "row", where);
    nr.col = jsonio::get<double>(j, "col", where);
    nr.sigma = jsonio::get<double>(j, "sigma", where);
    nr.theta = jsonio::get<double>(j, "theta", where);
    nr.lambda = jsonio::get<double>(j, "lambda", where);
    nr.psi = jsonio::get_or<double>(j, "psi", 0.0, where);
    nr.aspect = jsonio::get_or<double>(j, "aspect", 0.5, where);
    nr.gain = jsonio::get<double>(j, "gain", where);
    nr.baseline_hz = jsonio::get<double>(j, "baseline_hz", where);
    return nr;
}

inline Json synth_config_to_json(const SynthConfig& cfg) {
    Json neurons = Json::array();
    for (const auto& nr : cfg.neurons) neurons.push_back(synth_neuron_to_json(nr));
    return Json{{"n_neurons", cfg.n_neurons}, {"img_h", cfg.img_h},   {"img_w", cfg.img_w},
                {"bin_ms", cfg.bin_ms},       {"window_ms", cfg.window_ms}, {"seed", cfg.seed},
                {"neurons", neurons}};
}

inline SynthConfig synth_config_from_json(const Json& j, const std::string& where) {
    jsonio::check_keys(j, {"n_neurons", "img_h", "img_w", "bin_ms", "window_ms", "seed", "neurons"},
                       where);
    SynthConfig cfg;
    cfg.n_neurons = jsonio::get<int64_t>(j, "n_neurons", where);
    cfg.img_h = jsonio::get<int64_t>(j, "img_h", where);
    cfg.img_w = jsonio::get<int64_t>(j, "img_w", where);
    cfg.bin_ms = jsonio::get_or<double>(j, "bin_ms", 5.0, where);
    cfg.window_ms = jsonio::get_or<double>(j, "window_ms", 105.0, where);
    cfg.seed = jsonio::get_or<uint64_t>(j, "seed", 1, where);
    if (j.contains("neurons")) {
        for (const auto& nj : j.at("neurons"))
            cfg.neurons.push_back(synth_neuron_from_json(nj, where + ".neurons"));
    } else {
        cfg = default_synth_config(cfg.n_neurons, cfg.img_h, cfg.img_w, cfg.seed);
    }
    cfg.validate();
    return cfg;
}

struct DatasetMeta {
    int64_t neurons = 0;
    double bin_ms = 5.0, window_ms = 105.0;
    int64_t img_h = 0, img_w = 0;
    uint64_t seed = 0;
    std::optional<SynthConfig> synth;
};

// Writes manifest.json + events/*.csv + targets/*.pgm under dir. The split
// assignment is decided here (fraction, seed) and recorded per item.
template <typename S>
std::filesystem::path write_dataset(const std::filesystem::path& dir, const SynthDataset<S>& synth,
                                    double train_fraction, uint64_t split_seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "events");
    fs::create_directories(dir / "targets");
    const size_t n = synth.data.size();
    const auto perm = detail::seeded_permutation(n, split_seed);
    const size_t n_train = static_cast<size_t>(std::floor(static_cast<double>(n) * train_fraction));
    std::vector<std::string> split_of(n);
    for (size_t i = 0; i < n; ++i) split_of[perm[i]] = i < n_train ? "train" : "test";

    Json items = Json::array();
    for (size_t i = 0; i < n; ++i) {
        const std::string& id = synth.data.ids[i];
        const std::string ev_rel = "events/" + id + ".csv";
        const std::string tg_rel = "targets/" + id + ".pgm";
        save_csv_events(synth.events[i], (dir / ev_rel).string());
        save_pgm(*synth.data.targets[i], (dir / tg_rel).string());
        items.push_back(Json{{"id", id}, {"events", ev_rel}, {"target", tg_rel}, {"split", split_of[i]}});
    }
    Json manifest{{"format", "s2i-dataset-v1"},
                  {"seed", synth.config.seed},
                  {"split_seed", split_seed},
                  {"neurons", synth.config.n_neurons},
                  {"bin_ms", synth.config.bin_ms},
                  {"window_ms", synth.config.window_ms},
                  {"image", Json{{"h", synth.config.img_h}, {"w", synth.config.img_w}}},
                  {"items", items},
                  {"synth", synth_config_to_json(synth.config)}};
    const fs::path manifest_path = dir / "manifest.json";
    std::ofstream out(manifest_path);
    if (!out) throw IoError(detail::str("cannot open ", manifest_path.string(), " for writing"));
    out << manifest.dump(2) << "\n";
    return manifest_path;
}

template <typename S = float>
struct LoadedDataset {
    BasicPairedDataset<S> train, test;
    DatasetMeta meta;
};

template <typename S = float>
LoadedDataset<S> load_dataset(const std::filesystem::path& manifest_path) {
    namespace fs = std::filesystem;
    const Json j = jsonio::parse_file(manifest_path.string());
    const std::string where = manifest_path.string();
    jsonio::check_keys(j, {"format", "seed", "split_seed", "neurons", "bin_ms", "window_ms", "image",
                           "items", "synth"}, where);
    if (jsonio::get<std::string>(j, "format", where) != "s2i-dataset-v1")
        throw ConfigError(detail::str(where, ": unsupported dataset format"));

    LoadedDataset<S> out;
    out.meta.neurons = jsonio::get<int64_t>(j, "neurons", where);
    out.meta.bin_ms = jsonio::get<double>(j, "bin_ms", where);
    out.meta.window_ms = jsonio::get<double>(j, "window_ms", where);
    out.meta.seed = jsonio::get_or<uint64_t>(j, "seed", 0, where);
    const Json& image = j.at("image");
    out.meta.img_h = jsonio::get<int64_t>(image, "h", where + ".image");
    out.meta.img_w = jsonio::get<int64_t>(image, "w", where + ".image");
    if (j.contains("synth")) out.meta.synth = synth_config_from_json(j.at("synth"), where + ".synth");

    out.train.split_tag = "train";
    out.test.split_tag = "test";
    const fs::path dir = manifest_path.parent_path();
    const double window_s = out.meta.window_ms / 1000.0;
    for (const Json& item : j.at("items")) {
        jsonio::check_keys(item, {"id", "events", "target", "split"}, where + ".items[]");
        const std::string id = jsonio::get<std::string>(item, "id", where);
        const std::string split_tag = jsonio::get<std::string>(item, "split", where);
        auto events = load_csv_events((dir / jsonio::get<std::string>(item, "events", where)).string(),
                                      out.meta.neurons, window_s);
        auto spikes = bin_spikes<S>(events, out.meta.bin_ms, out.meta.window_ms, 0.0);
        auto target = load_pgm<S>((dir / jsonio::get<std::string>(item, "target", where)).string());
        if (target->dim(0) != out.meta.img_h || target->dim(1) != out.meta.img_w)
            throw IoError(detail::str(where, ": target for ", id, " has wrong size"));
        auto& dst = split_tag == "train" ? out.train : out.test;
        dst.spikes.push_back(spikes);
        dst.targets.push_back(target);
        dst.ids.push_back(id);
    }
    return out;
}

// Stacks per-item [N,T] spike tensors into one [B,N,T] batch.
template <typename S>
TensorPtr<S> stack_spikes(const std::vector<TensorPtr<S>>& items, const std::vector<size_t>& idx) {
    if (idx.empty()) throw ShapeError("stack_spikes: empty batch");
    const auto& shape = items[idx[0]]->shape();
    auto out = make_tensor<S>({static_cast<int64_t>(idx.size()), shape[0], shape[1]});
    const size_t item_n = static_cast<size_t>(shape_numel(shape));
    for (size_t b = 0; b < idx.size(); ++b) {
        const auto& t = items[idx[b]];
        if (t->shape() != shape) throw ShapeError("stack_spikes: inconsistent item shapes");
        std::copy(t->data().begin(), t->data().end(), out->data().begin() + b * item_n);
    }
    return out;
}

// Stacks per-item [H,W] targets into [B,1,H,W].
template <typename S>
TensorPtr<S> stack_targets(const std::vector<TensorPtr<S>>& items, const std::vector<size_t>& idx) {
    if (idx.empty()) throw ShapeError("stack_targets: empty batch");
    const auto& shape = items[idx[0]]->shape();
    auto out = make_tensor<S>({static_cast<int64_t>(idx.size()), 1, shape[0], shape[1]});
    const size_t item_n = static_cast<size_t>(shape_numel(shape));
    for (size_t b = 0; b < idx.size(); ++b) {
        const auto& t = items[idx[b]];
        if (t->shape() != shape) throw ShapeError("stack_targets: inconsistent item shapes");
        std::copy(t->data().begin(), t->data().end(), out->data().begin() + b * item_n);
    }
    return out;
}

}  // namespace s2i
