#pragma once

// End-to-end spike-to-image decoder: dense stem from the spike raster to a
// spatial latent map, Gabor-initialized convolutional encoder with pooling,
// transposed-convolution decoder up to the target image, sigmoid output.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "s2i/gabor.hpp"
#include "s2i/json_util.hpp"
#include "s2i/tensor.hpp"

namespace s2i {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct ConvStageConfig {
    int64_t out_channels = 16;
    int kernel = 3, stride = 1, padding = 1;
    int pool_k = 0, pool_stride = 0;  // pool_k == 0 disables pooling
    bool gabor_init = false;
};

struct DeconvStageConfig {
    int64_t out_channels = 16;
    int kernel = 4, stride = 2, padding = 1;
    std::string activation = "relu";  // relu | sigmoid | none
};

struct ModelConfig {
    int64_t neurons = 100;
    int64_t bins = 21;
    int64_t stem_width = 4096;
    int64_t latent_channels = 8, latent_h = 10, latent_w = 10;
    int upsample = 2;
    std::vector<ConvStageConfig> encoder;
    std::vector<DeconvStageConfig> decoder;
    double dropout_p = 0.25;
    int64_t out_h = 80, out_w = 80;
    GaborBankConfig gabor;
    uint64_t seed = 1;

    // Generic trunk for out extents divisible by 16: latent H/8 map,
    // 2x upsample, two conv+pool stages, three transposed-conv stages.
    static ModelConfig default_for(int64_t neurons, int64_t bins, int64_t out_h, int64_t out_w,
                                   uint64_t seed = 1) {
        if (out_h % 16 != 0 || out_w % 16 != 0)
            throw ConfigError(detail::str("model: default trunk needs output extents divisible by 16, "
                                          "got ", out_h, "x", out_w, "; supply explicit stages instead"));
        ModelConfig cfg;
        cfg.neurons = neurons;
        cfg.bins = bins;
        cfg.out_h = out_h;
        cfg.out_w = out_w;
        cfg.seed = seed;
        cfg.latent_channels = 8;
        cfg.latent_h = out_h / 8;
        cfg.latent_w = out_w / 8;
        cfg.upsample = 2;
        cfg.encoder = {{16, 7, 1, 3, 2, 2, true}, {32, 3, 1, 1, 2, 2, false}};
        cfg.decoder = {{16, 4, 2, 1, "relu"}, {8, 4, 2, 1, "relu"}, {1, 4, 4, 0, "sigmoid"}};
        return cfg;
    }

    // Walks the shape chain; throws ConfigError naming the failing stage.
    void validate() const {
        if (neurons < 1 || bins < 1) throw ConfigError("model: neurons and bins must be >= 1");
        if (stem_width < 1) throw ConfigError("model: stem_width must be >= 1");
        if (latent_channels < 1 || latent_h < 1 || latent_w < 1)
            throw ConfigError("model: latent map extents must be >= 1");
        if (upsample < 1) throw ConfigError("model: upsample factor must be >= 1");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw ConfigError(detail::str("model: dropout_p must be in [0,1), got ", dropout_p));
        if (encoder.empty() || decoder.empty())
            throw ConfigError("model: encoder and decoder need at least one stage each");
        if (decoder.back().activation != "sigmoid")
            throw ConfigError("model: final decoder activation must be sigmoid (output lives in [0,1])");

        int64_t c = latent_channels, h = latent_h * upsample, w = latent_w * upsample;
        for (size_t i = 0; i < encoder.size(); ++i) {
            const auto& st = encoder[i];
            const std::string stage = detail::str("encoder stage ", i + 1);
            if (st.out_channels < 1 || st.kernel < 1 || st.stride < 1 || st.padding < 0)
                throw ConfigError(stage + ": bad conv geometry");
            if (st.gabor_init) {
                if (i != 0) throw ConfigError(stage + ": Gabor init is only valid on the first conv");
                if (st.kernel != gabor.size)
                    throw ConfigError(detail::str(stage, ": kernel ", st.kernel, " vs Gabor bank size ",
                                                  gabor.size));
                const int64_t bank = static_cast<int64_t>(gabor.n_orientations) * gabor.n_scales;
                if (st.out_channels % bank != 0)
                    throw ConfigError(detail::str(stage, ": out channels ", st.out_channels,
                                                  " not a multiple of bank kernel count ", bank));
            }
            if (st.kernel > h + 2 * st.padding || st.kernel > w + 2 * st.padding)
                throw ConfigError(detail::str(stage, ": kernel ", st.kernel, " larger than padded map ",
                                              h + 2 * st.padding, "x", w + 2 * st.padding));
            h = (h + 2 * st.padding - st.kernel) / st.stride + 1;
            w = (w + 2 * st.padding - st.kernel) / st.stride + 1;
            c = st.out_channels;
            if (st.pool_k > 0) {
                if (st.pool_k > h || st.pool_k > w)
                    throw ConfigError(detail::str(stage, ": pool window ", st.pool_k,
                                                  " larger than map ", h, "x", w));
                const int ps = st.pool_stride > 0 ? st.pool_stride : st.pool_k;
                h = (h - st.pool_k) / ps + 1;
                w = (w - st.pool_k) / ps + 1;
            }
            if (h < 1 || w < 1) throw ConfigError(stage + ": map collapsed to zero extent");
        }
        for (size_t i = 0; i < decoder.size(); ++i) {
            const auto& st = decoder[i];
            const std::string stage = detail::str("decoder stage ", i + 1);
            if (st.out_channels < 1 || st.kernel < 1 || st.stride < 1 || st.padding < 0)
                throw ConfigError(stage + ": bad deconv geometry");
            if (st.activation != "relu" && st.activation != "sigmoid" && st.activation != "none")
                throw ConfigError(detail::str(stage, ": unknown activation '", st.activation, "'"));
            h = (h - 1) * st.stride - 2 * st.padding + st.kernel;
            w = (w - 1) * st.stride - 2 * st.padding + st.kernel;
            c = st.out_channels;
            if (h < 1 || w < 1) throw ConfigError(stage + ": map collapsed to zero extent");
        }
        if (c != 1 || h != out_h || w != out_w)
            throw ConfigError(detail::str("model: decoder emits ", c, "x", h, "x", w, ", config wants 1x",
                                          out_h, "x", out_w, " (shape chain break at final stage)"));
    }
};

inline Json gabor_config_to_json(const GaborBankConfig& g) {
    return Json{{"n_orientations", g.n_orientations}, {"n_scales", g.n_scales}, {"size", g.size},
                {"base_lambda", g.base_lambda},       {"lambda_ratio", g.lambda_ratio},
                {"psi", g.psi},                       {"gamma", g.gamma},
                {"trainable", g.trainable}};
}

inline GaborBankConfig gabor_config_from_json(const Json& j, const std::string& where) {
    jsonio::check_keys(j, {"n_orientations", "n_scales", "size", "base_lambda", "lambda_ratio", "psi",
                           "gamma", "trainable"}, where);
    GaborBankConfig g;
    g.n_orientations = jsonio::get_or<int>(j, "n_orientations", 4, where);
    g.n_scales = jsonio::get_or<int>(j, "n_scales", 2, where);
    g.size = jsonio::get_or<int>(j, "size", 7, where);
    g.base_lambda = jsonio::get_or<double>(j, "base_lambda", 4.0, where);
    g.lambda_ratio = jsonio::get_or<double>(j, "lambda_ratio", 2.0, where);
    g.psi = jsonio::get_or<double>(j, "psi", 0.0, where);
    g.gamma = jsonio::get_or<double>(j, "gamma", 0.5, where);
    g.trainable = jsonio::get_or<bool>(j, "trainable", false, where);
    return g;
}

inline Json model_config_to_json(const ModelConfig& cfg) {
    Json enc = Json::array();
    for (const auto& st : cfg.encoder)
        enc.push_back(Json{{"out_channels", st.out_channels}, {"kernel", st.kernel},
                           {"stride", st.stride},             {"padding", st.padding},
                           {"pool_k", st.pool_k},             {"pool_stride", st.pool_stride},
                           {"gabor_init", st.gabor_init}});
    Json dec = Json::array();
    for (const auto& st : cfg.decoder)
        dec.push_back(Json{{"out_channels", st.out_channels}, {"kernel", st.kernel},
                           {"stride", st.stride},             {"padding", st.padding},
                           {"activation", st.activation}});
    return Json{{"neurons", cfg.neurons},
                {"bins", cfg.bins},
                {"stem_width", cfg.stem_width},
                {"latent", Json{{"channels", cfg.latent_channels}, {"h", cfg.latent_h}, {"w", cfg.latent_w}}},
                {"upsample", cfg.upsample},
                {"encoder", enc},
                {"decoder", dec},
                {"dropout_p", cfg.dropout_p},
                {"out_h", cfg.out_h},
                {"out_w", cfg.out_w},
                {"gabor", gabor_config_to_json(cfg.gabor)},
                {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& where) {
    jsonio::check_keys(j, {"neurons", "bins", "stem_width", "latent", "upsample", "encoder", "decoder",
                           "dropout_p", "out_h", "out_w", "gabor", "seed"}, where);
    ModelConfig cfg;
    cfg.neurons = jsonio::get<int64_t>(j, "neurons", where);
    cfg.bins = jsonio::get<int64_t>(j, "bins", where);
    cfg.stem_width = jsonio::get<int64_t>(j, "stem_width", where);
    const Json& lat = j.at("latent");
    jsonio::check_keys(lat, {"channels", "h", "w"}, where + ".latent");
    cfg.latent_channels = jsonio::get<int64_t>(lat, "channels", where);
    cfg.latent_h = jsonio::get<int64_t>(lat, "h", where);
    cfg.latent_w = jsonio::get<int64_t>(lat, "w", where);
    cfg.upsample = jsonio::get<int>(j, "upsample", where);
    cfg.encoder.clear();
    for (const Json& st : j.at("encoder")) {
        jsonio::check_keys(st, {"out_channels", "kernel", "stride", "padding", "pool_k", "pool_stride",
                                "gabor_init"}, where + ".encoder[]");
        ConvStageConfig c;
        c.out_channels = jsonio::get<int64_t>(st, "out_channels", where);
        c.kernel = jsonio::get<int>(st, "kernel", where);
        c.stride = jsonio::get<int>(st, "stride", where);
        c.padding = jsonio::get<int>(st, "padding", where);
        c.pool_k = jsonio::get_or<int>(st, "pool_k", 0, where);
        c.pool_stride = jsonio::get_or<int>(st, "pool_stride", 0, where);
        c.gabor_init = jsonio::get_or<bool>(st, "gabor_init", false, where);
        cfg.encoder.push_back(c);
    }
    cfg.decoder.clear();
    for (const Json& st : j.at("decoder")) {
        jsonio::check_keys(st, {"out_channels", "kernel", "stride", "padding", "activation"},
                           where + ".decoder[]");
        DeconvStageConfig c;
        c.out_channels = jsonio::get<int64_t>(st, "out_channels", where);
        c.kernel = jsonio::get<int>(st, "kernel", where);
        c.stride = jsonio::get<int>(st, "stride", where);
        c.padding = jsonio::get<int>(st, "padding", where);
        c.activation = jsonio::get<std::string>(st, "activation", where);
        cfg.decoder.push_back(c);
    }
    cfg.dropout_p = jsonio::get<double>(j, "dropout_p", where);
    cfg.out_h = jsonio::get<int64_t>(j, "out_h", where);
    cfg.out_w = jsonio::get<int64_t>(j, "out_w", where);
    if (j.contains("gabor")) cfg.gabor = gabor_config_from_json(j.at("gabor"), where + ".gabor");
    cfg.seed = jsonio::get_or<uint64_t>(j, "seed", 1, where);
    cfg.validate();
    return cfg;
}

template <typename S = float>
class BasicDecoderModel {
   public:
    using Param = std::pair<std::string, TensorPtr<S>>;

    static BasicDecoderModel build(const ModelConfig& cfg) {
        cfg.validate();
        BasicDecoderModel m;
        m.cfg_ = cfg;
        m.dropout_rng_.seed(cfg.seed ^ 0xD1B54A32D192ED03ULL);
        std::mt19937_64 rng(cfg.seed);

        const int64_t in_dim = cfg.neurons * cfg.bins;
        const int64_t latent_numel = cfg.latent_channels * cfg.latent_h * cfg.latent_w;
        m.add_param("stem.w", he_normal({in_dim, cfg.stem_width}, in_dim, rng));
        m.add_param("stem.b", make_tensor<S>({cfg.stem_width}), true);
        m.add_param("proj.w", he_normal({cfg.stem_width, latent_numel}, cfg.stem_width, rng));
        m.add_param("proj.b", make_tensor<S>({latent_numel}), true);

        int64_t c = cfg.latent_channels;
        for (size_t i = 0; i < cfg.encoder.size(); ++i) {
            const auto& st = cfg.encoder[i];
            const std::string base = detail::str("enc", i + 1);
            if (st.gabor_init) {
                auto bank = make_gabor_bank<S>(cfg.gabor);
                auto w = init_first_layer<S>(bank, static_cast<int>(c), static_cast<int>(st.out_channels),
                                             cfg.gabor.trainable);
                m.params_.emplace_back(base + ".w", w);  // trainability decided by init_first_layer
            } else {
                m.add_param(base + ".w",
                            he_normal({st.out_channels, c, st.kernel, st.kernel}, c * st.kernel * st.kernel,
                                      rng));
            }
            m.add_param(base + ".b", make_tensor<S>({1, st.out_channels, 1, 1}), true);
            c = st.out_channels;
        }
        for (size_t i = 0; i < cfg.decoder.size(); ++i) {
            const auto& st = cfg.decoder[i];
            const std::string base = detail::str("dec", i + 1);
            const double fan = static_cast<double>(c) * st.kernel * st.kernel;
            const double stddev = st.activation == "relu" ? std::sqrt(2.0 / fan) : std::sqrt(1.0 / fan);
            auto w = make_tensor<S>({c, st.out_channels, st.kernel, st.kernel});
            std::normal_distribution<double> dist(0.0, stddev);
            for (S& v : w->data()) v = static_cast<S>(dist(rng));
            m.add_param(base + ".w", w, false);
            m.add_param(base + ".b", make_tensor<S>({1, st.out_channels, 1, 1}), true);
            c = st.out_channels;
        }
        for (auto& [name, p] : m.params_)
            if (!p->requires_grad() && name != "enc1.w") p->set_requires_grad(true);
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    bool training() const { return training_; }
    void set_training(bool on) { training_ = on; }
    void reseed_dropout(uint64_t seed) { dropout_rng_.seed(seed); }

    // All named parameters in registration order; trainable_only skips frozen
    // (non-trainable Gabor) weights so the optimizer never touches them.
    std::vector<Param> parameters(bool trainable_only = false) const {
        std::vector<Param> out;
        for (const auto& p : params_)
            if (!trainable_only || p.second->requires_grad()) out.push_back(p);
        return out;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.second->numel();
        return n;
    }

    TensorPtr<S> param(const std::string& name) const {
        for (const auto& [n, p] : params_)
            if (n == name) return p;
        throw ConfigError(detail::str("model: no parameter named '", name, "'"));
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p->zero_grad();
    }

    // spikes: [B, neurons, bins] -> [B, 1, out_h, out_w] in [0,1].
    TensorPtr<S> forward(Graph<S>* g, const TensorPtr<S>& spikes) {
        if (spikes->rank() != 3 || spikes->dim(1) != cfg_.neurons || spikes->dim(2) != cfg_.bins)
            throw ShapeError(detail::str("model: spikes must be [B,", cfg_.neurons, ",", cfg_.bins,
                                         "], got ", detail::shape_str(spikes->shape())));
        const int64_t B = spikes->dim(0);
        auto x = reshape(g, spikes, {B, cfg_.neurons * cfg_.bins});
        x = relu(g, dense(g, x, param("stem.w"), param("stem.b")));
        x = dropout(g, x, cfg_.dropout_p, training_, dropout_rng_);
        x = dense(g, x, param("proj.w"), param("proj.b"));
        auto map = reshape(g, x, {B, cfg_.latent_channels, cfg_.latent_h, cfg_.latent_w});
        map = upsample_nearest2d(g, map, cfg_.upsample);
        for (size_t i = 0; i < cfg_.encoder.size(); ++i) {
            const auto& st = cfg_.encoder[i];
            const std::string base = detail::str("enc", i + 1);
            map = conv2d(g, map, param(base + ".w"), st.stride, st.padding);
            map = add(g, map, param(base + ".b"));
            map = relu(g, map);
            if (st.pool_k > 0)
                map = maxpool2d(g, map, st.pool_k, st.pool_stride > 0 ? st.pool_stride : st.pool_k);
        }
        for (size_t i = 0; i < cfg_.decoder.size(); ++i) {
            const auto& st = cfg_.decoder[i];
            const std::string base = detail::str("dec", i + 1);
            map = conv_transpose2d(g, map, param(base + ".w"), st.stride, st.padding);
            map = add(g, map, param(base + ".b"));
            if (st.activation == "relu")
                map = relu(g, map);
            else if (st.activation == "sigmoid")
                map = sigmoid(g, map);
        }
        return map;
    }

   private:
    static TensorPtr<S> he_normal(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
        auto t = make_tensor<S>(std::move(shape));
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (S& v : t->data()) v = static_cast<S>(dist(rng));
        return t;
    }

    void add_param(const std::string& name, TensorPtr<S> t, bool trainable = true) {
        t->set_requires_grad(trainable);
        params_.emplace_back(name, std::move(t));
    }

    ModelConfig cfg_;
    std::vector<Param> params_;
    std::mt19937_64 dropout_rng_;
    bool training_ = false;
};

using DecoderModel = BasicDecoderModel<float>;

// ---- checkpoint container ---------------------------------------------------
// Layout: magic "S2I1" | u64 json length | canonical JSON bytes | records of
// (u32 name length, name, u32 rank, u64 extents..., f32 little-endian payload)
// until end of file.

namespace detail {

inline void write_bytes(std::ofstream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::ifstream& in, void* p, size_t n, const std::string& path) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
        throw IoError(str(path, ": truncated checkpoint (wanted ", n, " more bytes)"));
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Json& meta,
                             const std::vector<std::pair<std::string, TensorPtr<float>>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(detail::str("cannot open ", path, " for writing"));
    out.write("S2I1", 4);
    const std::string js = meta.dump();
    const uint64_t len = js.size();
    detail::write_bytes(out, &len, sizeof(len));
    detail::write_bytes(out, js.data(), js.size());
    for (const auto& [name, t] : tensors) {
        const uint32_t name_len = static_cast<uint32_t>(name.size());
        detail::write_bytes(out, &name_len, sizeof(name_len));
        detail::write_bytes(out, name.data(), name.size());
        const uint32_t rank = static_cast<uint32_t>(t->rank());
        detail::write_bytes(out, &rank, sizeof(rank));
        for (int64_t d : t->shape()) {
            const uint64_t e = static_cast<uint64_t>(d);
            detail::write_bytes(out, &e, sizeof(e));
        }
        detail::write_bytes(out, t->data().data(), t->data().size() * sizeof(float));
    }
    if (!out) throw IoError(detail::str("write failed: ", path));
}

struct CheckpointContents {
    Json meta;
    std::vector<std::pair<std::string, TensorPtr<float>>> tensors;
};

inline CheckpointContents read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(detail::str("cannot open ", path));
    char magic[4];
    detail::read_bytes(in, magic, 4, path);
    if (std::memcmp(magic, "S2I1", 4) != 0)
        throw IoError(detail::str(path, ": bad magic, not an S2I1 checkpoint"));
    uint64_t len = 0;
    detail::read_bytes(in, &len, sizeof(len), path);
    std::string js(len, '\0');
    detail::read_bytes(in, js.data(), len, path);
    CheckpointContents out;
    try {
        out.meta = Json::parse(js);
    } catch (const Json::exception& e) {
        throw IoError(detail::str(path, ": corrupt config block: ", e.what()));
    }
    while (true) {
        uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (in.gcount() == 0 && in.eof()) break;
        if (static_cast<size_t>(in.gcount()) != sizeof(name_len))
            throw IoError(detail::str(path, ": truncated record header"));
        std::string name(name_len, '\0');
        detail::read_bytes(in, name.data(), name_len, path);
        uint32_t rank = 0;
        detail::read_bytes(in, &rank, sizeof(rank), path);
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) {
            uint64_t e = 0;
            detail::read_bytes(in, &e, sizeof(e), path);
            shape[i] = static_cast<int64_t>(e);
        }
        auto t = make_tensor<float>(shape);
        detail::read_bytes(in, t->data().data(), t->data().size() * sizeof(float), path);
        out.tensors.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

inline void save(const DecoderModel& model, const std::string& path) {
    write_checkpoint(path, Json{{"model", model_config_to_json(model.config())}}, model.parameters());
}

inline DecoderModel load(const std::string& path) {
    auto ckpt = read_checkpoint(path);
    if (!ckpt.meta.contains("model"))
        throw IoError(detail::str(path, ": checkpoint has no model config block"));
    const ModelConfig cfg = model_config_from_json(ckpt.meta.at("model"), path + "#model");
    auto model = DecoderModel::build(cfg);
    auto params = model.parameters();
    if (params.size() != ckpt.tensors.size())
        throw IoError(detail::str(path, ": checkpoint holds ", ckpt.tensors.size(), " tensors, model has ",
                                  params.size(), " parameters"));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, stored] = ckpt.tensors[i];
        if (name != params[i].first)
            throw IoError(detail::str(path, ": parameter order mismatch, '", name, "' vs '",
                                      params[i].first, "'"));
        if (stored->shape() != params[i].second->shape())
            throw IoError(detail::str(path, ": shape mismatch for '", name, "'"));
        params[i].second->data() = stored->data();
    }
    return model;
}

}  // namespace s2i
