#pragma once

// Dense N-d float tensor with a tape-based reverse-mode autodiff graph.
// Covers exactly the ops the decoder and its losses need; nothing more.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2i {

namespace detail {

template <typename... Args>
std::string str(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

}  // namespace detail

// Error taxonomy shared across the library.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct RangeError : std::out_of_range {
    using std::out_of_range::out_of_range;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GraphError : std::logic_error {
    using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

// Value-semantic dense tensor. Row-major storage; grad buffer present iff
// requires_grad. The scalar type is a template parameter so tests can run
// the same op code at double precision; the product type is Tensor (float).
template <typename S>
class BasicTensor {
   public:
    BasicTensor() = default;

    explicit BasicTensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
    }

    BasicTensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw ShapeError(detail::str("tensor: data length ", data_.size(), " does not match shape ",
                                         detail::shape_str(shape_)));
    }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    std::vector<S>& data() { return data_; }
    const std::vector<S>& data() const { return data_; }
    std::vector<S>& grad() {
        if (!requires_grad_) throw GraphError("tensor: grad requested but requires_grad is false");
        return grad_;
    }
    const std::vector<S>& grad() const {
        if (!requires_grad_) throw GraphError("tensor: grad requested but requires_grad is false");
        return grad_;
    }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) {
        requires_grad_ = on;
        if (on)
            grad_.assign(data_.size(), S(0));
        else
            grad_.clear();
    }
    void zero_grad() {
        if (requires_grad_) std::fill(grad_.begin(), grad_.end(), S(0));
    }

    S& at(std::initializer_list<int64_t> idx) { return data_[flat_index(idx)]; }
    S at(std::initializer_list<int64_t> idx) const { return data_[flat_index(idx)]; }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    BasicTensor clone() const {
        BasicTensor t(shape_, data_);
        t.set_requires_grad(requires_grad_);
        if (requires_grad_) t.grad_ = grad_;
        return t;
    }

    template <typename T>
    BasicTensor<T> cast() const {
        std::vector<T> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
        return BasicTensor<T>(shape_, std::move(out));
    }

   private:
    void validate_shape() const {
        for (int64_t d : shape_)
            if (d <= 0)
                throw ShapeError(detail::str("tensor: non-positive extent in shape ", detail::shape_str(shape_)));
    }

    size_t flat_index(std::initializer_list<int64_t> idx) const {
        if (idx.size() != shape_.size())
            throw ShapeError(detail::str("tensor: index rank ", idx.size(), " vs shape rank ", shape_.size()));
        size_t flat = 0;
        size_t axis = 0;
        for (int64_t i : idx) {
            if (i < 0 || i >= shape_[axis])
                throw RangeError(detail::str("tensor: index ", i, " out of bounds on axis ", axis));
            flat = flat * static_cast<size_t>(shape_[axis]) + static_cast<size_t>(i);
            ++axis;
        }
        return flat;
    }

    Shape shape_;
    std::vector<S> data_;
    bool requires_grad_ = false;
    std::vector<S> grad_;
};

using Tensor = BasicTensor<float>;

template <typename S>
using TensorPtr = std::shared_ptr<BasicTensor<S>>;

template <typename S>
TensorPtr<S> make_tensor(Shape shape, S fill = S(0)) {
    return std::make_shared<BasicTensor<S>>(std::move(shape), fill);
}

template <typename S>
TensorPtr<S> make_tensor(Shape shape, std::vector<S> data) {
    return std::make_shared<BasicTensor<S>>(std::move(shape), std::move(data));
}

template <typename S>
TensorPtr<S> uniform_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng) {
    auto t = make_tensor<S>(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (S& v : t->data()) v = static_cast<S>(dist(rng));
    return t;
}

template <typename S>
TensorPtr<S> normal_tensor(Shape shape, double mean, double stddev, std::mt19937_64& rng) {
    auto t = make_tensor<S>(std::move(shape));
    std::normal_distribution<double> dist(mean, stddev);
    for (S& v : t->data()) v = static_cast<S>(dist(rng));
    return t;
}

// Tape of executed ops. Backward replays closures in exact reverse execution
// order; a consumed tape throws until re-recorded.
template <typename S>
class Graph {
   public:
    void record(std::function<void()> backward_fn) {
        if (consumed_)
            throw GraphError("graph: recording onto a consumed tape; call clear() first");
        tape_.push_back(std::move(backward_fn));
    }

    void backward(const TensorPtr<S>& loss) {
        if (!loss) throw GraphError("graph: null loss");
        if (loss->numel() != 1)
            throw GraphError(detail::str("graph: backward needs a scalar loss, got shape ",
                                         detail::shape_str(loss->shape())));
        if (consumed_) throw GraphError("graph: stale tape; backward already ran");
        if (tape_.empty()) throw GraphError("graph: loss was not produced by a recorded graph");
        if (!loss->requires_grad())
            throw GraphError("graph: loss does not require grad; no parameters to differentiate");
        loss->grad()[0] = S(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
        consumed_ = true;
    }

    size_t size() const { return tape_.size(); }
    bool consumed() const { return consumed_; }
    void clear() {
        tape_.clear();
        consumed_ = false;
    }

   private:
    std::vector<std::function<void()>> tape_;
    bool consumed_ = false;
};

namespace detail {

// Accepts [H,W] with any number of leading size-1 axes; returns (H, W).
template <typename S>
std::pair<int64_t, int64_t> plane_dims(const BasicTensor<S>& x, const char* name) {
    if (x.rank() < 2) throw ShapeError(str(name, ": image must be at least rank 2"));
    for (size_t i = 0; i + 2 < x.rank(); ++i)
        if (x.shape()[i] != 1)
            throw ShapeError(str(name, ": leading axis ", i, " must be 1 for a single image, got ",
                                 x.shape()[i]));
    return {x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]};
}

template <typename S>
void check_same_shape(const BasicTensor<S>& x, const BasicTensor<S>& y, const char* name) {
    if (x.shape() != y.shape())
        throw ShapeError(str(name, ": shape mismatch ", shape_str(x.shape()), " vs ", shape_str(y.shape())));
}

template <typename S>
bool tracked(Graph<S>* g, std::initializer_list<const BasicTensor<S>*> inputs) {
    if (!g) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename S>
TensorPtr<S> make_output(Shape shape, bool track) {
    auto out = make_tensor<S>(std::move(shape));
    if (track) out->set_requires_grad(true);
    return out;
}

// Broadcast two shapes, NumPy trailing-alignment rules.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(str("broadcast: incompatible extents ", da, " vs ", db, " on axis ", i,
                                 " (shapes ", shape_str(a), " and ", shape_str(b), ")"));
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 on broadcast (size-1) axes, aligned to out rank.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    for (size_t i = in.size(); i-- > 0;) {
        const size_t o = i + (out.size() - in.size());
        strides[o] = (in[i] == 1 && out[o] != 1) ? 0 : s;
        s *= in[i];
    }
    return strides;
}

}  // namespace detail

// ---- elementwise binary ops with broadcasting -----------------------------

namespace detail {

template <typename S, typename FwdFn, typename BwdFn>
TensorPtr<S> binary_op(Graph<S>* g, const TensorPtr<S>& a, const TensorPtr<S>& b, FwdFn fwd, BwdFn bwd,
                       const char* name) {
    const Shape out_shape = broadcast_shape(a->shape(), b->shape());
    const bool track = tracked<S>(g, {a.get(), b.get()});
    auto out = make_output<S>(out_shape, track);

    const auto sa = broadcast_strides(a->shape(), out_shape);
    const auto sb = broadcast_strides(b->shape(), out_shape);
    const size_t rank = out_shape.size();
    const int64_t n = out->numel();

    std::vector<int64_t> coord(rank, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
        out->data()[i] = fwd(a->data()[ia], b->data()[ib]);
        // advance odometer
        for (size_t ax = rank; ax-- > 0;) {
            ++coord[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (coord[ax] < out_shape[ax]) break;
            coord[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }

    if (track) {
        g->record([out, a, b, sa, sb, out_shape, bwd]() {
            const size_t rank = out_shape.size();
            std::vector<int64_t> coord(rank, 0);
            int64_t ia = 0, ib = 0;
            const int64_t n = out->numel();
            for (int64_t i = 0; i < n; ++i) {
                const S go = out->grad()[i];
                S da = S(0), db = S(0);
                bwd(a->data()[ia], b->data()[ib], go, da, db);
                if (a->requires_grad()) a->grad()[ia] += da;
                if (b->requires_grad()) b->grad()[ib] += db;
                for (size_t ax = rank; ax-- > 0;) {
                    ++coord[ax];
                    ia += sa[ax];
                    ib += sb[ax];
                    if (coord[ax] < out_shape[ax]) break;
                    coord[ax] = 0;
                    ia -= sa[ax] * out_shape[ax];
                    ib -= sb[ax] * out_shape[ax];
                }
            }
        });
    }
    (void)name;
    return out;
}

}  // namespace detail

template <typename S>
TensorPtr<S> add(Graph<S>* g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_op<S>(
        g, a, b, [](S x, S y) { return x + y; },
        [](S, S, S go, S& da, S& db) {
            da = go;
            db = go;
        },
        "add");
}

template <typename S>
TensorPtr<S> sub(Graph<S>* g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_op<S>(
        g, a, b, [](S x, S y) { return x - y; },
        [](S, S, S go, S& da, S& db) {
            da = go;
            db = -go;
        },
        "sub");
}

template <typename S>
TensorPtr<S> mul(Graph<S>* g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_op<S>(
        g, a, b, [](S x, S y) { return x * y; },
        [](S x, S y, S go, S& da, S& db) {
            da = go * y;
            db = go * x;
        },
        "mul");
}

template <typename S>
TensorPtr<S> div(Graph<S>* g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    auto out = detail::binary_op<S>(
        g, a, b, [](S x, S y) { return x / y; },
        [](S x, S y, S go, S& da, S& db) {
            da = go / y;
            db = -go * x / (y * y);
        },
        "div");
    if (!out->all_finite())
        throw NumericError("div: produced a non-finite value (zero or denormal denominator)");
    return out;
}

// affine: a*x + b with scalar constants (covers negate, scale, shift).
template <typename S>
TensorPtr<S> affine(Graph<S>* g, const TensorPtr<S>& x, double a, double b) {
    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = detail::make_output<S>(x->shape(), track);
    const S sa = static_cast<S>(a), sb = static_cast<S>(b);
    for (int64_t i = 0; i < x->numel(); ++i) out->data()[i] = sa * x->data()[i] + sb;
    if (track) {
        g->record([out, x, sa]() {
            for (int64_t i = 0; i < x->numel(); ++i) x->grad()[i] += sa * out->grad()[i];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> relu(Graph<S>* g, const TensorPtr<S>& x) {
    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = detail::make_output<S>(x->shape(), track);
    for (int64_t i = 0; i < x->numel(); ++i) out->data()[i] = std::max(S(0), x->data()[i]);
    if (track) {
        // subgradient at 0 is 0
        g->record([out, x]() {
            for (int64_t i = 0; i < x->numel(); ++i)
                if (x->data()[i] > S(0)) x->grad()[i] += out->grad()[i];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> sigmoid(Graph<S>* g, const TensorPtr<S>& x) {
    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = detail::make_output<S>(x->shape(), track);
    for (int64_t i = 0; i < x->numel(); ++i) {
        const double v = static_cast<double>(x->data()[i]);
        out->data()[i] = static_cast<S>(1.0 / (1.0 + std::exp(-v)));
    }
    if (track) {
        g->record([out, x]() {
            for (int64_t i = 0; i < x->numel(); ++i) {
                const S y = out->data()[i];
                x->grad()[i] += out->grad()[i] * y * (S(1) - y);
            }
        });
    }
    return out;
}

// Inverted dropout: survivors scaled by 1/(1-p) at train time, identity in eval.
template <typename S>
TensorPtr<S> dropout(Graph<S>* g, const TensorPtr<S>& x, double p, bool training, std::mt19937_64& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError(detail::str("dropout: p must be in [0,1), got ", p));
    if (!training || p == 0.0) return x;

    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = detail::make_output<S>(x->shape(), track);
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(x->numel()));
    const S scale = static_cast<S>(1.0 / (1.0 - p));
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (int64_t i = 0; i < x->numel(); ++i) {
        const bool keep = dist(rng) >= p;
        (*mask)[i] = keep;
        out->data()[i] = keep ? x->data()[i] * scale : S(0);
    }
    if (track) {
        g->record([out, x, mask, scale]() {
            for (int64_t i = 0; i < x->numel(); ++i)
                if ((*mask)[i]) x->grad()[i] += out->grad()[i] * scale;
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> dropout(Graph<S>* g, const TensorPtr<S>& x, double p, bool training, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return dropout(g, x, p, training, rng);
}

// dense: [B,N] x [N,M] + [M] -> [B,M]
template <typename S>
TensorPtr<S> dense(Graph<S>* g, const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b) {
    if (x->rank() != 2) throw ShapeError(detail::str("dense: input must be rank 2, got ", x->rank()));
    if (w->rank() != 2) throw ShapeError(detail::str("dense: weight must be rank 2, got ", w->rank()));
    if (x->dim(1) != w->dim(0))
        throw ShapeError(detail::str("dense: inner axis mismatch, input axis 1 = ", x->dim(1),
                                     " vs weight axis 0 = ", w->dim(0)));
    if (b->rank() != 1 || b->dim(0) != w->dim(1))
        throw ShapeError(detail::str("dense: bias shape ", detail::shape_str(b->shape()), " vs M = ", w->dim(1)));

    const int64_t B = x->dim(0), N = x->dim(1), M = w->dim(1);
    const bool track = detail::tracked<S>(g, {x.get(), w.get(), b.get()});
    auto out = detail::make_output<S>({B, M}, track);

#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < B; ++i) {
        for (int64_t j = 0; j < M; ++j) {
            double acc = static_cast<double>(b->data()[j]);
            for (int64_t k = 0; k < N; ++k)
                acc += static_cast<double>(x->data()[i * N + k]) * static_cast<double>(w->data()[k * M + j]);
            out->data()[i * M + j] = static_cast<S>(acc);
        }
    }

    if (track) {
        g->record([out, x, w, b, B, N, M]() {
            if (x->requires_grad()) {
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < B; ++i)
                    for (int64_t k = 0; k < N; ++k) {
                        S acc = S(0);
                        for (int64_t j = 0; j < M; ++j)
                            acc += out->grad()[i * M + j] * w->data()[k * M + j];
                        x->grad()[i * N + k] += acc;
                    }
            }
            if (w->requires_grad()) {
#pragma omp parallel for schedule(static)
                for (int64_t k = 0; k < N; ++k)
                    for (int64_t j = 0; j < M; ++j) {
                        S acc = S(0);
                        for (int64_t i = 0; i < B; ++i)
                            acc += x->data()[i * N + k] * out->grad()[i * M + j];
                        w->grad()[k * M + j] += acc;
                    }
            }
            if (b->requires_grad()) {
                for (int64_t j = 0; j < M; ++j) {
                    S acc = S(0);
                    for (int64_t i = 0; i < B; ++i) acc += out->grad()[i * M + j];
                    b->grad()[j] += acc;
                }
            }
        });
    }
    return out;
}

namespace detail {

inline void check_conv_args(const char* name, const Shape& x, const Shape& k, int stride, int padding) {
    if (x.size() != 4) throw ShapeError(str(name, ": input must be rank 4 [B,C,H,W], got rank ", x.size()));
    if (k.size() != 4) throw ShapeError(str(name, ": kernel must be rank 4, got rank ", k.size()));
    if (stride < 1) throw ConfigError(str(name, ": stride must be >= 1, got ", stride));
    if (padding < 0) throw ConfigError(str(name, ": padding must be >= 0, got ", padding));
}

}  // namespace detail

// conv2d, cross-correlation convention, zero padding.
// x: [B,Cin,H,W], k: [Cout,Cin,kh,kw] -> [B,Cout,H',W']
template <typename S>
TensorPtr<S> conv2d(Graph<S>* g, const TensorPtr<S>& x, const TensorPtr<S>& k, int stride, int padding) {
    detail::check_conv_args("conv2d", x->shape(), k->shape(), stride, padding);
    const int64_t B = x->dim(0), Cin = x->dim(1), H = x->dim(2), W = x->dim(3);
    const int64_t Cout = k->dim(0), KH = k->dim(2), KW = k->dim(3);
    if (k->dim(1) != Cin)
        throw ShapeError(detail::str("conv2d: channel axis mismatch, input axis 1 = ", Cin,
                                     " vs kernel axis 1 = ", k->dim(1)));
    if (KH > H + 2 * padding || KW > W + 2 * padding)
        throw ShapeError(detail::str("conv2d: kernel ", KH, "x", KW, " larger than padded input ",
                                     H + 2 * padding, "x", W + 2 * padding, " on spatial axes 2,3"));
    const int64_t OH = (H + 2 * padding - KH) / stride + 1;
    const int64_t OW = (W + 2 * padding - KW) / stride + 1;

    const bool track = detail::tracked<S>(g, {x.get(), k.get()});
    auto out = detail::make_output<S>({B, Cout, OH, OW}, track);

    const S* xd = x->data().data();
    const S* kd = k->data().data();
    S* od = out->data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t kh = 0; kh < KH; ++kh) {
                            const int64_t ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const int64_t iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(xd[((b * Cin + ci) * H + ih) * W + iw]) *
                                       static_cast<double>(kd[((co * Cin + ci) * KH + kh) * KW + kw]);
                            }
                        }
                    od[((b * Cout + co) * OH + oh) * OW + ow] = static_cast<S>(acc);
                }

    if (track) {
        const int s = stride, p = padding;
        g->record([out, x, k, B, Cin, H, W, Cout, KH, KW, OH, OW, s, p]() {
            const S* god = out->grad().data();
            if (x->requires_grad()) {
                S* gx = x->grad().data();
                const S* kd = k->data().data();
#pragma omp parallel for schedule(static)
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t co = 0; co < Cout; ++co)
                        for (int64_t oh = 0; oh < OH; ++oh)
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const S go = god[((b * Cout + co) * OH + oh) * OW + ow];
                                for (int64_t ci = 0; ci < Cin; ++ci)
                                    for (int64_t kh = 0; kh < KH; ++kh) {
                                        const int64_t ih = oh * s - p + kh;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int64_t kw = 0; kw < KW; ++kw) {
                                            const int64_t iw = ow * s - p + kw;
                                            if (iw < 0 || iw >= W) continue;
                                            gx[((b * Cin + ci) * H + ih) * W + iw] +=
                                                go * kd[((co * Cin + ci) * KH + kh) * KW + kw];
                                        }
                                    }
                            }
            }
            if (k->requires_grad()) {
                S* gk = k->grad().data();
                const S* xd = x->data().data();
#pragma omp parallel for schedule(static)
                for (int64_t co = 0; co < Cout; ++co)
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t oh = 0; oh < OH; ++oh)
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const S go = god[((b * Cout + co) * OH + oh) * OW + ow];
                                for (int64_t ci = 0; ci < Cin; ++ci)
                                    for (int64_t kh = 0; kh < KH; ++kh) {
                                        const int64_t ih = oh * s - p + kh;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int64_t kw = 0; kw < KW; ++kw) {
                                            const int64_t iw = ow * s - p + kw;
                                            if (iw < 0 || iw >= W) continue;
                                            gk[((co * Cin + ci) * KH + kh) * KW + kw] +=
                                                go * xd[((b * Cin + ci) * H + ih) * W + iw];
                                        }
                                    }
                            }
            }
        });
    }
    return out;
}

// conv_transpose2d, adjoint of conv2d under the same stride/padding.
// x: [B,Cin,H,W], k: [Cin,Cout,kh,kw] -> [B,Cout,(H-1)*s-2p+kh, (W-1)*s-2p+kw]
template <typename S>
TensorPtr<S> conv_transpose2d(Graph<S>* g, const TensorPtr<S>& x, const TensorPtr<S>& k, int stride,
                              int padding) {
    detail::check_conv_args("conv_transpose2d", x->shape(), k->shape(), stride, padding);
    const int64_t B = x->dim(0), Cin = x->dim(1), H = x->dim(2), W = x->dim(3);
    const int64_t Cout = k->dim(1), KH = k->dim(2), KW = k->dim(3);
    if (k->dim(0) != Cin)
        throw ShapeError(detail::str("conv_transpose2d: channel axis mismatch, input axis 1 = ", Cin,
                                     " vs kernel axis 0 = ", k->dim(0)));
    const int64_t OH = (H - 1) * stride - 2 * padding + KH;
    const int64_t OW = (W - 1) * stride - 2 * padding + KW;
    if (OH <= 0 || OW <= 0)
        throw ShapeError(detail::str("conv_transpose2d: non-positive output extent ", OH, "x", OW,
                                     " on spatial axes 2,3"));

    const bool track = detail::tracked<S>(g, {x.get(), k.get()});
    auto out = detail::make_output<S>({B, Cout, OH, OW}, track);

    const S* xd = x->data().data();
    const S* kd = k->data().data();
    S* od = out->data().data();

    // gather form: out[oh,ow] collects x[ih,iw] where ih*s - p + kh == oh
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t kh = 0; kh < KH; ++kh) {
                            const int64_t num_h = oh + padding - kh;
                            if (num_h < 0 || num_h % stride) continue;
                            const int64_t ih = num_h / stride;
                            if (ih >= H) continue;
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const int64_t num_w = ow + padding - kw;
                                if (num_w < 0 || num_w % stride) continue;
                                const int64_t iw = num_w / stride;
                                if (iw >= W) continue;
                                acc += static_cast<double>(xd[((b * Cin + ci) * H + ih) * W + iw]) *
                                       static_cast<double>(kd[((ci * Cout + co) * KH + kh) * KW + kw]);
                            }
                        }
                    od[((b * Cout + co) * OH + oh) * OW + ow] = static_cast<S>(acc);
                }

    if (track) {
        const int s = stride, p = padding;
        g->record([out, x, k, B, Cin, H, W, Cout, KH, KW, OH, OW, s, p]() {
            const S* god = out->grad().data();
            if (x->requires_grad()) {
                // adjoint of scatter: plain conv2d of the upstream gradient
                S* gx = x->grad().data();
                const S* kd = k->data().data();
#pragma omp parallel for schedule(static)
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t ih = 0; ih < H; ++ih)
                            for (int64_t iw = 0; iw < W; ++iw) {
                                double acc = 0.0;
                                for (int64_t co = 0; co < Cout; ++co)
                                    for (int64_t kh = 0; kh < KH; ++kh) {
                                        const int64_t oh = ih * s - p + kh;
                                        if (oh < 0 || oh >= OH) continue;
                                        for (int64_t kw = 0; kw < KW; ++kw) {
                                            const int64_t ow = iw * s - p + kw;
                                            if (ow < 0 || ow >= OW) continue;
                                            acc += static_cast<double>(
                                                       god[((b * Cout + co) * OH + oh) * OW + ow]) *
                                                   static_cast<double>(
                                                       kd[((ci * Cout + co) * KH + kh) * KW + kw]);
                                        }
                                    }
                                gx[((b * Cin + ci) * H + ih) * W + iw] += static_cast<S>(acc);
                            }
            }
            if (k->requires_grad()) {
                S* gk = k->grad().data();
                const S* xd = x->data().data();
#pragma omp parallel for collapse(2) schedule(static)
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t co = 0; co < Cout; ++co)
                        for (int64_t kh = 0; kh < KH; ++kh)
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                double acc = 0.0;
                                for (int64_t b = 0; b < B; ++b)
                                    for (int64_t ih = 0; ih < H; ++ih) {
                                        const int64_t oh = ih * s - p + kh;
                                        if (oh < 0 || oh >= OH) continue;
                                        for (int64_t iw = 0; iw < W; ++iw) {
                                            const int64_t ow = iw * s - p + kw;
                                            if (ow < 0 || ow >= OW) continue;
                                            acc += static_cast<double>(
                                                       xd[((b * Cin + ci) * H + ih) * W + iw]) *
                                                   static_cast<double>(
                                                       god[((b * Cout + co) * OH + oh) * OW + ow]);
                                        }
                                    }
                                gk[((ci * Cout + co) * KH + kh) * KW + kw] += static_cast<S>(acc);
                            }
            }
        });
    }
    return out;
}

// maxpool2d; ties resolve to the first element in row-major window scan.
template <typename S>
TensorPtr<S> maxpool2d(Graph<S>* g, const TensorPtr<S>& x, int k, int stride) {
    if (x->rank() != 4) throw ShapeError(detail::str("maxpool2d: input must be rank 4, got ", x->rank()));
    if (k < 1 || stride < 1) throw ConfigError("maxpool2d: window and stride must be >= 1");
    const int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    if (k > H || k > W)
        throw ShapeError(detail::str("maxpool2d: window ", k, " larger than input ", H, "x", W,
                                     " on spatial axes 2,3"));
    const int64_t OH = (H - k) / stride + 1;
    const int64_t OW = (W - k) / stride + 1;

    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = detail::make_output<S>({B, C, OH, OW}, track);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out->numel()));

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    int64_t best_idx = -1;
                    S best = S(0);
                    for (int64_t dh = 0; dh < k; ++dh)
                        for (int64_t dw = 0; dw < k; ++dw) {
                            const int64_t ih = oh * stride + dh, iw = ow * stride + dw;
                            const int64_t idx = ((b * C + c) * H + ih) * W + iw;
                            const S v = x->data()[idx];
                            if (best_idx < 0 || v > best) {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    const int64_t o = ((b * C + c) * OH + oh) * OW + ow;
                    out->data()[o] = best;
                    (*argmax)[o] = best_idx;
                }

    if (track) {
        g->record([out, x, argmax]() {
            for (int64_t o = 0; o < out->numel(); ++o) x->grad()[(*argmax)[o]] += out->grad()[o];
        });
    }
    return out;
}

// reshape (copying); one extent may be -1 and is inferred.
template <typename S>
TensorPtr<S> reshape(Graph<S>* g, const TensorPtr<S>& x, Shape new_shape) {
    int64_t known = 1, infer_axis = -1;
    for (size_t i = 0; i < new_shape.size(); ++i) {
        if (new_shape[i] == -1) {
            if (infer_axis >= 0) throw ShapeError("reshape: more than one -1 extent");
            infer_axis = static_cast<int64_t>(i);
        } else if (new_shape[i] <= 0) {
            throw ShapeError(detail::str("reshape: bad extent ", new_shape[i], " on axis ", i));
        } else {
            known *= new_shape[i];
        }
    }
    if (infer_axis >= 0) {
        if (x->numel() % known)
            throw ShapeError(detail::str("reshape: cannot infer axis ", infer_axis, ", ", x->numel(),
                                         " not divisible by ", known));
        new_shape[static_cast<size_t>(infer_axis)] = x->numel() / known;
    }
    if (shape_numel(new_shape) != x->numel())
        throw ShapeError(detail::str("reshape: numel mismatch ", detail::shape_str(x->shape()), " -> ",
                                     detail::shape_str(new_shape)));

    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = std::make_shared<BasicTensor<S>>(new_shape, x->data());
    if (track) {
        out->set_requires_grad(true);
        g->record([out, x]() {
            for (int64_t i = 0; i < x->numel(); ++i) x->grad()[i] += out->grad()[i];
        });
    }
    return out;
}

// nearest-neighbor spatial upsampling by an integer factor.
template <typename S>
TensorPtr<S> upsample_nearest2d(Graph<S>* g, const TensorPtr<S>& x, int factor) {
    if (x->rank() != 4) throw ShapeError(detail::str("upsample_nearest2d: input must be rank 4, got ", x->rank()));
    if (factor < 1) throw ConfigError(detail::str("upsample_nearest2d: factor must be >= 1, got ", factor));
    if (factor == 1) return x;
    const int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    const int64_t OH = H * factor, OW = W * factor;
    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = detail::make_output<S>({B, C, OH, OW}, track);
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow)
                out->data()[(bc * OH + oh) * OW + ow] = x->data()[(bc * H + oh / factor) * W + ow / factor];
    if (track) {
        g->record([out, x, B, C, H, W, OH, OW, factor]() {
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow)
                        x->grad()[(bc * H + oh / factor) * W + ow / factor] +=
                            out->grad()[(bc * OH + oh) * OW + ow];
        });
    }
    return out;
}

// full reduction to a scalar tensor; accumulates in double.
template <typename S>
TensorPtr<S> sum(Graph<S>* g, const TensorPtr<S>& x) {
    const bool track = detail::tracked<S>(g, {x.get()});
    auto out = detail::make_output<S>({1}, track);
    double acc = 0.0;
    for (S v : x->data()) acc += static_cast<double>(v);
    out->data()[0] = static_cast<S>(acc);
    if (track) {
        g->record([out, x]() {
            const S go = out->grad()[0];
            for (int64_t i = 0; i < x->numel(); ++i) x->grad()[i] += go;
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> mean(Graph<S>* g, const TensorPtr<S>& x) {
    auto s = sum(g, x);
    return affine(g, s, 1.0 / static_cast<double>(x->numel()), 0.0);
}

}  // namespace s2i
