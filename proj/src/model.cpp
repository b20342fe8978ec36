#include "countsteer/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <type_traits>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatrixXf = Mat<float>;
using GradMap = Eigen::Map<RowMat<float>>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstColMapF = Eigen::Map<const MatrixXf>;
// Activation buffers share Eigen's alignment so that vectorized kernels take
// the same path on every call and results are bitwise reproducible.
template <class T>
using Buf = std::vector<T, AlignedAllocator<T>>;

constexpr int tokens_per_condition = 2;

std::string cat(std::string_view a, std::string_view b) { return std::string(a) + std::string(b); }

// Read access to the parameters in scalar type T. The float instance views
// the model in place; other types hold converted copies.
template <class T>
class Params {
public:
    explicit Params(const ModelState& m) : m_(m) {
        if constexpr (!std::is_same_v<T, float>) {
            copies_.resize(m.tensor_count());
            for (std::size_t i = 0; i < m.tensor_count(); ++i) {
                copies_[i].assign(m.tensor(i).data.begin(), m.tensor(i).data.end());
            }
        }
    }

    const ModelConfig& config() const { return m_.config(); }

    // nullptr when absent.
    const T* find(std::string_view name) const {
        for (std::size_t i = 0; i < m_.tensor_count(); ++i) {
            if (m_.name(i) != name) continue;
            if constexpr (std::is_same_v<T, float>) {
                return m_.tensor(i).data.data();
            } else {
                return copies_[i].data();
            }
        }
        return nullptr;
    }

    const Tensor& tensor(std::string_view name) const {
        const Tensor* t = m_.find(name);
        if (!t) throw InvalidArgument("model is missing tensor " + std::string(name));
        return *t;
    }

    Eigen::Map<const RowMat<T>> weight(std::string_view name) const {
        const Tensor& t = tensor(name);
        const auto rows = static_cast<Eigen::Index>(t.dims[0]);
        return {find(name), rows, static_cast<Eigen::Index>(t.size()) / rows};
    }

    Eigen::Map<const Vec<T>> bias(std::string_view name, int n) const { return {find(name), n}; }

private:
    const ModelState& m_;
    std::vector<Buf<T>> copies_;
};

GradMap grad_weight(ModelState& g, std::string_view name) {
    Tensor* t = g.find(name);
    const auto rows = static_cast<Eigen::Index>(t->dims[0]);
    return GradMap(t->data.data(), rows, static_cast<Eigen::Index>(t->size()) / rows);
}

// Feature map stored position-major with channels contiguous:
// index ((n * h + y) * w + x) * c + ch. As a matrix: c rows, n*h*w columns.
template <class T>
struct Fmap {
    int c = 0, h = 0, w = 0, n = 0;
    Buf<T> v;

    Fmap() = default;
    Fmap(int c_, int h_, int w_, int n_)
        : c(c_), h(h_), w(w_), n(n_), v(static_cast<std::size_t>(c_) * h_ * w_ * n_, T(0)) {}

    int positions() const { return h * w; }
    int cols() const { return n * h * w; }
    Eigen::Map<Mat<T>> mat() { return {v.data(), c, cols()}; }
    Eigen::Map<const Mat<T>> mat() const { return {v.data(), c, cols()}; }
};

template <class T>
Fmap<T> silu_forward(const Fmap<T>& z) {
    Fmap<T> a(z.c, z.h, z.w, z.n);
    const auto zin = z.mat().array();
    a.mat().array() = zin / (T(1) + (-zin).exp());
    return a;
}

// d *= silu'(z) where silu'(z) = s (1 + z (1 - s)), s = sigmoid(z).
template <class Z, class D>
void apply_silu_grad(const Z& z, D&& d) {
    const auto sig = (1.0f + (-z).exp()).inverse();
    d *= sig * (1.0f + z * (1.0f - sig));
}

void silu_backward(const Fmap<float>& z, Fmap<float>& d) { apply_silu_grad(z.mat().array(), d.mat().array()); }

// ---------------------------------------------------------------------------
// 3x3 convolution, padding 1, via im2col. Column j of `cols` holds the
// 9 * c_in receptive field of output position j, tap-major.
// ---------------------------------------------------------------------------

int conv_out_extent(int extent, int stride) { return (extent - 1) / stride + 1; }

template <class T>
void im2col(const Fmap<T>& in, int stride, Buf<T>& cols) {
    const int oh = conv_out_extent(in.h, stride);
    const int ow = conv_out_extent(in.w, stride);
    const int k = 9 * in.c;
    cols.resize(static_cast<std::size_t>(k) * in.n * oh * ow);
    const std::size_t chan_bytes = sizeof(T) * static_cast<std::size_t>(in.c);
    for (int n = 0; n < in.n; ++n) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T* col = cols.data() + (static_cast<std::size_t>(n * oh + oy) * ow + ox) * k;
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = oy * stride + ky - 1;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = ox * stride + kx - 1;
                        T* dst = col + (ky * 3 + kx) * in.c;
                        if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) {
                            std::memset(dst, 0, chan_bytes);
                        } else {
                            std::memcpy(dst, in.v.data() + (static_cast<std::size_t>(n * in.h + iy) * in.w + ix) * in.c,
                                        chan_bytes);
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const float* dcols, int stride, Fmap<float>& d_in) {
    const int oh = conv_out_extent(d_in.h, stride);
    const int ow = conv_out_extent(d_in.w, stride);
    const int k = 9 * d_in.c;
    for (int n = 0; n < d_in.n; ++n) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const float* col = dcols + (static_cast<std::size_t>(n * oh + oy) * ow + ox) * k;
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= d_in.h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= d_in.w) continue;
                        const float* src = col + (ky * 3 + kx) * d_in.c;
                        float* dst = d_in.v.data() + (static_cast<std::size_t>(n * d_in.h + iy) * d_in.w + ix) * d_in.c;
                        for (int ch = 0; ch < d_in.c; ++ch) dst[ch] += src[ch];
                    }
                }
            }
        }
    }
}

template <class T>
Fmap<T> conv_forward(const Params<T>& m, std::string_view prefix, const Fmap<T>& in, int stride,
                     Buf<T>& cols) {
    const Tensor& wt = m.tensor(cat(prefix, ".w"));
    if (static_cast<int>(wt.dims[3]) != in.c) {
        throw ShapeMismatch(std::string(prefix) + ": expected " + std::to_string(wt.dims[3]) +
                            " input channels, got " + std::to_string(in.c));
    }
    im2col(in, stride, cols);
    Fmap<T> out(static_cast<int>(wt.dims[0]), conv_out_extent(in.h, stride), conv_out_extent(in.w, stride), in.n);
    const Eigen::Map<const Mat<T>> colm(cols.data(), 9 * in.c, out.cols());
    out.mat().noalias() = m.weight(cat(prefix, ".w")) * colm;
    if (m.find(cat(prefix, ".b"))) out.mat().colwise() += m.bias(cat(prefix, ".b"), out.c);
    return out;
}

// Accumulates weight/bias gradients; adds the input gradient into d_in when given.
void conv_backward(const Params<float>& m, std::string_view prefix, int in_c, int stride,
                   const Buf<float>& cols, const Fmap<float>& d_out, ModelState& g, Fmap<float>* d_in) {
    const ConstColMapF colm(cols.data(), 9 * in_c, d_out.cols());
    grad_weight(g, cat(prefix, ".w")).noalias() += d_out.mat() * colm.transpose();
    if (Tensor* gb = g.find(cat(prefix, ".b"))) {
        VecMap(gb->data.data(), d_out.c) += d_out.mat().rowwise().sum();
    }
    if (d_in) {
        MatrixXf dcols = m.weight(cat(prefix, ".w")).transpose() * d_out.mat();
        col2im_add(dcols.data(), stride, *d_in);
    }
}

// Stride-1 convolution on a zero-padded copy of the input. With every
// sample laid out on an (h+2) x (w+2) grid, tap (ky, kx) of output grid
// index i reads padded index i + ky * (w+2) + kx, so each tap is a single
// GEMM over a shifted contiguous view. Grid columns with y >= h or x >= w
// are junk and dropped.
template <class T>
struct Padded {
    int c = 0, h = 0, w = 0, n = 0;
    Buf<T> v;  // c x (grid + tail)

    int wp() const { return w + 2; }
    Eigen::Index grid() const { return static_cast<Eigen::Index>(n) * (h + 2) * wp(); }
    Eigen::Index tail() const { return 2 * wp() + 2; }
    std::size_t offset(int ni, int y, int x) const {
        return static_cast<std::size_t>((static_cast<Eigen::Index>(ni) * (h + 2) + y) * wp() + x);
    }
};

template <class T>
void pad_input(const Fmap<T>& in, Padded<T>& p) {
    p.c = in.c;
    p.h = in.h;
    p.w = in.w;
    p.n = in.n;
    p.v.assign(static_cast<std::size_t>(in.c) * (p.grid() + p.tail()), T(0));
    const std::size_t row = static_cast<std::size_t>(in.w) * in.c;
    for (int ni = 0; ni < in.n; ++ni) {
        for (int y = 0; y < in.h; ++y) {
            std::memcpy(p.v.data() + p.offset(ni, y + 1, 1) * in.c,
                        in.v.data() + (static_cast<std::size_t>(ni * in.h + y) * in.w) * in.c, row * sizeof(T));
        }
    }
}

template <class T>
Fmap<T> conv_same_forward(const Params<T>& m, std::string_view prefix, const Fmap<T>& in, Padded<T>& p) {
    const Tensor& wt = m.tensor(cat(prefix, ".w"));
    if (static_cast<int>(wt.dims[3]) != in.c) {
        throw ShapeMismatch(std::string(prefix) + ": expected " + std::to_string(wt.dims[3]) +
                            " input channels, got " + std::to_string(in.c));
    }
    pad_input(in, p);
    const int cout = static_cast<int>(wt.dims[0]);
    const auto w = m.weight(cat(prefix, ".w"));
    Mat<T> acc = Mat<T>::Zero(cout, p.grid());
    for (int tap = 0; tap < 9; ++tap) {
        const std::size_t shift = static_cast<std::size_t>((tap / 3) * p.wp() + tap % 3);
        acc.noalias() += w.middleCols(tap * in.c, in.c) *
                         Eigen::Map<const Mat<T>>(p.v.data() + shift * in.c, in.c, p.grid());
    }
    Fmap<T> out(cout, in.h, in.w, in.n);
    const std::size_t row = static_cast<std::size_t>(in.w) * cout;
    for (int ni = 0; ni < in.n; ++ni) {
        for (int y = 0; y < in.h; ++y) {
            std::memcpy(out.v.data() + (static_cast<std::size_t>(ni * in.h + y) * in.w) * cout,
                        acc.data() + p.offset(ni, y, 0) * cout, row * sizeof(T));
        }
    }
    if (m.find(cat(prefix, ".b"))) out.mat().colwise() += m.bias(cat(prefix, ".b"), cout);
    return out;
}

void conv_same_backward(const Params<float>& m, std::string_view prefix, const Padded<float>& p,
                        const Fmap<float>& d_out, ModelState& g, Fmap<float>* d_in) {
    const int cout = d_out.c;
    const int cin = p.c;
    MatrixXf dg = MatrixXf::Zero(cout, p.grid());
    const std::size_t row = static_cast<std::size_t>(p.w) * cout;
    for (int ni = 0; ni < p.n; ++ni) {
        for (int y = 0; y < p.h; ++y) {
            std::memcpy(dg.data() + p.offset(ni, y, 0) * cout,
                        d_out.v.data() + (static_cast<std::size_t>(ni * p.h + y) * p.w) * cout, row * sizeof(float));
        }
    }
    GradMap gw = grad_weight(g, cat(prefix, ".w"));
    const auto w = m.weight(cat(prefix, ".w"));
    Buf<float> dp;
    if (d_in) dp.assign(static_cast<std::size_t>(cin) * (p.grid() + p.tail()), 0.0f);
    for (int tap = 0; tap < 9; ++tap) {
        const std::size_t shift = static_cast<std::size_t>((tap / 3) * p.wp() + tap % 3);
        const ConstColMapF x(p.v.data() + shift * cin, cin, p.grid());
        gw.middleCols(tap * cin, cin).noalias() += dg * x.transpose();
        if (d_in) {
            Eigen::Map<MatrixXf>(dp.data() + shift * cin, cin, p.grid()).noalias() +=
                w.middleCols(tap * cin, cin).transpose() * dg;
        }
    }
    if (Tensor* gb = g.find(cat(prefix, ".b"))) VecMap(gb->data.data(), cout) += d_out.mat().rowwise().sum();
    if (!d_in) return;
    for (int ni = 0; ni < p.n; ++ni) {
        for (int y = 0; y < p.h; ++y) {
            Eigen::Map<Eigen::ArrayXf>(d_in->v.data() + (static_cast<std::size_t>(ni * p.h + y) * p.w) * cin,
                                       static_cast<Eigen::Index>(p.w) * cin) +=
                Eigen::Map<const Eigen::ArrayXf>(dp.data() + p.offset(ni, y + 1, 1) * cin,
                                                 static_cast<Eigen::Index>(p.w) * cin);
        }
    }
}

// 1x1 projection (per-position linear map).
template <class T>
Fmap<T> pointwise_forward(const Params<T>& m, std::string_view prefix, const Fmap<T>& in) {
    const auto w = m.weight(cat(prefix, ".w"));
    Fmap<T> out(static_cast<int>(w.rows()), in.h, in.w, in.n);
    out.mat().noalias() = w * in.mat();
    if (m.find(cat(prefix, ".b"))) out.mat().colwise() += m.bias(cat(prefix, ".b"), out.c);
    return out;
}

void pointwise_backward(const Params<float>& m, std::string_view prefix, const Fmap<float>& in,
                        const Fmap<float>& d_out, ModelState& g, Fmap<float>& d_in) {
    grad_weight(g, cat(prefix, ".w")).noalias() += d_out.mat() * in.mat().transpose();
    if (Tensor* gb = g.find(cat(prefix, ".b"))) {
        VecMap(gb->data.data(), d_out.c) += d_out.mat().rowwise().sum();
    }
    d_in.mat().noalias() += m.weight(cat(prefix, ".w")).transpose() * d_out.mat();
}

template <class T>
Fmap<T> upsample2(const Fmap<T>& in) {
    Fmap<T> out(in.c, in.h * 2, in.w * 2, in.n);
    for (int n = 0; n < in.n; ++n) {
        for (int y = 0; y < out.h; ++y) {
            for (int x = 0; x < out.w; ++x) {
                std::memcpy(out.v.data() + (static_cast<std::size_t>(n * out.h + y) * out.w + x) * in.c,
                            in.v.data() + (static_cast<std::size_t>(n * in.h + y / 2) * in.w + x / 2) * in.c,
                            sizeof(T) * in.c);
            }
        }
    }
    return out;
}

// Adjoint of upsample2: sums each 2x2 block.
Fmap<float> upsample2_backward(const Fmap<float>& d_out) {
    Fmap<float> d_in(d_out.c, d_out.h / 2, d_out.w / 2, d_out.n);
    for (int n = 0; n < d_out.n; ++n) {
        for (int y = 0; y < d_out.h; ++y) {
            for (int x = 0; x < d_out.w; ++x) {
                const float* src = d_out.v.data() + (static_cast<std::size_t>(n * d_out.h + y) * d_out.w + x) * d_out.c;
                float* dst = d_in.v.data() + (static_cast<std::size_t>(n * d_in.h + y / 2) * d_in.w + x / 2) * d_out.c;
                for (int ch = 0; ch < d_out.c; ++ch) dst[ch] += src[ch];
            }
        }
    }
    return d_in;
}

template <class T>
void add_into(Fmap<T>& dst, const Fmap<T>& src) {
    dst.mat() += src.mat();
}

// Per-sample channel bias from the shared time embedding.
template <class T>
void add_time_bias(const Params<T>& m, std::string_view prefix, const Mat<T>& time_act, Fmap<T>& f) {
    Mat<T> bias = m.weight(cat(prefix, ".w")) * time_act;
    if (m.find(cat(prefix, ".b"))) bias.colwise() += m.bias(cat(prefix, ".b"), f.c);
    for (int n = 0; n < f.n; ++n) {
        Eigen::Map<Mat<T>>(f.v.data() + static_cast<std::size_t>(n) * f.positions() * f.c, f.c, f.positions())
            .colwise() += bias.col(n);
    }
}

void time_bias_backward(const Params<float>& m, std::string_view prefix, const MatrixXf& time_act,
                        const Fmap<float>& d_f, ModelState& g, MatrixXf& d_time_act) {
    MatrixXf d_bias(d_f.c, d_f.n);
    for (int n = 0; n < d_f.n; ++n) {
        d_bias.col(n) =
            ConstColMapF(d_f.v.data() + static_cast<std::size_t>(n) * d_f.positions() * d_f.c, d_f.c, d_f.positions())
                .rowwise()
                .sum();
    }
    grad_weight(g, cat(prefix, ".w")).noalias() += d_bias * time_act.transpose();
    if (Tensor* gb = g.find(cat(prefix, ".b"))) VecMap(gb->data.data(), d_f.c) += d_bias.rowwise().sum();
    d_time_act.noalias() += m.weight(cat(prefix, ".w")).transpose() * d_bias;
}

// ---------------------------------------------------------------------------
// Cross-attention over the two condition tokens
// ---------------------------------------------------------------------------

template <class T>
struct AttentionCache {
    Mat<T> q;                // query_dim x (n * P), after interception
    Buf<T> weights;  // 2 x (n * P)
    Mat<T> mixed;            // query_dim x (n * P)
    std::vector<Mat<T>> tokens, keys, values;  // per sample: token_dim x 2, query_dim x 2
};

template <class T>
Mat<T> token_matrix(const Params<T>& m, const ConditionTokens& cond) {
    const Tensor& e = m.tensor("token.embed");
    const int d = static_cast<int>(e.dims[1]);
    const T* table = m.find("token.embed");
    Mat<T> out(d, tokens_per_condition);
    for (int j = 0; j < tokens_per_condition; ++j) {
        out.col(j) = Eigen::Map<const Vec<T>>(table + static_cast<std::size_t>(cond.ids[j]) * d, d);
    }
    return out;
}

template <class T>
Fmap<T> attention_forward(const Params<T>& m, std::string_view prefix, int block, const Fmap<T>& x,
                          const std::vector<int>& timesteps, const std::vector<ConditionTokens>& conds,
                          const ForwardOptions& opt, AttentionCache<T>& ac) {
    const auto wq = m.weight(cat(prefix, ".q.w"));
    const int dq = static_cast<int>(wq.rows());
    const int positions = x.positions();
    ac.q.noalias() = wq * x.mat();
    if (m.find(cat(prefix, ".q.b"))) ac.q.colwise() += m.bias(cat(prefix, ".q.b"), dq);

    if constexpr (std::is_same_v<T, float>) {
        if (opt.interceptor) {
            const HookSite site = hook_sites(m.config())[block];
            for (int n = 0; n < x.n; ++n) {
                HookContext ctx{opt.step, timesteps[n], opt.branch, site};
                opt.interceptor->intercept(
                    ctx, QueryView{ac.q.data() + static_cast<std::size_t>(n) * positions * dq, dq, positions});
            }
        }
    }

    const T scale = T(1) / std::sqrt(static_cast<T>(dq));
    ac.weights.resize(static_cast<std::size_t>(tokens_per_condition) * x.cols());
    ac.mixed.resize(dq, x.cols());
    ac.tokens.resize(x.n);
    ac.keys.resize(x.n);
    ac.values.resize(x.n);
    for (int n = 0; n < x.n; ++n) {
        ac.tokens[n] = token_matrix(m, conds[n]);
        ac.keys[n].noalias() = m.weight(cat(prefix, ".k.w")) * ac.tokens[n];
        ac.values[n].noalias() = m.weight(cat(prefix, ".v.w")) * ac.tokens[n];
        const auto qn = ac.q.middleCols(static_cast<Eigen::Index>(n) * positions, positions);
        const Mat<T> logits = (ac.keys[n].transpose() * qn) * scale;  // 2 x P
        Eigen::Map<Mat<T>> wts(ac.weights.data() + static_cast<std::size_t>(n) * positions * tokens_per_condition,
                               tokens_per_condition, positions);
        for (int p = 0; p < positions; ++p) {
            const T mx = std::max(logits(0, p), logits(1, p));
            const T e0 = std::exp(logits(0, p) - mx);
            const T e1 = std::exp(logits(1, p) - mx);
            const T sum = e0 + e1;
            wts(0, p) = e0 / sum;
            wts(1, p) = e1 / sum;
        }
        ac.mixed.middleCols(static_cast<Eigen::Index>(n) * positions, positions).noalias() = ac.values[n] * wts;
    }

    Fmap<T> out(x.c, x.h, x.w, x.n);
    out.mat().noalias() = m.weight(cat(prefix, ".o.w")) * ac.mixed;
    if (m.find(cat(prefix, ".o.b"))) out.mat().colwise() += m.bias(cat(prefix, ".o.b"), x.c);
    out.mat() += x.mat();  // residual
    return out;
}

// d_x receives the residual path plus the query path.
void attention_backward(const Params<float>& m, std::string_view prefix, const Fmap<float>& x,
                        const std::vector<ConditionTokens>& conds, const AttentionCache<float>& ac,
                        const Fmap<float>& d_out, ModelState& g, Fmap<float>& d_x) {
    const int dq = static_cast<int>(ac.q.rows());
    const int positions = x.positions();
    const float scale = 1.0f / std::sqrt(static_cast<float>(dq));

    add_into(d_x, d_out);
    grad_weight(g, cat(prefix, ".o.w")).noalias() += d_out.mat() * ac.mixed.transpose();
    if (Tensor* gb = g.find(cat(prefix, ".o.b"))) VecMap(gb->data.data(), x.c) += d_out.mat().rowwise().sum();
    const MatrixXf d_mixed = m.weight(cat(prefix, ".o.w")).transpose() * d_out.mat();

    MatrixXf d_q(dq, x.cols());
    GradMap gk = grad_weight(g, cat(prefix, ".k.w"));
    GradMap gv = grad_weight(g, cat(prefix, ".v.w"));
    Tensor* g_embed = g.find("token.embed");
    const int token_dim = static_cast<int>(g_embed->dims[1]);
    for (int n = 0; n < x.n; ++n) {
        const Eigen::Index off = static_cast<Eigen::Index>(n) * positions;
        ConstColMapF wts(ac.weights.data() + static_cast<std::size_t>(off) * tokens_per_condition,
                         tokens_per_condition, positions);
        const auto dm = d_mixed.middleCols(off, positions);
        const MatrixXf d_values = dm * wts.transpose();     // dq x 2
        MatrixXf d_logits = ac.values[n].transpose() * dm;  // 2 x P
        for (int p = 0; p < positions; ++p) {
            const float dot = wts(0, p) * d_logits(0, p) + wts(1, p) * d_logits(1, p);
            d_logits(0, p) = wts(0, p) * (d_logits(0, p) - dot) * scale;
            d_logits(1, p) = wts(1, p) * (d_logits(1, p) - dot) * scale;
        }
        d_q.middleCols(off, positions).noalias() = ac.keys[n] * d_logits;
        const MatrixXf d_keys = ac.q.middleCols(off, positions) * d_logits.transpose();  // dq x 2
        gk.noalias() += d_keys * ac.tokens[n].transpose();
        gv.noalias() += d_values * ac.tokens[n].transpose();
        const MatrixXf d_tokens = m.weight(cat(prefix, ".k.w")).transpose() * d_keys +
                                  m.weight(cat(prefix, ".v.w")).transpose() * d_values;
        for (int j = 0; j < tokens_per_condition; ++j) {
            VecMap(g_embed->data.data() + static_cast<std::size_t>(conds[n].ids[j]) * token_dim, token_dim) +=
                d_tokens.col(j);
        }
    }
    grad_weight(g, cat(prefix, ".q.w")).noalias() += d_q * x.mat().transpose();
    if (Tensor* gb = g.find(cat(prefix, ".q.b"))) VecMap(gb->data.data(), dq) += d_q.rowwise().sum();
    d_x.mat().noalias() += m.weight(cat(prefix, ".q.w")).transpose() * d_q;
}

template <class T>
Mat<T> silu_matrix(const Mat<T>& z) {
    return (z.array() / (T(1) + (-z.array()).exp())).matrix();
}

void silu_matrix_backward(const MatrixXf& z, MatrixXf& d) { apply_silu_grad(z.array(), d.array()); }

// Activations of one forward pass.
template <class T>
struct ForwardState {
    int n = 0;
    std::vector<ConditionTokens> conds;
    Mat<T> temb0, z1, s1, temb, st;
    Buf<T> cols_down, cols_mid_down;
    Padded<T> pad_in, pad_mid, pad_up, pad_out, pad_final;
    Fmap<T> x, c0, a0, c1, a1, h1, c2, a2, c3, a3, h3, u, c4, a4, h4, p, v, c5, a5;
    AttentionCache<T> attn[hooked_block_count];
};

void check_batch(const ModelConfig& cfg, const Batch& batch) {
    const int n = batch.size;
    const int side = cfg.canvas;
    if (n < 1 || batch.x.size() != static_cast<std::size_t>(n) * side * side ||
        batch.timesteps.size() != static_cast<std::size_t>(n) || batch.conds.size() != static_cast<std::size_t>(n)) {
        throw ShapeMismatch("batch arrays inconsistent with batch size " + std::to_string(n));
    }
    for (const auto& c : batch.conds) {
        for (int id : c.ids) {
            if (id < 0 || id >= token_vocab_size) throw InvalidArgument("condition token out of range");
        }
    }
}

template <class T>
std::vector<T> run_forward(const Params<T>& m, const Batch& batch, ForwardState<T>& s, const ForwardOptions& opt) {
    const ModelConfig& cfg = m.config();
    check_batch(cfg, batch);
    const int n = batch.size;
    const int side = cfg.canvas;
    s.n = n;
    s.conds = batch.conds;

    // Time embedding MLP.
    s.temb0.resize(cfg.time_dim, n);
    for (int i = 0; i < n; ++i) {
        const auto e = timestep_embedding(batch.timesteps[i], cfg.time_dim);
        for (int j = 0; j < cfg.time_dim; ++j) s.temb0(j, i) = static_cast<T>(e[j]);
    }
    auto dense = [&](std::string_view prefix, const Mat<T>& in) {
        Mat<T> out = m.weight(cat(prefix, ".w")) * in;
        if (m.find(cat(prefix, ".b"))) out.colwise() += m.bias(cat(prefix, ".b"), static_cast<int>(out.rows()));
        return out;
    };
    s.z1 = dense("time.fc1", s.temb0);
    s.s1 = silu_matrix(s.z1);
    s.temb = dense("time.fc2", s.s1);
    s.st = silu_matrix(s.temb);

    s.x = Fmap<T>(1, side, side, n);
    std::copy(batch.x.begin(), batch.x.end(), s.x.v.begin());

    s.c0 = conv_same_forward(m, "in.conv", s.x, s.pad_in);
    add_time_bias(m, "in.temb", s.st, s.c0);
    s.a0 = silu_forward(s.c0);

    s.c1 = conv_forward(m, "down.conv", s.a0, 2, s.cols_down);
    add_time_bias(m, "down.temb", s.st, s.c1);
    s.a1 = silu_forward(s.c1);
    s.h1 = attention_forward(m, "down.attn", 0, s.a1, batch.timesteps, batch.conds, opt, s.attn[0]);

    s.c2 = conv_forward(m, "mid.down", s.h1, 2, s.cols_mid_down);
    add_time_bias(m, "mid.down_temb", s.st, s.c2);
    s.a2 = silu_forward(s.c2);
    s.c3 = conv_same_forward(m, "mid.conv", s.a2, s.pad_mid);
    add_time_bias(m, "mid.temb", s.st, s.c3);
    s.a3 = silu_forward(s.c3);
    s.h3 = attention_forward(m, "mid.attn", 1, s.a3, batch.timesteps, batch.conds, opt, s.attn[1]);

    s.u = upsample2(s.h3);
    add_into(s.u, s.h1);
    s.c4 = conv_same_forward(m, "up.conv", s.u, s.pad_up);
    add_time_bias(m, "up.temb", s.st, s.c4);
    s.a4 = silu_forward(s.c4);
    s.h4 = attention_forward(m, "up.attn", 2, s.a4, batch.timesteps, batch.conds, opt, s.attn[2]);

    s.p = pointwise_forward(m, "out.proj", s.h4);
    s.v = upsample2(s.p);
    add_into(s.v, s.a0);
    s.c5 = conv_same_forward(m, "out.conv", s.v, s.pad_out);
    add_time_bias(m, "out.temb", s.st, s.c5);
    s.a5 = silu_forward(s.c5);

    Fmap<T> y = conv_same_forward(m, "final.conv", s.a5, s.pad_final);
    return std::vector<T>(y.v.begin(), y.v.end());
}

}  // namespace

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

struct ForwardCache::Impl : ForwardState<float> {};

ForwardCache::ForwardCache() : impl(std::make_unique<Impl>()) {}
ForwardCache::~ForwardCache() = default;
ForwardCache::ForwardCache(ForwardCache&&) noexcept = default;
ForwardCache& ForwardCache::operator=(ForwardCache&&) noexcept = default;

std::span<const float> ForwardCache::attention_weights(int block) const {
    return impl->attn[block].weights;
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<std::uint32_t> d) : dims(std::move(d)) {
    std::size_t n = 1;
    for (auto v : dims) n *= v;
    data.assign(n, 0.0f);
}

std::array<HookSite, hooked_block_count> hook_sites(const ModelConfig& c) {
    return {HookSite{0, c.canvas / 2, c.query_dim, "down-16"},
            HookSite{1, c.canvas / 4, c.query_dim, "mid-8"},
            HookSite{2, c.canvas / 2, c.query_dim, "up-16"}};
}

std::vector<std::pair<std::string, std::vector<std::uint32_t>>> parameter_layout(const ModelConfig& c) {
    using Dims = std::vector<std::uint32_t>;
    std::vector<std::pair<std::string, Dims>> out;
    const auto u = [](int v) { return static_cast<std::uint32_t>(v); };
    auto add = [&](std::string name, Dims d) { out.emplace_back(std::move(name), std::move(d)); };
    auto add_bias = [&](const std::string& name, int n) {
        if (c.use_bias) add(name, {u(n)});
    };
    auto conv = [&](const std::string& p, int cout, int cin) {
        add(p + ".w", {u(cout), 3, 3, u(cin)});
        add_bias(p + ".b", cout);
    };
    auto dense = [&](const std::string& p, int cout, int cin) {
        add(p + ".w", {u(cout), u(cin)});
        add_bias(p + ".b", cout);
    };
    auto attn = [&](const std::string& p, int ch) {
        dense(p + ".q", c.query_dim, ch);
        add(p + ".k.w", {u(c.query_dim), u(c.token_dim)});
        add(p + ".v.w", {u(c.query_dim), u(c.token_dim)});
        dense(p + ".o", ch, c.query_dim);
    };
    const auto& w = c.widths;
    dense("time.fc1", c.time_hidden, c.time_dim);
    dense("time.fc2", c.time_hidden, c.time_hidden);
    add("token.embed", {u(token_vocab_size), u(c.token_dim)});
    conv("in.conv", w[0], 1);
    dense("in.temb", w[0], c.time_hidden);
    conv("down.conv", w[1], w[0]);
    dense("down.temb", w[1], c.time_hidden);
    attn("down.attn", w[1]);
    conv("mid.down", w[2], w[1]);
    dense("mid.down_temb", w[2], c.time_hidden);
    conv("mid.conv", w[2], w[2]);
    dense("mid.temb", w[2], c.time_hidden);
    attn("mid.attn", w[2]);
    conv("up.conv", w[3], w[2]);
    dense("up.temb", w[3], c.time_hidden);
    attn("up.attn", w[3]);
    dense("out.proj", w[4], w[3]);
    conv("out.conv", w[4], w[4]);
    dense("out.temb", w[4], c.time_hidden);
    conv("final.conv", 1, w[4]);
    return out;
}

ModelState ModelState::initialize(const ModelConfig& config, std::uint64_t seed) {
    if (config.widths[1] != config.widths[2] || config.widths[2] != config.widths[3] ||
        config.widths[0] != config.widths[4]) {
        throw InvalidArgument("skip connections need widths[1]==widths[2]==widths[3] and widths[0]==widths[4]");
    }
    if (config.canvas % 4 != 0) throw InvalidArgument("canvas must be divisible by 4");
    ModelState m;
    m.config_ = config;
    Rng rng(seed);
    for (auto& [name, dims] : parameter_layout(config)) {
        Tensor t(dims);
        const bool is_bias = name.ends_with(".b");
        if (!is_bias) {
            double stddev = 1.0;
            if (name != "token.embed") {
                std::size_t fan_in = 1;
                for (std::size_t i = 1; i < dims.size(); ++i) fan_in *= dims[i];
                stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
            }
            for (float& v : t.data) v = static_cast<float>(stddev * standard_normal(rng));
        }
        m.names_.push_back(name);
        m.tensors_.push_back(std::move(t));
    }
    return m;
}

ModelState ModelState::from_tensors(const ModelConfig& config,
                                    std::vector<std::pair<std::string, Tensor>> tensors) {
    const auto layout = parameter_layout(config);
    if (layout.size() != tensors.size()) {
        throw FormatError("model expects " + std::to_string(layout.size()) + " tensors, got " +
                          std::to_string(tensors.size()));
    }
    ModelState m;
    m.config_ = config;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (layout[i].first != tensors[i].first || layout[i].second != tensors[i].second.dims) {
            throw FormatError("tensor " + std::to_string(i) + " \"" + tensors[i].first +
                              "\" does not match expected \"" + layout[i].first + "\"");
        }
        m.names_.push_back(std::move(tensors[i].first));
        m.tensors_.push_back(std::move(tensors[i].second));
    }
    return m;
}

const Tensor* ModelState::find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) return &tensors_[i];
    }
    return nullptr;
}

Tensor* ModelState::find(std::string_view name) {
    return const_cast<Tensor*>(static_cast<const ModelState*>(this)->find(name));
}

std::size_t ModelState::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

float& ModelState::parameter(std::size_t flat_index) {
    for (auto& t : tensors_) {
        if (flat_index < t.size()) return t.data[flat_index];
        flat_index -= t.size();
    }
    throw InvalidArgument("parameter index out of range");
}

float ModelState::parameter(std::size_t flat_index) const {
    return const_cast<ModelState*>(this)->parameter(flat_index);
}

std::string ModelState::describe_parameter(std::size_t flat_index) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        if (flat_index < tensors_[i].size()) return names_[i] + "[" + std::to_string(flat_index) + "]";
        flat_index -= tensors_[i].size();
    }
    return "<out of range>";
}

ModelState ModelState::zeros_like() const {
    ModelState z = *this;
    z.fill_zero();
    return z;
}

void ModelState::fill_zero() {
    for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), 0.0f);
}

bool ModelState::all_finite() const {
    for (const auto& t : tensors_) {
        for (float v : t.data) {
            if (!std::isfinite(v)) return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

std::vector<float> timestep_embedding(int timestep, int dim) {
    const int half = dim / 2;
    std::vector<float> out(dim, 0.0f);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = static_cast<float>(std::sin(timestep * freq));
        out[half + i] = static_cast<float>(std::cos(timestep * freq));
    }
    return out;
}

std::vector<float> forward(const ModelState& m, const Batch& batch, ForwardCache* cache,
                           const ForwardOptions& opt) {
    ForwardCache local;
    ForwardCache::Impl& s = cache ? *cache->impl : *local.impl;
    return run_forward(Params<float>(m), batch, s, opt);
}

std::vector<double> forward_f64(const ModelState& m, const Batch& batch) {
    ForwardState<double> s;
    return run_forward(Params<double>(m), batch, s, ForwardOptions{});
}

void backward(const ModelState& model, const ForwardCache& cache, std::span<const float> d_output,
              ModelState& g) {
    const ForwardCache::Impl& s = *cache.impl;
    const ModelConfig& cfg = model.config();
    const Params<float> m(model);
    if (d_output.size() != s.x.v.size()) throw ShapeMismatch("backward: gradient size mismatch");

    Fmap<float> dy(1, cfg.canvas, cfg.canvas, s.n);
    std::copy(d_output.begin(), d_output.end(), dy.v.begin());
    MatrixXf d_st = MatrixXf::Zero(cfg.time_hidden, s.n);

    Fmap<float> d_a5(s.a5.c, s.a5.h, s.a5.w, s.n);
    conv_same_backward(m, "final.conv", s.pad_final, dy, g, &d_a5);
    silu_backward(s.c5, d_a5);  // now d_c5
    time_bias_backward(m, "out.temb", s.st, d_a5, g, d_st);
    Fmap<float> d_v(s.v.c, s.v.h, s.v.w, s.n);
    conv_same_backward(m, "out.conv", s.pad_out, d_a5, g, &d_v);
    Fmap<float> d_a0 = d_v;  // skip branch
    const Fmap<float> d_p = upsample2_backward(d_v);
    Fmap<float> d_h4(s.h4.c, s.h4.h, s.h4.w, s.n);
    pointwise_backward(m, "out.proj", s.h4, d_p, g, d_h4);

    Fmap<float> d_a4(s.a4.c, s.a4.h, s.a4.w, s.n);
    attention_backward(m, "up.attn", s.a4, s.conds, s.attn[2], d_h4, g, d_a4);
    silu_backward(s.c4, d_a4);
    time_bias_backward(m, "up.temb", s.st, d_a4, g, d_st);
    Fmap<float> d_u(s.u.c, s.u.h, s.u.w, s.n);
    conv_same_backward(m, "up.conv", s.pad_up, d_a4, g, &d_u);
    Fmap<float> d_h1 = d_u;  // skip branch
    const Fmap<float> d_h3 = upsample2_backward(d_u);

    Fmap<float> d_a3(s.a3.c, s.a3.h, s.a3.w, s.n);
    attention_backward(m, "mid.attn", s.a3, s.conds, s.attn[1], d_h3, g, d_a3);
    silu_backward(s.c3, d_a3);
    time_bias_backward(m, "mid.temb", s.st, d_a3, g, d_st);
    Fmap<float> d_a2(s.a2.c, s.a2.h, s.a2.w, s.n);
    conv_same_backward(m, "mid.conv", s.pad_mid, d_a3, g, &d_a2);
    silu_backward(s.c2, d_a2);
    time_bias_backward(m, "mid.down_temb", s.st, d_a2, g, d_st);
    conv_backward(m, "mid.down", s.h1.c, 2, s.cols_mid_down, d_a2, g, &d_h1);

    Fmap<float> d_a1(s.a1.c, s.a1.h, s.a1.w, s.n);
    attention_backward(m, "down.attn", s.a1, s.conds, s.attn[0], d_h1, g, d_a1);
    silu_backward(s.c1, d_a1);
    time_bias_backward(m, "down.temb", s.st, d_a1, g, d_st);
    conv_backward(m, "down.conv", s.a0.c, 2, s.cols_down, d_a1, g, &d_a0);

    silu_backward(s.c0, d_a0);
    time_bias_backward(m, "in.temb", s.st, d_a0, g, d_st);
    conv_same_backward(m, "in.conv", s.pad_in, d_a0, g, nullptr);

    // Time MLP.
    MatrixXf d_temb = d_st;
    silu_matrix_backward(s.temb, d_temb);
    grad_weight(g, "time.fc2.w").noalias() += d_temb * s.s1.transpose();
    if (Tensor* gb = g.find("time.fc2.b")) VecMap(gb->data.data(), cfg.time_hidden) += d_temb.rowwise().sum();
    MatrixXf d_s1 = m.weight("time.fc2.w").transpose() * d_temb;
    silu_matrix_backward(s.z1, d_s1);
    grad_weight(g, "time.fc1.w").noalias() += d_s1 * s.temb0.transpose();
    if (Tensor* gb = g.find("time.fc1.b")) VecMap(gb->data.data(), cfg.time_hidden) += d_s1.rowwise().sum();
}

std::vector<float> predict_noise(const ModelState& model, std::span<const float> x_t, int timestep,
                                 const ConditionTokens& cond, const ForwardOptions& options) {
    Batch b;
    b.size = 1;
    b.x.assign(x_t.begin(), x_t.end());
    b.timesteps = {timestep};
    b.conds = {cond};
    auto eps = forward(model, b, nullptr, options);
    for (float v : eps) {
        if (!std::isfinite(v)) {
            throw NonFiniteActivation("non-finite noise prediction at timestep " + std::to_string(timestep));
        }
    }
    return eps;
}

}  // namespace countsteer
