#include "nuclass/nn/core.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace nuclass::nn {

long ParamSet::count() const {
    long n = 0;
    for (const auto* p : params) n += p->size();
    return n;
}

void ParamSet::zero_grads() {
    for (auto* p : params) p->grad.setZero();
}

void Adam::step(ParamSet& params) {
    ++t_;
    float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (auto* p : params.params) {
        p->adam_m = cfg_.beta1 * p->adam_m + (1.0f - cfg_.beta1) * p->grad;
        p->adam_v.array() =
            cfg_.beta2 * p->adam_v.array() + (1.0f - cfg_.beta2) * p->grad.array().square();
        p->value.array() -=
            cfg_.lr * (p->adam_m.array() / bc1) / ((p->adam_v.array() / bc2).sqrt() + cfg_.eps);
    }
}

void kaiming_init(Mat& w, long fan_in, std::mt19937_64& rng) {
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (long j = 0; j < w.cols(); ++j)
        for (long i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
}

namespace {

inline int out_size(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

void im2col(const Tensor& x, int kernel, int stride, int pad, int oh, int ow, Mat& cols) {
    const int k2 = kernel * kernel;
    const int c = x.c;
    cols.resize(static_cast<long>(c) * k2, static_cast<long>(x.n) * oh * ow);
    // Row layout: (tap, channel) = tap * c + ci, so each tap writes a
    // contiguous c-block per output pixel and whole rows of output pixels
    // copy as strided column maps.
    for (int n = 0; n < x.n; ++n) {
        long in_base = static_cast<long>(n) * x.h * x.w;
        long out_base = static_cast<long>(n) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            long row_col0 = out_base + static_cast<long>(oy) * ow;
            for (int ky = 0; ky < kernel; ++ky) {
                int iy = oy * stride - pad + ky;
                for (int kx = 0; kx < kernel; ++kx) {
                    long tap = static_cast<long>(ky) * kernel + kx;
                    float* dst0 = cols.data() + tap * c + row_col0 * cols.rows();
                    if (iy < 0 || iy >= x.h) {
                        for (int ox = 0; ox < ow; ++ox)
                            std::fill(dst0 + static_cast<long>(ox) * cols.rows(),
                                      dst0 + static_cast<long>(ox) * cols.rows() + c, 0.0f);
                        continue;
                    }
                    const float* src_row = x.data.data() + (in_base + static_cast<long>(iy) * x.w) * c;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        float* dst = dst0 + static_cast<long>(ox) * cols.rows();
                        if (ix < 0 || ix >= x.w) {
                            std::fill(dst, dst + c, 0.0f);
                        } else {
                            std::memcpy(dst, src_row + static_cast<long>(ix) * c,
                                        sizeof(float) * static_cast<size_t>(c));
                        }
                    }
                }
            }
        }
    }
}

void col2im(const Mat& cols, int c, int h, int w, int n, int kernel, int stride, int pad, int oh,
            int ow, Mat& out) {
    out.setZero(c, static_cast<long>(n) * h * w);
    for (int ni = 0; ni < n; ++ni) {
        long in_base = static_cast<long>(ni) * h * w;
        long out_base = static_cast<long>(ni) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            long row_col0 = out_base + static_cast<long>(oy) * ow;
            for (int ky = 0; ky < kernel; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                float* dst_row = out.data() + (in_base + static_cast<long>(iy) * w) * c;
                for (int kx = 0; kx < kernel; ++kx) {
                    long tap = static_cast<long>(ky) * kernel + kx;
                    const float* src0 = cols.data() + tap * c + row_col0 * cols.rows();
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        const float* src = src0 + static_cast<long>(ox) * cols.rows();
                        float* dst = dst_row + static_cast<long>(ix) * c;
                        for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                    }
                }
            }
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(const std::string& name, int in_c_, int out_c_, int kernel_, int stride_,
               std::mt19937_64& rng)
    : in_c(in_c_), out_c(out_c_), kernel(kernel_), stride(stride_), pad(kernel_ / 2),
      weight(name + ".weight", out_c_, in_c_ * kernel_ * kernel_) {
    kaiming_init(weight.value, static_cast<long>(in_c) * kernel * kernel, rng);
}

Tensor Conv2d::forward(const Tensor& x, Ctx& ctx) const {
    int oh = out_size(x.h, kernel, stride, pad);
    int ow = out_size(x.w, kernel, stride, pad);
    Tensor y(out_c, oh, ow, x.n);
    ctx.h = x.h;
    ctx.w = x.w;
    ctx.n = x.n;
    if (kernel == 1 && stride == 1) {
        ctx.cols = x.data; // 1x1: im2col is the identity
        y.data.noalias() = weight.value * x.data;
    } else {
        im2col(x, kernel, stride, pad, oh, ow, ctx.cols);
        y.data.noalias() = weight.value * ctx.cols;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, const Ctx& ctx) {
    weight.grad.noalias() += grad_out.data * ctx.cols.transpose();
    Tensor dx(in_c, ctx.h, ctx.w, ctx.n);
    if (kernel == 1 && stride == 1) {
        dx.data.noalias() = weight.value.transpose() * grad_out.data;
    } else {
        Mat dcols = weight.value.transpose() * grad_out.data;
        col2im(dcols, in_c, ctx.h, ctx.w, ctx.n, kernel, stride, pad, grad_out.h, grad_out.w,
               dx.data);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// DepthwiseConv2d
// ---------------------------------------------------------------------------

DepthwiseConv2d::DepthwiseConv2d(const std::string& name, int channels_, int kernel_, int stride_,
                                 std::mt19937_64& rng)
    : channels(channels_), kernel(kernel_), stride(stride_), pad(kernel_ / 2),
      weight(name + ".weight", channels_, kernel_ * kernel_) {
    kaiming_init(weight.value, static_cast<long>(kernel) * kernel, rng);
}

Tensor DepthwiseConv2d::forward(const Tensor& x, Ctx& ctx) const {
    int oh = out_size(x.h, kernel, stride, pad);
    int ow = out_size(x.w, kernel, stride, pad);
    Tensor y(channels, oh, ow, x.n);
    y.data.setZero();
    const int c = channels;
    const float* xd = x.data.data();
    float* yd = y.data.data();
    const float* wd = weight.value.data(); // (c, k2) column-major: tap k at wd + k*c
    for (int n = 0; n < x.n; ++n) {
        long in_base = static_cast<long>(n) * x.h * x.w;
        long out_base = static_cast<long>(n) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ky = 0; ky < kernel; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= x.h) continue;
                const float* xrow = xd + (in_base + static_cast<long>(iy) * x.w) * c;
                float* yrow = yd + (out_base + static_cast<long>(oy) * ow) * c;
                for (int kx = 0; kx < kernel; ++kx) {
                    const float* wk = wd + (static_cast<long>(ky) * kernel + kx) * c;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= x.w) continue;
                        const float* xp = xrow + static_cast<long>(ix) * c;
                        float* yp = yrow + static_cast<long>(ox) * c;
                        for (int ci = 0; ci < c; ++ci) yp[ci] += wk[ci] * xp[ci];
                    }
                }
            }
        }
    }
    ctx.input = x;
    return y;
}

Tensor DepthwiseConv2d::backward(const Tensor& grad_out, const Ctx& ctx) {
    const Tensor& x = ctx.input;
    Tensor dx(channels, x.h, x.w, x.n);
    dx.data.setZero();
    int oh = grad_out.h, ow = grad_out.w;
    const int c = channels;
    const float* xd = x.data.data();
    const float* gd = grad_out.data.data();
    float* dxd = dx.data.data();
    const float* wd = weight.value.data();
    float* wg = weight.grad.data();
    for (int n = 0; n < x.n; ++n) {
        long in_base = static_cast<long>(n) * x.h * x.w;
        long out_base = static_cast<long>(n) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            const float* grow = gd + (out_base + static_cast<long>(oy) * ow) * c;
            for (int ky = 0; ky < kernel; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= x.h) continue;
                const float* xrow = xd + (in_base + static_cast<long>(iy) * x.w) * c;
                float* dxrow = dxd + (in_base + static_cast<long>(iy) * x.w) * c;
                for (int kx = 0; kx < kernel; ++kx) {
                    long kidx = static_cast<long>(ky) * kernel + kx;
                    const float* wk = wd + kidx * c;
                    float* wgk = wg + kidx * c;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= x.w) continue;
                        const float* gp = grow + static_cast<long>(ox) * c;
                        const float* xp = xrow + static_cast<long>(ix) * c;
                        float* dxp = dxrow + static_cast<long>(ix) * c;
                        for (int ci = 0; ci < c; ++ci) {
                            dxp[ci] += wk[ci] * gp[ci];
                            wgk[ci] += xp[ci] * gp[ci];
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(const std::string& name, int channels_)
    : channels(channels_), gamma(name + ".gamma", channels_, 1), beta(name + ".beta", channels_, 1),
      running_mean(Mat::Zero(channels_, 1)), running_var(Mat::Ones(channels_, 1)) {
    gamma.value.setOnes();
    beta.value.setZero();
}

Tensor BatchNorm2d::forward(const Tensor& x, Ctx& ctx, bool training) {
    const long m = x.data.cols();
    const int c = channels;
    Tensor y(x.c, x.h, x.w, x.n);
    Eigen::VectorXf mean(c), var(c);
    if (training) {
        // Single linear pass: per-channel sums accumulate while the data
        // streams through once (rowwise reductions would re-scan per row).
        Eigen::VectorXd sum = Eigen::VectorXd::Zero(c), sumsq = Eigen::VectorXd::Zero(c);
        const float* xd = x.data.data();
        for (long j = 0; j < m; ++j) {
            const float* col = xd + j * c;
            for (int ci = 0; ci < c; ++ci) {
                double v = col[ci];
                sum(ci) += v;
                sumsq(ci) += v * v;
            }
        }
        for (int ci = 0; ci < c; ++ci) {
            mean(ci) = static_cast<float>(sum(ci) / m);
            var(ci) = static_cast<float>(std::max(0.0, sumsq(ci) / m - double(mean(ci)) * mean(ci)));
        }
        ctx.inv_std = (var.array() + eps).rsqrt().matrix();
        running_mean = (1.0f - momentum) * running_mean + momentum * mean;
        // Unbiased variance for the running estimate.
        float unbias = m > 1 ? static_cast<float>(m) / static_cast<float>(m - 1) : 1.0f;
        running_var = (1.0f - momentum) * running_var + momentum * (var * unbias);
    } else {
        mean = running_mean.col(0);
        ctx.inv_std = (running_var.col(0).array() + eps).rsqrt().matrix();
    }
    ctx.xhat.resize(c, m);
    {
        const float* xd = x.data.data();
        float* xh = ctx.xhat.data();
        float* yd = y.data.data();
        const float* g = gamma.value.data();
        const float* b = beta.value.data();
        const float* mu = mean.data();
        const float* is = ctx.inv_std.data();
        for (long j = 0; j < m; ++j) {
            const float* col = xd + j * c;
            float* xhc = xh + j * c;
            float* yc = yd + j * c;
            for (int ci = 0; ci < c; ++ci) {
                float h = (col[ci] - mu[ci]) * is[ci];
                xhc[ci] = h;
                yc[ci] = h * g[ci] + b[ci];
            }
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out, const Ctx& ctx) {
    const long m = grad_out.data.cols();
    const int c = channels;
    Eigen::VectorXd sum_g = Eigen::VectorXd::Zero(c), sum_gx = Eigen::VectorXd::Zero(c);
    const float* gd = grad_out.data.data();
    const float* xh = ctx.xhat.data();
    for (long j = 0; j < m; ++j) {
        const float* gc = gd + j * c;
        const float* xc = xh + j * c;
        for (int ci = 0; ci < c; ++ci) {
            sum_g(ci) += gc[ci];
            sum_gx(ci) += double(gc[ci]) * xc[ci];
        }
    }
    beta.grad.col(0) += sum_g.cast<float>();
    gamma.grad.col(0) += sum_gx.cast<float>();

    Tensor dx(grad_out.c, grad_out.h, grad_out.w, grad_out.n);
    const float inv_m = 1.0f / static_cast<float>(m);
    const float* g = gamma.value.data();
    const float* is = ctx.inv_std.data();
    float* dxd = dx.data.data();
    // dx = inv_std/m * gamma * (m*g - sum_g - xhat * sum_gx)
    for (long j = 0; j < m; ++j) {
        const float* gc = gd + j * c;
        const float* xc = xh + j * c;
        float* dc = dxd + j * c;
        for (int ci = 0; ci < c; ++ci) {
            float t = static_cast<float>(m) * gc[ci] - static_cast<float>(sum_g(ci)) -
                      xc[ci] * static_cast<float>(sum_gx(ci));
            dc[ci] = g[ci] * is[ci] * inv_m * t;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor ActivationLayer::forward(const Tensor& x, Ctx& ctx) const {
    ctx.input = x.data;
    Tensor y(x.c, x.h, x.w, x.n);
    const long sz = x.data.size();
    const float* xp = x.data.data();
    float* yp = y.data.data();
    if (kind == Activation::ReLU6) {
        for (long i = 0; i < sz; ++i) {
            float v = xp[i];
            yp[i] = v < 0.0f ? 0.0f : (v > 6.0f ? 6.0f : v);
        }
    } else {
        for (long i = 0; i < sz; ++i) {
            float v = xp[i];
            float r = v + 3.0f;
            r = r < 0.0f ? 0.0f : (r > 6.0f ? 6.0f : r);
            yp[i] = v * r / 6.0f;
        }
    }
    return y;
}

Tensor ActivationLayer::backward(const Tensor& grad_out, const Ctx& ctx) const {
    Tensor dx(grad_out.c, grad_out.h, grad_out.w, grad_out.n);
    const long sz = grad_out.data.size();
    const float* gp = grad_out.data.data();
    const float* xp = ctx.input.data();
    float* dp = dx.data.data();
    if (kind == Activation::ReLU6) {
        for (long i = 0; i < sz; ++i) {
            float v = xp[i];
            dp[i] = (v > 0.0f && v < 6.0f) ? gp[i] : 0.0f;
        }
    } else {
        // d/dx [x * relu6(x+3)/6]: 0 below -3, 1 above 3, (2x+3)/6 between.
        for (long i = 0; i < sz; ++i) {
            float v = xp[i];
            float d = v <= -3.0f ? 0.0f : (v >= 3.0f ? 1.0f : (2.0f * v + 3.0f) / 6.0f);
            dp[i] = gp[i] * d;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

SqueezeExcite::SqueezeExcite(const std::string& name, int channels_, int reduction,
                             std::mt19937_64& rng)
    : channels(channels_), reduced(std::max(1, channels_ / reduction)),
      w1(name + ".w1", reduced, channels_), b1(name + ".b1", reduced, 1),
      w2(name + ".w2", channels_, reduced), b2(name + ".b2", channels_, 1) {
    kaiming_init(w1.value, channels, rng);
    kaiming_init(w2.value, reduced, rng);
    b1.value.setZero();
    b2.value.setZero();
}

namespace {
inline Mat hard_sigmoid(const Mat& x) {
    return ((x.array() + 3.0f).cwiseMax(0.0f).cwiseMin(6.0f) / 6.0f).matrix();
}
} // namespace

Tensor SqueezeExcite::forward(const Tensor& x, Ctx& ctx) const {
    ctx.input = x;
    ctx.pooled.resize(channels, x.n);
    for (int n = 0; n < x.n; ++n)
        ctx.pooled.col(n) = x.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial()).rowwise().mean();
    ctx.z1 = (w1.value * ctx.pooled).colwise() + b1.value.col(0);
    ctx.a1 = ctx.z1.cwiseMax(0.0f);
    ctx.z2 = (w2.value * ctx.a1).colwise() + b2.value.col(0);
    ctx.gates = hard_sigmoid(ctx.z2);

    Tensor y(x.c, x.h, x.w, x.n);
    for (int n = 0; n < x.n; ++n)
        y.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial()).array() =
            x.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial()).array().colwise() *
            ctx.gates.col(n).array();
    return y;
}

Tensor SqueezeExcite::backward(const Tensor& grad_out, const Ctx& ctx) {
    const Tensor& x = ctx.input;
    Tensor dx(x.c, x.h, x.w, x.n);
    Mat dgates(channels, x.n);
    for (int n = 0; n < x.n; ++n) {
        auto xs = x.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial());
        auto gs = grad_out.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial());
        dx.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial()).array() =
            gs.array().colwise() * ctx.gates.col(n).array();
        dgates.col(n) = (gs.array() * xs.array()).rowwise().sum().matrix();
    }
    // hard-sigmoid derivative: 1/6 on (-3, 3), else 0.
    Mat dz2 = (dgates.array() *
               ((ctx.z2.array() > -3.0f) && (ctx.z2.array() < 3.0f)).cast<float>() / 6.0f)
                  .matrix();
    w2.grad.noalias() += dz2 * ctx.a1.transpose();
    b2.grad.col(0) += dz2.rowwise().sum();
    Mat da1 = w2.value.transpose() * dz2;
    Mat dz1 = (da1.array() * (ctx.z1.array() > 0.0f).cast<float>()).matrix();
    w1.grad.noalias() += dz1 * ctx.pooled.transpose();
    b1.grad.col(0) += dz1.rowwise().sum();
    Mat dpooled = w1.value.transpose() * dz1; // (c, n)

    float inv_hw = 1.0f / static_cast<float>(x.spatial());
    for (int n = 0; n < x.n; ++n)
        dx.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial()).colwise() +=
            dpooled.col(n) * inv_hw;
    return dx;
}

// ---------------------------------------------------------------------------
// Linear / pooling / dropout / loss
// ---------------------------------------------------------------------------

Linear::Linear(const std::string& name, int in_dim_, int out_dim_, std::mt19937_64& rng)
    : in_dim(in_dim_), out_dim(out_dim_), weight(name + ".weight", out_dim_, in_dim_),
      bias(name + ".bias", out_dim_, 1) {
    kaiming_init(weight.value, in_dim, rng);
    bias.value.setZero();
}

Mat Linear::forward(const Mat& x, Ctx& ctx) const {
    ctx.input = x;
    return (weight.value * x).colwise() + bias.value.col(0);
}

Mat Linear::backward(const Mat& grad_out, const Ctx& ctx) {
    weight.grad.noalias() += grad_out * ctx.input.transpose();
    bias.grad.col(0) += grad_out.rowwise().sum();
    return weight.value.transpose() * grad_out;
}

Mat global_avg_pool(const Tensor& x) {
    Mat out(x.c, x.n);
    for (int n = 0; n < x.n; ++n)
        out.col(n) = x.data.middleCols(static_cast<long>(n) * x.spatial(), x.spatial()).rowwise().mean();
    return out;
}

Tensor global_avg_pool_backward(const Mat& grad, int c, int h, int w, int n) {
    Tensor dx(c, h, w, n);
    float inv_hw = 1.0f / static_cast<float>(static_cast<long>(h) * w);
    for (int ni = 0; ni < n; ++ni)
        dx.data.middleCols(static_cast<long>(ni) * h * w, static_cast<long>(h) * w) =
            (grad.col(ni) * inv_hw).replicate(1, static_cast<long>(h) * w);
    return dx;
}

Mat dropout_forward(const Mat& x, float rate, std::mt19937_64& rng, Mat& mask) {
    if (rate <= 0.0f) {
        mask = Mat::Ones(x.rows(), x.cols());
        return x;
    }
    std::bernoulli_distribution keep(1.0 - rate);
    mask.resize(x.rows(), x.cols());
    float scale = 1.0f / (1.0f - rate);
    for (long j = 0; j < x.cols(); ++j)
        for (long i = 0; i < x.rows(); ++i) mask(i, j) = keep(rng) ? scale : 0.0f;
    return x.cwiseProduct(mask);
}

Mat dropout_backward(const Mat& grad, const Mat& mask) { return grad.cwiseProduct(mask); }

float softmax_cross_entropy(const Mat& logits, const std::vector<int>& labels, Mat& grad_logits,
                            Mat* probs_out) {
    long n = logits.cols();
    Mat probs(logits.rows(), n);
    double loss = 0;
    for (long j = 0; j < n; ++j) {
        Eigen::VectorXf col = logits.col(j);
        float m = col.maxCoeff();
        Eigen::VectorXf e = (col.array() - m).exp().matrix();
        float s = e.sum();
        probs.col(j) = e / s;
        loss -= std::log(std::max(probs(labels[static_cast<size_t>(j)], j), 1e-30f));
    }
    grad_logits = probs;
    for (long j = 0; j < n; ++j) grad_logits(labels[static_cast<size_t>(j)], j) -= 1.0f;
    grad_logits /= static_cast<float>(n);
    if (probs_out) *probs_out = probs;
    return static_cast<float>(loss / static_cast<double>(n));
}

float clip_global_norm(ParamSet& params, float max_norm) {
    double sq = 0;
    for (auto* p : params.params) sq += static_cast<double>(p->grad.squaredNorm());
    float norm = static_cast<float>(std::sqrt(sq));
    if (norm > max_norm && norm > 0) {
        float scale = max_norm / norm;
        for (auto* p : params.params) p->grad *= scale;
        return max_norm;
    }
    return norm;
}

} // namespace nuclass::nn
