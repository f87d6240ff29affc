// Minimal CPU neural-net substrate: batched feature-map tensors, the layer
// set needed for inverted-residual classifiers (conv, depthwise conv,
// batch norm, SE gating, linear, activations), manual backward passes and
// an Adam optimizer. Float32 throughout, deterministic on a single thread.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace nuclass::nn {

using Mat = Eigen::MatrixXf;

// Batched feature map. Layout: data(c, i) where i = n*h*w + y*w + x, i.e.
// each sample occupies a contiguous block of h*w columns.
struct Tensor {
    int c = 0, h = 0, w = 0, n = 0;
    Mat data;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, int n_) : c(c_), h(h_), w(w_), n(n_), data(c_, static_cast<long>(n_) * h_ * w_) {}
    long spatial() const { return static_cast<long>(h) * w; }
    long cols() const { return static_cast<long>(n) * h * w; }
};

struct Param {
    std::string name;
    Mat value;
    Mat grad;
    Mat adam_m;
    Mat adam_v;

    Param(std::string name_, int rows, int cols)
        : name(std::move(name_)), value(rows, cols), grad(Mat::Zero(rows, cols)),
          adam_m(Mat::Zero(rows, cols)), adam_v(Mat::Zero(rows, cols)) {}
    long size() const { return value.size(); }
};

// Layers register parameters here; the trainer owns the list.
struct ParamSet {
    std::vector<Param*> params;
    void add(Param& p) { params.push_back(&p); }
    long count() const;
    void zero_grads();
};

struct AdamConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
    void step(ParamSet& params);
    void set_lr(float lr) { cfg_.lr = lr; }
    int64_t steps_taken() const { return t_; }
    void set_steps_taken(int64_t t) { t_ = t; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

void kaiming_init(Mat& w, long fan_in, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Layers. forward() fills a per-call context consumed by backward(), so a
// layer can run twice per step (weight-shared Siamese branches) with
// gradients accumulating across both calls.
// ---------------------------------------------------------------------------

enum class Activation { ReLU6, HardSwish };

struct Conv2d {
    int in_c, out_c, kernel, stride, pad;
    Param weight; // (out_c, in_c*k*k)

    Conv2d(const std::string& name, int in_c, int out_c, int kernel, int stride,
           std::mt19937_64& rng);
    void register_params(ParamSet& set) { set.add(weight); }

    struct Ctx {
        Mat cols; // im2col of the input, (in_c*k*k, n*oh*ow)
        int h = 0, w = 0, n = 0;
    };
    Tensor forward(const Tensor& x, Ctx& ctx) const;
    Tensor backward(const Tensor& grad_out, const Ctx& ctx);
};

struct DepthwiseConv2d {
    int channels, kernel, stride, pad;
    Param weight; // (channels, k*k)

    DepthwiseConv2d(const std::string& name, int channels, int kernel, int stride,
                    std::mt19937_64& rng);
    void register_params(ParamSet& set) { set.add(weight); }

    struct Ctx {
        Tensor input;
    };
    Tensor forward(const Tensor& x, Ctx& ctx) const;
    Tensor backward(const Tensor& grad_out, const Ctx& ctx);
};

struct BatchNorm2d {
    int channels;
    float eps = 1e-5f;
    float momentum = 0.1f;
    Param gamma, beta;
    Mat running_mean, running_var; // (channels, 1), not trained

    explicit BatchNorm2d(const std::string& name, int channels);
    void register_params(ParamSet& set) {
        set.add(gamma);
        set.add(beta);
    }

    struct Ctx {
        Mat xhat;
        Eigen::VectorXf inv_std;
    };
    Tensor forward(const Tensor& x, Ctx& ctx, bool training);
    Tensor backward(const Tensor& grad_out, const Ctx& ctx);
};

struct ActivationLayer {
    Activation kind;

    struct Ctx {
        Mat input;
    };
    Tensor forward(const Tensor& x, Ctx& ctx) const;
    Tensor backward(const Tensor& grad_out, const Ctx& ctx) const;
};

// Squeeze-and-excitation: global per-sample channel pooling, a two-layer
// bottleneck, hard-sigmoid gates multiplying the input channel-wise.
struct SqueezeExcite {
    int channels, reduced;
    Param w1, b1, w2, b2;

    SqueezeExcite(const std::string& name, int channels, int reduction, std::mt19937_64& rng);
    void register_params(ParamSet& set) {
        set.add(w1);
        set.add(b1);
        set.add(w2);
        set.add(b2);
    }

    struct Ctx {
        Tensor input;
        Mat pooled; // (c, n)
        Mat z1, a1, z2, gates;
    };
    Tensor forward(const Tensor& x, Ctx& ctx) const;
    Tensor backward(const Tensor& grad_out, const Ctx& ctx);
};

struct Linear {
    int in_dim, out_dim;
    Param weight, bias;

    Linear(const std::string& name, int in_dim, int out_dim, std::mt19937_64& rng);
    void register_params(ParamSet& set) {
        set.add(weight);
        set.add(bias);
    }

    struct Ctx {
        Mat input; // (in_dim, n)
    };
    Mat forward(const Mat& x, Ctx& ctx) const;
    Mat backward(const Mat& grad_out, const Ctx& ctx);
};

Mat global_avg_pool(const Tensor& x);                      // (c, n)
Tensor global_avg_pool_backward(const Mat& grad, int c, int h, int w, int n);

// Inverted dropout; mask drawn from the supplied rng.
Mat dropout_forward(const Mat& x, float rate, std::mt19937_64& rng, Mat& mask);
Mat dropout_backward(const Mat& grad, const Mat& mask);

// Cross-entropy over logits (classes x n). Returns mean loss; fills
// grad_logits and per-sample probabilities.
float softmax_cross_entropy(const Mat& logits, const std::vector<int>& labels, Mat& grad_logits,
                            Mat* probs_out = nullptr);

// Post-clip global norm is returned so callers can record the clip contract.
float clip_global_norm(ParamSet& params, float max_norm);

} // namespace nuclass::nn
