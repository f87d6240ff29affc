#include "nuclass/cnn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>

#include <json.hpp>

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace nuclass::cnn {

using namespace nuclass::nn;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

json block_to_json(const BlockSpec& b) {
    return json{{"expansion", b.expansion},
                {"kernel", b.kernel},
                {"out_channels", b.out_channels},
                {"stride", b.stride},
                {"use_se", b.use_se},
                {"activation", b.activation == Activation::ReLU6 ? "relu6" : "hard_swish"}};
}

BlockSpec block_from_json(const json& j) {
    BlockSpec b;
    b.expansion = j.at("expansion");
    b.kernel = j.at("kernel");
    b.out_channels = j.at("out_channels");
    b.stride = j.at("stride");
    b.use_se = j.at("use_se");
    std::string act = j.at("activation");
    if (act == "relu6")
        b.activation = Activation::ReLU6;
    else if (act == "hard_swish")
        b.activation = Activation::HardSwish;
    else
        throw ConfigError("unknown activation: " + act);
    return b;
}

} // namespace

CNNConfig CNNConfig::defaults() {
    CNNConfig c;
    // Aggressive stem stride: the maps are sparse at native pitch, so the
    // stem downsamples hard (kernel covers the full stride window) and the
    // budget is spent on the fused trunk instead.
    c.stem_channels = 16;
    c.stem_kernel = 5;
    c.stem_stride = 4;
    c.branch_blocks = {
        {1.0, 3, 16, 2, false, Activation::ReLU6},
        {4.0, 3, 24, 2, false, Activation::ReLU6},
        {4.0, 5, 40, 2, true, Activation::ReLU6},
        {6.0, 5, 80, 2, true, Activation::HardSwish},
    };
    // Parameters are deliberately concentrated here: the trunk runs at low
    // resolution, so this is where a 3.4M budget fits without blowing up
    // the early-layer compute.
    c.trunk_blocks = {
        {4.0, 5, 216, 2, true, Activation::HardSwish},
        {6.0, 5, 216, 1, true, Activation::HardSwish},
        {6.0, 5, 216, 1, true, Activation::HardSwish},
    };
    c.fc_hidden = 128;
    c.dropout_rate = 0.2;
    return c;
}

void CNNConfig::validate() const {
    auto check_block = [](const BlockSpec& b) {
        if (b.expansion < 1.0) throw ConfigError("block expansion must be >= 1");
        if (b.kernel != 3 && b.kernel != 5) throw ConfigError("block kernel must be 3 or 5");
        if (b.stride != 1 && b.stride != 2) throw ConfigError("block stride must be 1 or 2");
        if (b.out_channels <= 0) throw ConfigError("block out_channels must be positive");
    };
    if (stem_channels <= 0) throw ConfigError("stem_channels must be positive");
    if (stem_kernel != 3 && stem_kernel != 5) throw ConfigError("stem_kernel must be 3 or 5");
    if (stem_stride <= 0 || stem_stride > stem_kernel)
        throw ConfigError("stem_stride must be in [1, stem_kernel]");
    if (branch_blocks.empty() || trunk_blocks.empty())
        throw ConfigError("branch and trunk block lists must be nonempty");
    for (const auto& b : branch_blocks) check_block(b);
    for (const auto& b : trunk_blocks) check_block(b);
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("dropout_rate must be in [0, 1)");
    if (n_classes != 3) throw ConfigError("this classifier has exactly 3 classes");
    if (fc_hidden <= 0 || se_reduction <= 0 || input_size <= 0)
        throw ConfigError("fc_hidden, se_reduction and input_size must be positive");
}

std::string CNNConfig::to_json() const {
    json j;
    j["stem_channels"] = stem_channels;
    j["stem_kernel"] = stem_kernel;
    j["stem_stride"] = stem_stride;
    j["fc_hidden"] = fc_hidden;
    j["dropout_rate"] = dropout_rate;
    j["n_classes"] = n_classes;
    j["se_reduction"] = se_reduction;
    j["input_size"] = input_size;
    j["init_seed"] = init_seed;
    json branch = json::array(), trunk = json::array();
    for (const auto& b : branch_blocks) branch.push_back(block_to_json(b));
    for (const auto& b : trunk_blocks) trunk.push_back(block_to_json(b));
    j["branch_blocks"] = branch;
    j["trunk_blocks"] = trunk;
    return j.dump();
}

CNNConfig CNNConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    CNNConfig c;
    c.stem_channels = j.at("stem_channels");
    c.stem_kernel = j.at("stem_kernel");
    c.stem_stride = j.at("stem_stride");
    c.fc_hidden = j.at("fc_hidden");
    c.dropout_rate = j.at("dropout_rate");
    c.n_classes = j.at("n_classes");
    c.se_reduction = j.at("se_reduction");
    c.input_size = j.at("input_size");
    c.init_seed = j.at("init_seed");
    for (const auto& b : j.at("branch_blocks")) c.branch_blocks.push_back(block_from_json(b));
    for (const auto& b : j.at("trunk_blocks")) c.trunk_blocks.push_back(block_from_json(b));
    return c;
}

void TrainRecipe::validate() const {
    if (learning_rate <= 0 || batch_size <= 0 || max_epochs <= 0 || early_stop_patience <= 0)
        throw ConfigError("all training recipe values must be positive");
}

std::string TrainRecipe::to_json() const {
    return json{{"learning_rate", learning_rate},
                {"batch_size", batch_size},
                {"max_epochs", max_epochs},
                {"early_stop_patience", early_stop_patience}}
        .dump();
}

TrainRecipe TrainRecipe::from_json(const std::string& text) {
    json j = json::parse(text);
    TrainRecipe r;
    r.learning_rate = j.at("learning_rate");
    r.batch_size = j.at("batch_size");
    r.max_epochs = j.at("max_epochs");
    r.early_stop_patience = j.at("early_stop_patience");
    return r;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

namespace {

struct InvertedResidual {
    std::optional<Conv2d> expand;
    std::optional<BatchNorm2d> bn_expand;
    DepthwiseConv2d dw;
    BatchNorm2d bn_dw;
    std::optional<SqueezeExcite> se;
    Conv2d project;
    BatchNorm2d bn_project;
    ActivationLayer act;
    bool residual;

    InvertedResidual(const std::string& name, int in_c, const BlockSpec& spec, int se_reduction,
                     std::mt19937_64& rng)
        : dw(name + ".dw", expanded(in_c, spec), spec.kernel, spec.stride, rng),
          bn_dw(name + ".bn_dw", expanded(in_c, spec)),
          project(name + ".project", expanded(in_c, spec), spec.out_channels, 1, 1, rng),
          bn_project(name + ".bn_project", spec.out_channels), act{spec.activation},
          residual(spec.stride == 1 && in_c == spec.out_channels) {
        if (expanded(in_c, spec) != in_c) {
            expand.emplace(name + ".expand", in_c, expanded(in_c, spec), 1, 1, rng);
            bn_expand.emplace(name + ".bn_expand", expanded(in_c, spec));
        }
        if (spec.use_se) se.emplace(name + ".se", expanded(in_c, spec), se_reduction, rng);
    }

    static int expanded(int in_c, const BlockSpec& spec) {
        return static_cast<int>(std::lround(in_c * spec.expansion));
    }

    void register_params(ParamSet& set) {
        if (expand) {
            expand->register_params(set);
            bn_expand->register_params(set);
        }
        dw.register_params(set);
        bn_dw.register_params(set);
        if (se) se->register_params(set);
        project.register_params(set);
        bn_project.register_params(set);
    }

    struct Ctx {
        Conv2d::Ctx expand_conv;
        BatchNorm2d::Ctx expand_bn;
        ActivationLayer::Ctx expand_act;
        DepthwiseConv2d::Ctx dw_conv;
        BatchNorm2d::Ctx dw_bn;
        ActivationLayer::Ctx dw_act;
        SqueezeExcite::Ctx se_ctx;
        Conv2d::Ctx project_conv;
        BatchNorm2d::Ctx project_bn;
    };

    Tensor forward(const Tensor& x, Ctx& ctx, bool training) {
        Tensor t = x;
        if (expand) {
            t = expand->forward(t, ctx.expand_conv);
            t = bn_expand->forward(t, ctx.expand_bn, training);
            t = act.forward(t, ctx.expand_act);
        }
        t = dw.forward(t, ctx.dw_conv);
        t = bn_dw.forward(t, ctx.dw_bn, training);
        t = act.forward(t, ctx.dw_act);
        if (se) t = se->forward(t, ctx.se_ctx);
        t = project.forward(t, ctx.project_conv);
        t = bn_project.forward(t, ctx.project_bn, training);
        if (residual) t.data += x.data;
        return t;
    }

    Tensor backward(const Tensor& grad_out, Ctx& ctx) {
        Tensor g = bn_project.backward(grad_out, ctx.project_bn);
        g = project.backward(g, ctx.project_conv);
        if (se) g = se->backward(g, ctx.se_ctx);
        g = act.backward(g, ctx.dw_act);
        g = bn_dw.backward(g, ctx.dw_bn);
        g = dw.backward(g, ctx.dw_conv);
        if (expand) {
            g = act.backward(g, ctx.expand_act);
            g = bn_expand->backward(g, ctx.expand_bn);
            g = expand->backward(g, ctx.expand_conv);
        }
        if (residual) g.data += grad_out.data;
        return g;
    }
};

} // namespace

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct BranchCtx {
    Conv2d::Ctx stem_conv;
    BatchNorm2d::Ctx stem_bn;
    ActivationLayer::Ctx stem_act;
    std::vector<InvertedResidual::Ctx> blocks;
    int out_h = 0, out_w = 0;
};

struct SiameseCNN::Impl {
    CNNConfig config;
    std::optional<Conv2d> stem;
    std::optional<BatchNorm2d> stem_bn;
    ActivationLayer stem_act{Activation::ReLU6};
    std::vector<InvertedResidual> branch;
    std::vector<InvertedResidual> trunk;
    std::optional<Linear> fc1;
    std::optional<Linear> fc2;
    ActivationLayer head_act{Activation::ReLU6};
    ParamSet params;
    int branch_out_channels = 0;

    std::vector<std::pair<std::string, Mat*>> buffers() {
        std::vector<std::pair<std::string, Mat*>> out;
        out.emplace_back("stem.bn.running_mean", &stem_bn->running_mean);
        out.emplace_back("stem.bn.running_var", &stem_bn->running_var);
        auto add_block = [&](const std::string& prefix, InvertedResidual& b) {
            if (b.bn_expand) {
                out.emplace_back(prefix + ".bn_expand.rm", &b.bn_expand->running_mean);
                out.emplace_back(prefix + ".bn_expand.rv", &b.bn_expand->running_var);
            }
            out.emplace_back(prefix + ".bn_dw.rm", &b.bn_dw.running_mean);
            out.emplace_back(prefix + ".bn_dw.rv", &b.bn_dw.running_var);
            out.emplace_back(prefix + ".bn_project.rm", &b.bn_project.running_mean);
            out.emplace_back(prefix + ".bn_project.rv", &b.bn_project.running_var);
        };
        for (size_t i = 0; i < branch.size(); ++i) add_block("branch" + std::to_string(i), branch[i]);
        for (size_t i = 0; i < trunk.size(); ++i) add_block("trunk" + std::to_string(i), trunk[i]);
        return out;
    }

    Tensor run_branch(const Tensor& view, BranchCtx& ctx, bool training) {
        ctx.blocks.resize(branch.size());
        Tensor t = stem->forward(view, ctx.stem_conv);
        t = stem_bn->forward(t, ctx.stem_bn, training);
        t = stem_act.forward(t, ctx.stem_act);
        for (size_t i = 0; i < branch.size(); ++i) t = branch[i].forward(t, ctx.blocks[i], training);
        ctx.out_h = t.h;
        ctx.out_w = t.w;
        return t;
    }

    Tensor backward_branch(const Tensor& grad, BranchCtx& ctx) {
        Tensor g = grad;
        for (size_t i = branch.size(); i-- > 0;) g = branch[i].backward(g, ctx.blocks[i]);
        g = stem_act.backward(g, ctx.stem_act);
        g = stem_bn->backward(g, ctx.stem_bn);
        g = stem->backward(g, ctx.stem_conv);
        return g;
    }
};

struct SiameseCNN::ForwardCtx::State {
    BranchCtx branch_a, branch_b;
    std::vector<InvertedResidual::Ctx> trunk;
    int trunk_h = 0, trunk_w = 0, n = 0;
    Mat pooled;
    Mat dropout_mask;
    Linear::Ctx fc1_ctx;
    ActivationLayer::Ctx head_act_ctx;
    Linear::Ctx fc2_ctx;
};

SiameseCNN::ForwardCtx::ForwardCtx() : state(new State) {}
SiameseCNN::ForwardCtx::~ForwardCtx() = default;
SiameseCNN::ForwardCtx::ForwardCtx(ForwardCtx&&) noexcept = default;

SiameseCNN::SiameseCNN(const CNNConfig& config) : impl_(new Impl) {
    config.validate();
    impl_->config = config;
    std::mt19937_64 rng(splitmix64(config.init_seed + 0xc4f5a11dULL));

    impl_->stem.emplace("stem", 1, config.stem_channels, config.stem_kernel,
                        config.stem_stride, rng);
    impl_->stem_bn.emplace("stem.bn", config.stem_channels);

    int spatial = (config.input_size + 2 * 1 - 3) / 2 + 1;
    int channels = config.stem_channels;
    for (size_t i = 0; i < config.branch_blocks.size(); ++i) {
        const auto& spec = config.branch_blocks[i];
        impl_->branch.emplace_back("branch" + std::to_string(i), channels, spec,
                                   config.se_reduction, rng);
        channels = spec.out_channels;
        if (spec.stride == 2) spatial = (spatial + 2 * (spec.kernel / 2) - spec.kernel) / 2 + 1;
        if (spatial < 1)
            throw ConfigError("spatial size underflows in branch block " + std::to_string(i));
    }
    impl_->branch_out_channels = channels;

    channels *= 2; // the two branch outputs are concatenated channel-wise
    for (size_t i = 0; i < config.trunk_blocks.size(); ++i) {
        const auto& spec = config.trunk_blocks[i];
        impl_->trunk.emplace_back("trunk" + std::to_string(i), channels, spec, config.se_reduction,
                                  rng);
        channels = spec.out_channels;
        if (spec.stride == 2) spatial = (spatial + 2 * (spec.kernel / 2) - spec.kernel) / 2 + 1;
        if (spatial < 1)
            throw ConfigError("spatial size underflows in trunk block " + std::to_string(i));
    }

    impl_->fc1.emplace("fc1", channels, config.fc_hidden, rng);
    impl_->fc2.emplace("fc2", config.fc_hidden, config.n_classes, rng);

    impl_->stem->register_params(impl_->params);
    impl_->stem_bn->register_params(impl_->params);
    for (auto& b : impl_->branch) b.register_params(impl_->params);
    for (auto& b : impl_->trunk) b.register_params(impl_->params);
    impl_->fc1->register_params(impl_->params);
    impl_->fc2->register_params(impl_->params);
}

SiameseCNN::~SiameseCNN() = default;
SiameseCNN::SiameseCNN(SiameseCNN&&) noexcept = default;

const CNNConfig& SiameseCNN::config() const { return impl_->config; }
ParamSet& SiameseCNN::params() { return impl_->params; }
long SiameseCNN::parameter_count() const { return impl_->params.count(); }

Mat SiameseCNN::forward(const Tensor& view_xz, const Tensor& view_yz, bool training,
                        std::mt19937_64* dropout_rng, ForwardCtx& fctx) {
    auto& m = *impl_;
    auto& ctx = *fctx.state;
    if (view_xz.h != m.config.input_size || view_xz.w != m.config.input_size ||
        view_yz.h != m.config.input_size || view_yz.w != m.config.input_size ||
        view_xz.c != 1 || view_yz.c != 1 || view_xz.n != view_yz.n)
        throw InvalidInputError("expected two (1, " + std::to_string(m.config.input_size) + ", " +
                                std::to_string(m.config.input_size) + ") views with equal batch");

    Tensor fa = m.run_branch(view_xz, ctx.branch_a, training);
    Tensor fb = m.run_branch(view_yz, ctx.branch_b, training);

    Tensor cat(fa.c + fb.c, fa.h, fa.w, fa.n);
    cat.data.topRows(fa.c) = fa.data;
    cat.data.bottomRows(fb.c) = fb.data;

    ctx.trunk.resize(m.trunk.size());
    Tensor t = std::move(cat);
    for (size_t i = 0; i < m.trunk.size(); ++i) t = m.trunk[i].forward(t, ctx.trunk[i], training);
    ctx.trunk_h = t.h;
    ctx.trunk_w = t.w;
    ctx.n = t.n;

    ctx.pooled = global_avg_pool(t);
    Mat head = ctx.pooled;
    if (training && m.config.dropout_rate > 0) {
        if (!dropout_rng) throw InvalidInputError("training forward requires a dropout rng");
        head = dropout_forward(head, static_cast<float>(m.config.dropout_rate), *dropout_rng,
                               ctx.dropout_mask);
    } else {
        ctx.dropout_mask = Mat::Ones(head.rows(), head.cols());
    }
    Mat h1 = m.fc1->forward(head, ctx.fc1_ctx);
    Tensor h1t(static_cast<int>(h1.rows()), 1, 1, static_cast<int>(h1.cols()));
    h1t.data = h1;
    h1t = m.head_act.forward(h1t, ctx.head_act_ctx);
    return m.fc2->forward(h1t.data, ctx.fc2_ctx);
}

void SiameseCNN::backward(const Mat& grad_logits, ForwardCtx& fctx) {
    auto& m = *impl_;
    auto& ctx = *fctx.state;
    Mat g = m.fc2->backward(grad_logits, ctx.fc2_ctx);
    Tensor gt(static_cast<int>(g.rows()), 1, 1, static_cast<int>(g.cols()));
    gt.data = g;
    gt = m.head_act.backward(gt, ctx.head_act_ctx);
    g = m.fc1->backward(gt.data, ctx.fc1_ctx);
    g = dropout_backward(g, ctx.dropout_mask);

    int trunk_c = static_cast<int>(ctx.pooled.rows());
    Tensor gtrunk = global_avg_pool_backward(g, trunk_c, ctx.trunk_h, ctx.trunk_w, ctx.n);
    for (size_t i = m.trunk.size(); i-- > 0;) gtrunk = m.trunk[i].backward(gtrunk, ctx.trunk[i]);

    int bc = m.branch_out_channels;
    Tensor ga(bc, ctx.branch_a.out_h, ctx.branch_a.out_w, ctx.n);
    Tensor gb(bc, ctx.branch_b.out_h, ctx.branch_b.out_w, ctx.n);
    ga.data = gtrunk.data.topRows(bc);
    gb.data = gtrunk.data.bottomRows(bc);
    m.backward_branch(ga, ctx.branch_a);
    m.backward_branch(gb, ctx.branch_b);
}

Mat SiameseCNN::forward_eval(const Tensor& view_xz, const Tensor& view_yz) {
    ForwardCtx ctx;
    return forward(view_xz, view_yz, /*training=*/false, nullptr, ctx);
}

std::vector<std::pair<std::string, Mat*>> SiameseCNN::named_buffers() { return impl_->buffers(); }

Mat SiameseCNN::branch_features(const Tensor& view) {
    BranchCtx ctx;
    Tensor out = impl_->run_branch(view, ctx, /*training=*/false);
    return global_avg_pool(out);
}

void fill_view_tensor(Tensor& t, int slot, const std::vector<uint8_t>& grid, int size) {
    if (grid.size() != static_cast<size_t>(size) * size)
        throw InvalidInputError("pixel grid has the wrong size");
    long base = static_cast<long>(slot) * size * size;
    for (long i = 0; i < static_cast<long>(grid.size()); ++i)
        t.data(0, base + i) = static_cast<float>(grid[static_cast<size_t>(i)]) / 255.0f;
}

Prediction SiameseCNN::predict(const PixelMapPair& pair) {
    int size = impl_->config.input_size;
    if (pair.size != size) throw InvalidInputError("pixel map size does not match model input");
    auto t0 = std::chrono::steady_clock::now();
    Tensor vxz(1, size, size, 1), vyz(1, size, size, 1);
    fill_view_tensor(vxz, 0, pair.view_xz, size);
    fill_view_tensor(vyz, 0, pair.view_yz, size);
    ForwardCtx ctx;
    Mat logits = forward(vxz, vyz, /*training=*/false, nullptr, ctx);

    Prediction pred;
    pred.event_id = pair.event_id;
    double m = logits.col(0).maxCoeff();
    double sum = 0;
    for (int c = 0; c < 3; ++c) {
        pred.raw_logp[c] = static_cast<double>(logits(c, 0));
        pred.confidences[c] = std::exp(pred.raw_logp[c] - m);
        sum += pred.confidences[c];
    }
    int best = 0;
    for (int c = 0; c < 3; ++c) {
        pred.confidences[c] /= sum;
        if (pred.confidences[c] > pred.confidences[best]) best = c;
    }
    pred.predicted = static_cast<InteractionClass>(best);
    pred.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return pred;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

double evaluate(SiameseCNN& model, const BatchLoader& loader, const std::vector<uint64_t>& indices,
                int batch_size, int input_size, double* accuracy_out) {
    double loss_sum = 0;
    long n_total = 0, n_correct = 0;
    for (size_t start = 0; start < indices.size(); start += static_cast<size_t>(batch_size)) {
        size_t end = std::min(indices.size(), start + static_cast<size_t>(batch_size));
        std::vector<uint64_t> batch(indices.begin() + static_cast<long>(start),
                                    indices.begin() + static_cast<long>(end));
        Tensor vxz(1, input_size, input_size, static_cast<int>(batch.size()));
        Tensor vyz(1, input_size, input_size, static_cast<int>(batch.size()));
        std::vector<int> labels;
        loader(batch, vxz, vyz, labels);
        SiameseCNN::ForwardCtx ctx;
        Mat logits = model.forward(vxz, vyz, /*training=*/false, nullptr, ctx);
        Mat grad, probs;
        loss_sum += static_cast<double>(softmax_cross_entropy(logits, labels, grad, &probs)) *
                    static_cast<double>(batch.size());
        for (long j = 0; j < probs.cols(); ++j) {
            long best;
            probs.col(j).maxCoeff(&best);
            n_correct += (best == labels[static_cast<size_t>(j)]);
        }
        n_total += static_cast<long>(batch.size());
    }
    if (accuracy_out) *accuracy_out = static_cast<double>(n_correct) / static_cast<double>(n_total);
    return loss_sum / static_cast<double>(n_total);
}

} // namespace

TrainResult train(SiameseCNN& model, const BatchLoader& loader,
                  const std::vector<uint64_t>& train_indices,
                  const std::vector<uint64_t>& val_indices, const TrainRecipe& recipe,
                  const TrainOptions& options) {
    recipe.validate();
    if (train_indices.empty() || val_indices.empty())
        throw InvalidInputError("training needs nonempty train and val splits");

    int input_size = model.config().input_size;
    Adam optimizer(AdamConfig{static_cast<float>(recipe.learning_rate)});
    optimizer.set_steps_taken(options.adam_steps);

    TrainResult result;
    double best_val = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;
    std::vector<double> loss_history;

    std::ofstream log;
    if (!options.log_path.empty()) {
        log.open(options.log_path, std::ios::app);
        if (!log) throw IoError("cannot open training log: " + options.log_path.string());
    }

    for (int epoch = options.start_epoch; epoch < recipe.max_epochs; ++epoch) {
        std::vector<uint64_t> order = train_indices;
        std::mt19937_64 shuffle_rng(splitmix64(options.shuffle_seed) ^ splitmix64(static_cast<uint64_t>(epoch) + 17));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double epoch_loss = 0;
        long seen = 0;
        int step = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(recipe.batch_size), ++step) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(recipe.batch_size));
            std::vector<uint64_t> batch(order.begin() + static_cast<long>(start),
                                        order.begin() + static_cast<long>(end));
            Tensor vxz(1, input_size, input_size, static_cast<int>(batch.size()));
            Tensor vyz(1, input_size, input_size, static_cast<int>(batch.size()));
            std::vector<int> labels;
            loader(batch, vxz, vyz, labels);

            std::mt19937_64 dropout_rng(event_seed(options.shuffle_seed ^ 0xd0d0, static_cast<uint64_t>(epoch) * 100003 + static_cast<uint64_t>(step)));
            SiameseCNN::ForwardCtx ctx;
            model.params().zero_grads();
            Mat logits = model.forward(vxz, vyz, /*training=*/true, &dropout_rng, ctx);
            Mat grad;
            float loss = softmax_cross_entropy(logits, labels, grad);
            if (!std::isfinite(loss)) {
                std::string ids;
                for (uint64_t id : batch) ids += std::to_string(id) + " ";
                std::string hist;
                for (size_t i = loss_history.size() > 8 ? loss_history.size() - 8 : 0;
                     i < loss_history.size(); ++i)
                    hist += std::to_string(loss_history[i]) + " ";
                throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch) +
                                         " step " + std::to_string(step) + "; batch ids: " + ids +
                                         "; recent losses: " + hist);
            }
            loss_history.push_back(static_cast<double>(loss));
            model.backward(grad, ctx);
            optimizer.step(model.params());
            epoch_loss += static_cast<double>(loss) * static_cast<double>(batch.size());
            seen += static_cast<long>(batch.size());
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = epoch_loss / static_cast<double>(seen);
        entry.val_loss = evaluate(model, loader, val_indices, recipe.batch_size, input_size,
                                  &entry.val_accuracy);
        result.history.push_back(entry);
        if (log.is_open()) {
            log << json{{"epoch", entry.epoch},
                        {"train_loss", entry.train_loss},
                        {"val_loss", entry.val_loss},
                        {"val_accuracy", entry.val_accuracy}}
                       .dump()
                << "\n"
                << std::flush;
        }

        if (entry.val_loss < best_val) {
            best_val = entry.val_loss;
            result.best_epoch = epoch;
            bad_epochs = 0;
            if (!options.checkpoint_path.empty())
                save_checkpoint(options.checkpoint_path, model, recipe,
                                options.log_path.string(), &optimizer, epoch + 1);
        } else {
            ++bad_epochs;
        }
        result.best_val_loss = best_val;

        if (options.on_epoch && !options.on_epoch(entry)) break;
        if (bad_epochs >= recipe.early_stop_patience) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'N', 'U', 'C', 'N', 'N', '0', '0', '1'};

void write_mat(std::ofstream& out, const std::string& name, const Mat& m) {
    uint16_t len = static_cast<uint16_t>(name.size());
    uint32_t rows = static_cast<uint32_t>(m.rows()), cols = static_cast<uint32_t>(m.cols());
    out.write(reinterpret_cast<const char*>(&len), 2);
    out.write(name.data(), len);
    out.write(reinterpret_cast<const char*>(&rows), 4);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
}

void read_mat(std::ifstream& in, const std::string& expect_name, Mat& m) {
    uint16_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 2);
    std::string name(len, '\0');
    in.read(name.data(), len);
    uint32_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), 4);
    in.read(reinterpret_cast<char*>(&cols), 4);
    if (!in || name != expect_name)
        throw IoError("checkpoint tensor mismatch: expected " + expect_name + ", got " + name);
    if (static_cast<long>(rows) != m.rows() || static_cast<long>(cols) != m.cols())
        throw IoError("checkpoint tensor shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
}

} // namespace

void save_checkpoint(const fs::path& path, SiameseCNN& model, const TrainRecipe& recipe,
                     const std::string& log_pointer, const Adam* optimizer, int epochs_done) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
        json meta = {{"config", json::parse(model.config().to_json())},
                     {"recipe", json::parse(recipe.to_json())},
                     {"log_pointer", log_pointer},
                     {"epochs_done", epochs_done},
                     {"has_adam", optimizer != nullptr},
                     {"adam_steps", optimizer ? optimizer->steps_taken() : 0}};
        std::string meta_str = meta.dump();
        uint32_t meta_len = static_cast<uint32_t>(meta_str.size());
        out.write(kCkptMagic, 8);
        out.write(reinterpret_cast<const char*>(&meta_len), 4);
        out.write(meta_str.data(), meta_len);
        // Shared branch parameters appear once: the param set holds a single
        // copy by construction.
        for (auto* p : model.params().params) write_mat(out, p->name, p->value);
        if (optimizer) {
            for (auto* p : model.params().params) write_mat(out, p->name + ".m", p->adam_m);
            for (auto* p : model.params().params) write_mat(out, p->name + ".v", p->adam_v);
        }
        for (auto& [name, buf] : model.named_buffers()) write_mat(out, name, *buf);
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    uint32_t meta_len = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&meta_len), 4);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), meta_len);
    json meta = json::parse(meta_str);

    Checkpoint ckpt;
    ckpt.config = CNNConfig::from_json(meta.at("config").dump());
    ckpt.recipe = TrainRecipe::from_json(meta.at("recipe").dump());
    ckpt.log_pointer = meta.at("log_pointer");
    ckpt.epochs_done = meta.at("epochs_done");
    ckpt.adam_steps = meta.at("adam_steps");
    ckpt.model = std::make_unique<SiameseCNN>(ckpt.config);
    for (auto* p : ckpt.model->params().params) read_mat(in, p->name, p->value);
    if (meta.at("has_adam").get<bool>()) {
        for (auto* p : ckpt.model->params().params) read_mat(in, p->name + ".m", p->adam_m);
        for (auto* p : ckpt.model->params().params) read_mat(in, p->name + ".v", p->adam_v);
    }
    for (auto& [name, buf] : ckpt.model->named_buffers()) read_mat(in, name, *buf);
    return ckpt;
}

} // namespace nuclass::cnn
