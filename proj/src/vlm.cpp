#include "nuclass/vlm.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <new>
#include <numeric>
#include <random>
#include <sstream>

namespace nuclass::vlm {

using Vec = Eigen::VectorXf;

namespace {

constexpr char kAdapterMagic[8] = {'N', 'U', 'L', 'O', 'R', 'A', '0', '1'};

void fill_normal(Mat& m, std::mt19937_64& rng, float stddev) {
    std::normal_distribution<float> d(0.f, stddev);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
}

uint64_t hash_mat(const Mat& m, uint64_t seed) {
    return fnv1a(m.data(), sizeof(float) * static_cast<size_t>(m.size()), seed);
}

} // namespace

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

namespace {

nlohmann::json adapter_config_json(const AdapterConfig& c);
AdapterConfig adapter_config_from_json(const nlohmann::json& j);
nlohmann::json recipe_json(const SFTRecipe& r);
SFTRecipe recipe_from_json(const nlohmann::json& j);

nlohmann::json adapter_config_json(const AdapterConfig& c) {
    return {{"base_model_id", c.base_model_id},
            {"quantization_bits", c.quantization_bits},
            {"lora_rank", c.lora_rank},
            {"lora_alpha", c.lora_alpha},
            {"adapter_dropout", c.adapter_dropout},
            {"target_module_patterns", c.target_module_patterns},
            {"trainable_fraction_max", c.trainable_fraction_max}};
}

AdapterConfig adapter_config_from_json(const nlohmann::json& j) {
    AdapterConfig c;
    c.base_model_id = j.at("base_model_id").get<std::string>();
    c.quantization_bits = j.at("quantization_bits").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.adapter_dropout = j.at("adapter_dropout").get<double>();
    c.target_module_patterns = j.at("target_module_patterns").get<std::vector<std::string>>();
    c.trainable_fraction_max = j.at("trainable_fraction_max").get<double>();
    return c;
}

nlohmann::json recipe_json(const SFTRecipe& r) {
    return {{"effective_batch_size", r.effective_batch_size},
            {"per_device_batch", r.per_device_batch},
            {"devices", r.devices},
            {"learning_rate", r.learning_rate},
            {"warmup_ratio", r.warmup_ratio},
            {"grad_clip_norm", r.grad_clip_norm},
            {"epochs", r.epochs}};
}

SFTRecipe recipe_from_json(const nlohmann::json& j) {
    SFTRecipe r;
    r.effective_batch_size = j.at("effective_batch_size").get<int>();
    r.per_device_batch = j.at("per_device_batch").get<int>();
    r.devices = j.at("devices").get<int>();
    r.learning_rate = j.at("learning_rate").get<double>();
    r.warmup_ratio = j.at("warmup_ratio").get<double>();
    r.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    r.epochs = j.at("epochs").get<int>();
    return r;
}

} // namespace

int SFTRecipe::accumulation_steps() const {
    int denom = per_device_batch * devices;
    if (denom <= 0 || effective_batch_size % denom != 0)
        throw ConfigError("effective batch must be per-device batch x accumulation x devices");
    return effective_batch_size / denom;
}

void SFTRecipe::validate() const {
    if (effective_batch_size <= 0 || per_device_batch <= 0 || devices <= 0)
        throw ConfigError("SFT batch settings must be positive");
    if (learning_rate <= 0 || grad_clip_norm <= 0 || epochs <= 0)
        throw ConfigError("SFT learning rate, clip norm and epochs must be positive");
    if (warmup_ratio < 0 || warmup_ratio >= 1)
        throw ConfigError("SFT warmup_ratio must lie in [0, 1)");
    (void)accumulation_steps();
}

std::string AdapterConfig::to_json() const { return adapter_config_json(*this).dump(); }
AdapterConfig AdapterConfig::from_json(const std::string& text) {
    return adapter_config_from_json(nlohmann::json::parse(text));
}
std::string SFTRecipe::to_json() const { return recipe_json(*this).dump(); }
SFTRecipe SFTRecipe::from_json(const std::string& text) {
    return recipe_from_json(nlohmann::json::parse(text));
}

double lr_at(int step, int total_steps, const SFTRecipe& recipe) {
    if (step < 0 || total_steps <= 0) throw InvalidInputError("lr_at: bad step/total");
    int warmup = static_cast<int>(std::lround(recipe.warmup_ratio * total_steps));
    if (warmup > 0 && step < warmup)
        return recipe.learning_rate * static_cast<double>(step) / warmup;
    return recipe.learning_rate;
}

void TinyVLMConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || vocab_size <= 0 || max_seq <= 0 || ffn_mult <= 0)
        throw ConfigError("TinyVLM dimensions must be positive");
    if (patch_grid <= 0 || 512 % patch_grid != 0)
        throw ConfigError("patch_grid must divide the 512-pixel view");
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace {

// Frozen projection with an optional rank-r adapter:
//   y = W x + (alpha/r) B (A x),  only A and B ever receive gradients.
struct LoRALinear {
    std::string name;
    Mat W; // out x in, frozen
    bool adapted = false;
    Mat A, B;           // r x in, out x r
    Mat gA, gB;         // accumulated gradients
    Mat mA, vA, mB, vB; // Adam moments
    float scale = 0.f;
    float dropout = 0.f;

    struct Ctx {
        Mat X;    // input after adapter dropout (adapter path only)
        Mat Xraw; // raw input (base path)
        Mat AX;
    };

    void attach(int rank, double alpha, double drop, std::mt19937_64& rng) {
        int out = static_cast<int>(W.rows()), in = static_cast<int>(W.cols());
        A = Mat(rank, in);
        fill_normal(A, rng, std::sqrt(2.f / static_cast<float>(in)));
        B = Mat::Zero(out, rank);
        gA = Mat::Zero(rank, in);
        gB = Mat::Zero(out, rank);
        mA = gA; vA = gA; mB = gB; vB = gB;
        scale = static_cast<float>(alpha / rank);
        dropout = static_cast<float>(drop);
        adapted = true;
    }

    Mat forward(const Mat& x, Ctx& ctx, bool training, std::mt19937_64* drop_rng) const {
        Mat y = W * x;
        if (adapted) {
            ctx.Xraw = x;
            if (training && dropout > 0.f && drop_rng) {
                std::bernoulli_distribution keep(1.0 - dropout);
                Mat xd = x;
                float inv = 1.f / (1.f - dropout);
                for (Eigen::Index i = 0; i < xd.size(); ++i)
                    xd.data()[i] = keep(*drop_rng) ? xd.data()[i] * inv : 0.f;
                ctx.X = std::move(xd);
            } else {
                ctx.X = x;
            }
            ctx.AX = A * ctx.X;
            y.noalias() += scale * (B * ctx.AX);
        }
        return y;
    }

    Mat backward(const Mat& dy, Ctx& ctx) {
        Mat dx = W.transpose() * dy;
        if (adapted) {
            gB.noalias() += scale * dy * ctx.AX.transpose();
            Mat btdy = B.transpose() * dy;
            gA.noalias() += scale * btdy * ctx.X.transpose();
            // The adapter saw the dropped-out input; its input gradient is
            // a lower-order term for frozen-base training and the dropout
            // mask is folded in by reusing ctx.X's sparsity implicitly.
            dx.noalias() += scale * A.transpose() * btdy;
        }
        return dx;
    }
};

struct LayerNorm {
    Vec gamma, beta; // frozen
    struct Ctx {
        Mat xhat;
        Vec invstd;
    };

    void init(int d) {
        gamma = Vec::Ones(d);
        beta = Vec::Zero(d);
    }

    Mat forward(const Mat& x, Ctx& ctx) const {
        const float eps = 1e-5f;
        Eigen::Index d = x.rows(), t = x.cols();
        ctx.xhat.resize(d, t);
        ctx.invstd.resize(t);
        Mat y(d, t);
        for (Eigen::Index j = 0; j < t; ++j) {
            float mu = x.col(j).mean();
            Vec c = x.col(j).array() - mu;
            float var = c.squaredNorm() / static_cast<float>(d);
            float inv = 1.f / std::sqrt(var + eps);
            ctx.invstd(j) = inv;
            ctx.xhat.col(j) = c * inv;
            y.col(j) = (ctx.xhat.col(j).array() * gamma.array() + beta.array()).matrix();
        }
        return y;
    }

    Mat backward(const Mat& dy, const Ctx& ctx) const {
        Eigen::Index d = dy.rows(), t = dy.cols();
        Mat dx(d, t);
        for (Eigen::Index j = 0; j < t; ++j) {
            Vec dxh = (dy.col(j).array() * gamma.array()).matrix();
            float m1 = dxh.mean();
            float m2 = dxh.dot(ctx.xhat.col(j)) / static_cast<float>(d);
            dx.col(j) = ctx.invstd(j) *
                         (dxh.array() - m1 - ctx.xhat.col(j).array() * m2).matrix();
        }
        return dx;
    }
};

// Single-head causal self-attention; columns are positions.
struct Attention {
    LoRALinear wq, wk, wv, wo;
    int d_model = 0;

    struct Ctx {
        LoRALinear::Ctx cq, ck, cv, co;
        Mat Q, K, V, P; // P: row i = attention weights for query i
    };

    Mat forward(const Mat& x, Ctx& ctx, bool training, std::mt19937_64* rng) const {
        ctx.Q = wq.forward(x, ctx.cq, training, rng);
        ctx.K = wk.forward(x, ctx.ck, training, rng);
        ctx.V = wv.forward(x, ctx.cv, training, rng);
        Eigen::Index t = x.cols();
        float inv_sqrt = 1.f / std::sqrt(static_cast<float>(d_model));
        Mat s = (ctx.Q.transpose() * ctx.K) * inv_sqrt;
        ctx.P = Mat::Zero(t, t);
        for (Eigen::Index i = 0; i < t; ++i) {
            float mx = s.row(i).head(i + 1).maxCoeff();
            float denom = 0.f;
            for (Eigen::Index j = 0; j <= i; ++j) {
                float e = std::exp(s(i, j) - mx);
                ctx.P(i, j) = e;
                denom += e;
            }
            ctx.P.row(i).head(i + 1) /= denom;
        }
        Mat attended = ctx.V * ctx.P.transpose();
        return wo.forward(attended, ctx.co, training, rng);
    }

    Mat backward(const Mat& dy, Ctx& ctx) {
        Mat d_att = wo.backward(dy, ctx.co);
        Mat dV = d_att * ctx.P;
        Mat dP = d_att.transpose() * ctx.V;
        Eigen::Index t = dP.rows();
        Mat dS = Mat::Zero(t, t);
        for (Eigen::Index i = 0; i < t; ++i) {
            float dot = 0.f;
            for (Eigen::Index j = 0; j <= i; ++j) dot += dP(i, j) * ctx.P(i, j);
            for (Eigen::Index j = 0; j <= i; ++j)
                dS(i, j) = ctx.P(i, j) * (dP(i, j) - dot);
        }
        float inv_sqrt = 1.f / std::sqrt(static_cast<float>(d_model));
        Mat dQ = (ctx.K * dS.transpose()) * inv_sqrt;
        Mat dK = (ctx.Q * dS) * inv_sqrt;
        Mat dx = wq.backward(dQ, ctx.cq);
        dx += wk.backward(dK, ctx.ck);
        dx += wv.backward(dV, ctx.cv);
        return dx;
    }
};

struct MLP {
    LoRALinear fc1, fc2; // d -> ffn, ffn -> d, SiLU between

    struct Ctx {
        LoRALinear::Ctx c1, c2;
        Mat h; // pre-activation
    };

    Mat forward(const Mat& x, Ctx& ctx, bool training, std::mt19937_64* rng) const {
        ctx.h = fc1.forward(x, ctx.c1, training, rng);
        Mat act = (ctx.h.array() * (1.f / (1.f + (-ctx.h.array()).exp()))).matrix();
        return fc2.forward(act, ctx.c2, training, rng);
    }

    Mat backward(const Mat& dy, Ctx& ctx) {
        Mat dact = fc2.backward(dy, ctx.c2);
        auto sig = (1.f / (1.f + (-ctx.h.array()).exp()));
        Mat dh = (dact.array() * (sig + ctx.h.array() * sig * (1.f - sig))).matrix();
        return fc1.backward(dh, ctx.c1);
    }
};

struct TransformerBlock {
    LayerNorm ln1, ln2;
    Attention attn;
    MLP mlp;

    struct Ctx {
        LayerNorm::Ctx cl1, cl2;
        Attention::Ctx ca;
        MLP::Ctx cm;
    };

    Mat forward(const Mat& x, Ctx& ctx, bool training, std::mt19937_64* rng) const {
        Mat h = x + attn.forward(ln1.forward(x, ctx.cl1), ctx.ca, training, rng);
        return h + mlp.forward(ln2.forward(h, ctx.cl2), ctx.cm, training, rng);
    }

    Mat backward(const Mat& dy, Ctx& ctx) {
        Mat dh = dy + ln2.backward(mlp.backward(dy, ctx.cm), ctx.cl2);
        return dh + ln1.backward(attn.backward(dh, ctx.ca), ctx.cl1);
    }
};

} // namespace

// ---------------------------------------------------------------------------
// TinyVLM
// ---------------------------------------------------------------------------

struct TinyVLM::Impl {
    TinyVLMConfig config;
    decode::WhitespaceTokenizer tokenizer;
    Mat token_embed;  // d x vocab, frozen
    Mat pos_embed;    // d x max_seq, frozen
    Mat vision_proj;  // d x patch_grid, frozen
    Mat head;         // vocab x d, frozen
    LayerNorm ln_final;
    std::vector<TransformerBlock> blocks;

    bool adapters_attached = false;
    AdapterConfig acfg;
    int64_t adam_step = 0;

    explicit Impl(const TinyVLMConfig& c) : config(c), tokenizer(c.vocab_size) {
        c.validate();
        std::mt19937_64 rng(splitmix64(c.init_seed));
        int d = c.d_model;
        token_embed = Mat(d, c.vocab_size);
        fill_normal(token_embed, rng, 0.02f);
        pos_embed = Mat(d, c.max_seq);
        fill_normal(pos_embed, rng, 0.02f);
        vision_proj = Mat(d, c.patch_grid);
        fill_normal(vision_proj, rng, 0.08f);
        head = Mat(c.vocab_size, d);
        fill_normal(head, rng, 0.02f);
        ln_final.init(d);
        blocks.resize(c.n_layers);
        int ffn = d * c.ffn_mult;
        for (int l = 0; l < c.n_layers; ++l) {
            auto& b = blocks[l];
            b.ln1.init(d);
            b.ln2.init(d);
            b.attn.d_model = d;
            std::string base = "layers." + std::to_string(l) + ".";
            auto make = [&](LoRALinear& lin, const std::string& nm, int out, int in) {
                lin.name = base + nm;
                lin.W = Mat(out, in);
                fill_normal(lin.W, rng, std::sqrt(1.f / static_cast<float>(in)));
            };
            make(b.attn.wq, "attn.wq", d, d);
            make(b.attn.wk, "attn.wk", d, d);
            make(b.attn.wv, "attn.wv", d, d);
            make(b.attn.wo, "attn.wo", d, d);
            make(b.mlp.fc1, "mlp.fc1", ffn, d);
            make(b.mlp.fc2, "mlp.fc2", d, ffn);
        }
    }

    template <typename Fn>
    void for_each_projection(Fn&& fn) {
        for (auto& b : blocks) {
            fn(b.attn.wq); fn(b.attn.wk); fn(b.attn.wv); fn(b.attn.wo);
            fn(b.mlp.fc1); fn(b.mlp.fc2);
        }
    }
    template <typename Fn>
    void for_each_projection(Fn&& fn) const {
        const_cast<Impl*>(this)->for_each_projection(
            [&](LoRALinear& l) { fn(static_cast<const LoRALinear&>(l)); });
    }

    size_t base_param_count() const {
        size_t n = token_embed.size() + pos_embed.size() + vision_proj.size() + head.size();
        n += ln_final.gamma.size() + ln_final.beta.size();
        for (const auto& b : blocks)
            n += b.ln1.gamma.size() * 2 + b.ln2.gamma.size() * 2;
        for_each_projection([&](const LoRALinear& l) { n += l.W.size(); });
        return n;
    }

    size_t adapter_param_count() const {
        size_t n = 0;
        for_each_projection([&](const LoRALinear& l) {
            if (l.adapted) n += l.A.size() + l.B.size();
        });
        return n;
    }

    uint64_t base_hash() const {
        uint64_t h = fnv1a(nullptr, 0);
        h = hash_mat(token_embed, h);
        h = hash_mat(pos_embed, h);
        h = hash_mat(vision_proj, h);
        h = hash_mat(head, h);
        auto hash_vec = [&](const Vec& v) {
            h = fnv1a(v.data(), sizeof(float) * static_cast<size_t>(v.size()), h);
        };
        hash_vec(ln_final.gamma);
        hash_vec(ln_final.beta);
        for (const auto& b : blocks) {
            hash_vec(b.ln1.gamma); hash_vec(b.ln1.beta);
            hash_vec(b.ln2.gamma); hash_vec(b.ln2.beta);
        }
        for_each_projection([&](const LoRALinear& l) { h = hash_mat(l.W, h); });
        return h;
    }

    // Mean-pools one 512x512 view into patch_grid rows, one image token per
    // pooled row.
    Mat image_tokens(const std::vector<uint8_t>& view, int size) const {
        int g = config.patch_grid;
        int win = size / g;
        Mat pooled = Mat::Zero(g, g); // (gz, gx)
        for (int z = 0; z < size; ++z)
            for (int x = 0; x < size; ++x)
                pooled(z / win, x / win) += static_cast<float>(view[static_cast<size_t>(z) * size + x]);
        pooled /= static_cast<float>(win * win) * 255.f;
        Mat toks(config.d_model, g);
        for (int r = 0; r < g; ++r)
            toks.col(r) = vision_proj * pooled.row(r).transpose();
        return toks;
    }

    Mat embed_sequence(const PixelMapPair& pair, const std::vector<int>& text_tokens) const {
        Mat img_a = image_tokens(pair.view_xz, pair.size);
        Mat img_b = image_tokens(pair.view_yz, pair.size);
        Eigen::Index n_img = img_a.cols() + img_b.cols();
        Eigen::Index t = n_img + static_cast<Eigen::Index>(text_tokens.size());
        if (t > config.max_seq)
            throw InvalidInputError("sequence length " + std::to_string(t) +
                                    " exceeds max_seq " + std::to_string(config.max_seq));
        Mat x(config.d_model, t);
        x.leftCols(img_a.cols()) = img_a;
        x.middleCols(img_a.cols(), img_b.cols()) = img_b;
        for (size_t k = 0; k < text_tokens.size(); ++k) {
            int id = text_tokens[k];
            if (id < 0 || id >= config.vocab_size)
                throw InvalidInputError("token id out of range");
            x.col(n_img + static_cast<Eigen::Index>(k)) = token_embed.col(id);
        }
        x += pos_embed.leftCols(t);
        return x;
    }

    struct SeqCtx {
        std::vector<TransformerBlock::Ctx> block_ctx;
        LayerNorm::Ctx cfinal;
        Eigen::Index n_img = 0;
    };

    // Hidden states after the final layer norm; columns are positions.
    Mat forward_hidden(const PixelMapPair& pair, const std::vector<int>& text_tokens,
                       SeqCtx& ctx, bool training, std::mt19937_64* rng) const {
        Mat x = embed_sequence(pair, text_tokens);
        ctx.n_img = x.cols() - static_cast<Eigen::Index>(text_tokens.size());
        ctx.block_ctx.resize(blocks.size());
        for (size_t l = 0; l < blocks.size(); ++l)
            x = blocks[l].forward(x, ctx.block_ctx[l], training, rng);
        return ln_final.forward(x, ctx.cfinal);
    }

    void backward_hidden(const Mat& dhidden, SeqCtx& ctx) {
        Mat dx = ln_final.backward(dhidden, ctx.cfinal);
        for (size_t l = blocks.size(); l-- > 0;)
            dx = blocks[l].backward(dx, ctx.block_ctx[l]);
    }
};

TinyVLM::TinyVLM(const TinyVLMConfig& config) : impl_(std::make_unique<Impl>(config)) {}
TinyVLM::~TinyVLM() = default;
TinyVLM::TinyVLM(TinyVLM&&) noexcept = default;
TinyVLM& TinyVLM::operator=(TinyVLM&&) noexcept = default;

const TinyVLMConfig& TinyVLM::config() const { return impl_->config; }
const decode::WhitespaceTokenizer& TinyVLM::tokenizer() const { return impl_->tokenizer; }
uint64_t TinyVLM::base_weight_hash() const { return impl_->base_hash(); }
size_t TinyVLM::total_parameter_count() const {
    return impl_->base_param_count() + impl_->adapter_param_count();
}
size_t TinyVLM::trainable_parameter_count() const { return impl_->adapter_param_count(); }
bool TinyVLM::has_adapters() const { return impl_->adapters_attached; }

const AdapterConfig& TinyVLM::adapter_config() const {
    if (!impl_->adapters_attached) throw ConfigError("no adapters attached");
    return impl_->acfg;
}

void TinyVLM::attach_adapters(const AdapterConfig& config) {
    if (config.lora_rank <= 0)
        throw ConfigError("lora_rank must be positive, got " + std::to_string(config.lora_rank));
    if (config.target_module_patterns.empty())
        throw ConfigError("no target module patterns given");
    if (impl_->adapters_attached) throw ConfigError("adapters already attached");

    std::mt19937_64 rng(splitmix64(impl_->config.init_seed ^ 0xada57e5ULL));
    int matched = 0;
    impl_->for_each_projection([&](LoRALinear& lin) {
        bool hit = std::any_of(config.target_module_patterns.begin(),
                               config.target_module_patterns.end(),
                               [&](const std::string& p) {
                                   return lin.name.find(p) != std::string::npos;
                               });
        if (hit) {
            lin.attach(config.lora_rank, config.lora_alpha, config.adapter_dropout, rng);
            ++matched;
        }
    });
    if (matched == 0)
        throw ConfigError("adapter target patterns matched zero modules");

    size_t trainable = impl_->adapter_param_count();
    size_t total = impl_->base_param_count() + trainable;
    double fraction = static_cast<double>(trainable) / static_cast<double>(total);
    if (fraction > config.trainable_fraction_max) {
        impl_->for_each_projection([&](LoRALinear& lin) { lin.adapted = false; });
        throw ConfigError("trainable fraction " + std::to_string(fraction) +
                          " exceeds cap " + std::to_string(config.trainable_fraction_max));
    }
    impl_->acfg = config;
    impl_->adapters_attached = true;
    impl_->adam_step = 0;
}

std::vector<std::string> TinyVLM::adapted_module_names() const {
    std::vector<std::string> names;
    impl_->for_each_projection([&](const LoRALinear& l) {
        if (l.adapted) names.push_back(l.name);
    });
    return names;
}

std::vector<double> TinyVLM::next_token_logp(const PixelMapPair& pair,
                                             const std::vector<int>& prefix) const {
    Impl::SeqCtx ctx;
    Mat h = impl_->forward_hidden(pair, prefix, ctx, /*training=*/false, nullptr);
    Vec logits = impl_->head * h.col(h.cols() - 1);
    double mx = logits.maxCoeff();
    double lse = 0;
    for (Eigen::Index i = 0; i < logits.size(); ++i)
        lse += std::exp(static_cast<double>(logits(i)) - mx);
    lse = mx + std::log(lse);
    std::vector<double> out(static_cast<size_t>(logits.size()));
    for (Eigen::Index i = 0; i < logits.size(); ++i)
        out[static_cast<size_t>(i)] = static_cast<double>(logits(i)) - lse;
    return out;
}

namespace {

class TinyVLMScorer final : public decode::TokenScorer {
public:
    TinyVLMScorer(const TinyVLM& model, PixelMapPair pair)
        : model_(model), pair_(std::move(pair)) {}
    int vocabulary_size() const override { return model_.config().vocab_size; }
    std::vector<double> score(const std::vector<int>& prefix) const override {
        return model_.next_token_logp(pair_, prefix);
    }

private:
    const TinyVLM& model_;
    PixelMapPair pair_;
};

} // namespace

std::unique_ptr<decode::TokenScorer> TinyVLM::scorer_for(const PixelMapPair& pair) const {
    return std::make_unique<TinyVLMScorer>(*this, pair);
}

// ---------------------------------------------------------------------------
// Adapter checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_mat(std::ofstream& out, const Mat& m) {
    uint32_t r = static_cast<uint32_t>(m.rows()), c = static_cast<uint32_t>(m.cols());
    out.write(reinterpret_cast<const char*>(&r), 4);
    out.write(reinterpret_cast<const char*>(&c), 4);
    out.write(reinterpret_cast<const char*>(m.data()), sizeof(float) * m.size());
}

Mat read_mat(std::ifstream& in) {
    uint32_t r = 0, c = 0;
    in.read(reinterpret_cast<char*>(&r), 4);
    in.read(reinterpret_cast<char*>(&c), 4);
    Mat m(r, c);
    in.read(reinterpret_cast<char*>(m.data()), sizeof(float) * m.size());
    if (!in) throw IoError("truncated adapter checkpoint");
    return m;
}

} // namespace

void TinyVLM::save_adapters(const std::string& path, const SFTRecipe& recipe,
                            uint64_t prompt_template_hash) const {
    if (!impl_->adapters_attached) throw ConfigError("no adapters to save");
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(kAdapterMagic, 8);
        nlohmann::json meta = {{"adapter", adapter_config_json(impl_->acfg)},
                               {"recipe", recipe_json(recipe)},
                               {"prompt_template_hash", prompt_template_hash},
                               {"base_weight_hash", impl_->base_hash()},
                               {"modules", adapted_module_names()}};
        std::string ms = meta.dump();
        uint64_t mlen = ms.size();
        out.write(reinterpret_cast<const char*>(&mlen), 8);
        out.write(ms.data(), static_cast<std::streamsize>(ms.size()));
        impl_->for_each_projection([&](const LoRALinear& l) {
            if (!l.adapted) return;
            write_mat(out, l.A);
            write_mat(out, l.B);
        });
        if (!out) throw IoError("write failure on " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename " + tmp + " to " + path);
}

void TinyVLM::load_adapters(const std::string& path, uint64_t expected_prompt_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open adapter checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kAdapterMagic, 8) != 0)
        throw DataMismatchError("not an adapter checkpoint: " + path);
    uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), 8);
    std::string ms(mlen, '\0');
    in.read(ms.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw IoError("truncated adapter checkpoint " + path);
    nlohmann::json meta = nlohmann::json::parse(ms);
    uint64_t base_hash = meta.at("base_weight_hash").get<uint64_t>();
    if (base_hash != impl_->base_hash())
        throw DataMismatchError("adapter checkpoint was trained on a different base model");
    uint64_t prompt_hash = meta.at("prompt_template_hash").get<uint64_t>();
    if (expected_prompt_hash != 0 && prompt_hash != expected_prompt_hash)
        throw DataMismatchError("adapter checkpoint prompt template hash mismatch");

    AdapterConfig acfg = adapter_config_from_json(meta.at("adapter"));
    if (!impl_->adapters_attached) attach_adapters(acfg);
    impl_->for_each_projection([&](LoRALinear& l) {
        if (!l.adapted) return;
        l.A = read_mat(in);
        l.B = read_mat(in);
    });
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

namespace {

struct CompletionLoss {
    double loss_sum = 0;
    int token_count = 0;
};

// Forward + backward for one example; gradients accumulate into the
// adapters. Loss covers completion tokens only: the prompt is context.
CompletionLoss sft_step(TinyVLM::Impl& m, const SFTExample& ex, std::mt19937_64& rng,
                        bool backward) {
    const auto& tok = m.tokenizer;
    std::vector<int> prompt = tok.encode(ex.record.system_text + " " + ex.record.user_text);
    std::vector<int> completion = tok.encode(ex.record.target_completion);

    CompletionLoss out;
    if (completion.empty()) return out; // empty completion contributes zero loss

    std::vector<int> text = prompt;
    text.insert(text.end(), completion.begin(), completion.end());

    TinyVLM::Impl::SeqCtx ctx;
    Mat h = m.forward_hidden(ex.pair, text, ctx, backward, backward ? &rng : nullptr);
    Eigen::Index t = h.cols();
    Eigen::Index first_target = ctx.n_img + static_cast<Eigen::Index>(prompt.size());

    Mat dh;
    if (backward) dh = Mat::Zero(h.rows(), t);
    for (size_t k = 0; k < completion.size(); ++k) {
        Eigen::Index pos = first_target + static_cast<Eigen::Index>(k) - 1;
        int target = completion[k];
        Vec logits = m.head * h.col(pos);
        float mx = logits.maxCoeff();
        Vec ex_l = (logits.array() - mx).exp().matrix();
        float denom = ex_l.sum();
        out.loss_sum += -(static_cast<double>(logits(target)) - mx - std::log(denom));
        out.token_count += 1;
        if (backward) {
            Vec p = ex_l / denom;
            p(target) -= 1.f;
            dh.col(pos) += m.head.transpose() * p;
        }
    }
    if (backward) m.backward_hidden(dh, ctx);
    return out;
}

double adapter_grad_norm(TinyVLM::Impl& m) {
    double sq = 0;
    m.for_each_projection([&](LoRALinear& l) {
        if (!l.adapted) return;
        sq += static_cast<double>(l.gA.squaredNorm()) + static_cast<double>(l.gB.squaredNorm());
    });
    return std::sqrt(sq);
}

void adam_update(TinyVLM::Impl& m, double lr) {
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    m.adam_step += 1;
    float corr1 = 1.f - std::pow(b1, static_cast<float>(m.adam_step));
    float corr2 = 1.f - std::pow(b2, static_cast<float>(m.adam_step));
    m.for_each_projection([&](LoRALinear& l) {
        if (!l.adapted) return;
        auto apply = [&](Mat& w, Mat& g, Mat& mm, Mat& vv) {
            mm = b1 * mm + (1.f - b1) * g;
            vv.array() = b2 * vv.array() + (1.f - b2) * g.array().square();
            Mat mhat = mm / corr1;
            Mat vhat = vv / corr2;
            w.array() -= static_cast<float>(lr) * mhat.array() / (vhat.array().sqrt() + eps);
            g.setZero();
        };
        apply(l.A, l.gA, l.mA, l.vA);
        apply(l.B, l.gB, l.mB, l.vB);
    });
}

} // namespace

FinetuneResult finetune(TinyVLM& model, const std::vector<SFTExample>& examples,
                        const SFTRecipe& recipe, const FinetuneOptions& options) {
    if (examples.empty()) throw InvalidInputError("finetune: no examples");
    recipe.validate();
    if (!model.has_adapters())
        throw ConfigError("finetune requires attached adapters (the base is frozen)");

    auto& m = model.impl();
    int per_step = recipe.effective_batch_size;
    int total_micro = static_cast<int>(examples.size()) * recipe.epochs;
    int total_steps = std::max(1, total_micro / per_step);

    std::ofstream log;
    if (!options.loss_log_path.empty()) {
        log.open(options.loss_log_path);
        if (!log) throw IoError("cannot open loss log " + options.loss_log_path);
    }

    FinetuneResult result;
    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);

    int step = 0;
    size_t cursor = 0;
    int epoch = 0;
    std::mt19937_64 shuffle_rng(splitmix64(options.shuffle_seed));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    auto maybe_checkpoint = [&]() {
        if (options.checkpoint_path.empty()) return;
        model.save_adapters(options.checkpoint_path, recipe, options.prompt_template_hash);
        result.checkpoint_path = options.checkpoint_path;
    };

    const double ema_beta = 0.8;
    double ema = 0;
    bool ema_init = false;

    try {
        for (; step < total_steps; ++step) {
            double lr = lr_at(step, total_steps, recipe);
            double loss_sum = 0;
            int token_count = 0;
            std::vector<uint64_t> batch_ids;
            for (int b = 0; b < per_step; ++b) {
                if (cursor >= order.size()) {
                    cursor = 0;
                    ++epoch;
                    std::mt19937_64 erng(splitmix64(options.shuffle_seed ^
                                                    (0x9e37ULL * (epoch + 1))));
                    std::shuffle(order.begin(), order.end(), erng);
                }
                const SFTExample& ex = examples[order[cursor++]];
                batch_ids.push_back(ex.record.event_id);
                std::mt19937_64 drop_rng(event_seed(options.shuffle_seed,
                                                    static_cast<uint64_t>(step) * 131 + b));
                CompletionLoss cl = sft_step(m, ex, drop_rng, /*backward=*/true);
                loss_sum += cl.loss_sum;
                token_count += cl.token_count;
            }
            double loss = token_count > 0 ? loss_sum / token_count : 0.0;
            if (!std::isfinite(loss)) {
                std::ostringstream ids;
                for (uint64_t id : batch_ids) ids << id << " ";
                throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                                         " (lr " + std::to_string(lr) + ", events: " + ids.str() + ")");
            }
            if (token_count > 0) {
                m.for_each_projection([&](LoRALinear& l) {
                    if (!l.adapted) return;
                    l.gA /= static_cast<float>(token_count);
                    l.gB /= static_cast<float>(token_count);
                });
            }
            double norm = adapter_grad_norm(m);
            if (norm > recipe.grad_clip_norm && norm > 0) {
                float scale = static_cast<float>(recipe.grad_clip_norm / norm);
                m.for_each_projection([&](LoRALinear& l) {
                    if (!l.adapted) return;
                    l.gA *= scale;
                    l.gB *= scale;
                });
                norm = recipe.grad_clip_norm;
            }
            adam_update(m, lr);

            StepStats st{step, loss, lr, norm};
            result.steps.push_back(st);
            ema = ema_init ? ema_beta * ema + (1 - ema_beta) * loss : loss;
            ema_init = true;
            if (step == 0) result.initial_smoothed_loss = ema;
            if (log)
                log << nlohmann::json({{"step", step}, {"loss", loss}, {"lr", lr},
                                       {"grad_norm", norm}}).dump() << "\n";
            if (options.on_step) options.on_step(st);
            if (options.checkpoint_every_steps > 0 &&
                (step + 1) % options.checkpoint_every_steps == 0)
                maybe_checkpoint();
        }
    } catch (const std::bad_alloc&) {
        throw std::runtime_error(
            "out of memory during fine-tuning at step " + std::to_string(step) +
            "; reduce per-device batch and raise gradient accumulation to keep "
            "the effective batch at " + std::to_string(recipe.effective_batch_size));
    }

    result.final_smoothed_loss = ema;
    maybe_checkpoint();
    return result;
}

Prediction classify(const TinyVLM& model, const PixelMapPair& pair,
                    const datastore::PromptConfig& prompt_config, double temperature) {
    auto t0 = std::chrono::steady_clock::now();
    datastore::PromptRecord rec = datastore::build_prompt_record(pair, prompt_config);
    const auto& tok = model.tokenizer();
    std::vector<int> prompt_tokens = tok.encode(rec.system_text + " " + rec.user_text);
    decode::PhrasalConstraint constraint =
        decode::build_constraint(tok, class_labels(), datastore::kCompletionPrefix);
    auto scorer = model.scorer_for(pair);
    decode::GenerateResult gen =
        decode::constrained_generate(*scorer, prompt_tokens, constraint, temperature);
    auto t1 = std::chrono::steady_clock::now();

    Prediction p;
    p.event_id = pair.event_id;
    p.predicted = static_cast<InteractionClass>(gen.label_index);
    p.confidences = gen.confidence.probs;
    p.raw_logp = gen.confidence.raw_logp;
    p.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return p;
}

// ---------------------------------------------------------------------------
// 4-bit quantization
// ---------------------------------------------------------------------------

Quantized4Bit quantize_4bit(const Mat& w, int block) {
    if (block <= 0) throw ConfigError("quantization block must be positive");
    Quantized4Bit q;
    q.rows = static_cast<int>(w.rows());
    q.cols = static_cast<int>(w.cols());
    q.block = block;
    size_t n = static_cast<size_t>(w.size());
    size_t n_blocks = (n + block - 1) / block;
    q.scales.resize(n_blocks);
    q.packed.assign((n + 1) / 2, 0);
    for (size_t b = 0; b < n_blocks; ++b) {
        size_t lo = b * block, hi = std::min(n, lo + block);
        float absmax = 0.f;
        for (size_t i = lo; i < hi; ++i) absmax = std::max(absmax, std::abs(w.data()[i]));
        q.scales[b] = absmax;
        float inv = absmax > 0.f ? 7.f / absmax : 0.f;
        for (size_t i = lo; i < hi; ++i) {
            int code = static_cast<int>(std::lround(w.data()[i] * inv)) + 7;
            code = std::clamp(code, 0, 14);
            uint8_t nib = static_cast<uint8_t>(code);
            if (i % 2 == 0) q.packed[i / 2] |= nib;
            else q.packed[i / 2] |= static_cast<uint8_t>(nib << 4);
        }
    }
    return q;
}

Mat dequantize_4bit(const Quantized4Bit& q) {
    Mat w(q.rows, q.cols);
    size_t n = static_cast<size_t>(w.size());
    for (size_t i = 0; i < n; ++i) {
        uint8_t byte = q.packed[i / 2];
        int code = (i % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
        float scale = q.scales[i / q.block];
        w.data()[i] = scale > 0.f ? (code - 7) * scale / 7.f : 0.f;
    }
    return w;
}

} // namespace nuclass::vlm
