// Siamese two-view CNN baseline: one weight-shared branch of inverted
// residual blocks per view, channel-concatenated into a trunk, global
// average pooling, dropout, and a small classification head.
#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "nuclass/common.hpp"
#include "nuclass/nn/core.hpp"

namespace nuclass::cnn {

struct BlockSpec {
    double expansion = 1.0; // >= 1
    int kernel = 3;         // 3 or 5
    int out_channels = 16;
    int stride = 1; // 1 or 2
    bool use_se = false;
    nn::Activation activation = nn::Activation::ReLU6;
};

struct CNNConfig {
    int stem_channels = 16;
    int stem_kernel = 5;
    int stem_stride = 4;
    std::vector<BlockSpec> branch_blocks;
    std::vector<BlockSpec> trunk_blocks;
    int fc_hidden = 128;
    double dropout_rate = 0.2;
    int n_classes = 3;
    int se_reduction = 4;
    int input_size = 512;
    uint64_t init_seed = 0;

    static CNNConfig defaults();
    void validate() const;
    std::string to_json() const;
    static CNNConfig from_json(const std::string& text);
};

struct TrainRecipe {
    double learning_rate = 1e-6; // paper recipe; desk-scale runs raise this
    int batch_size = 16;
    int max_epochs = 300;
    int early_stop_patience = 10;

    void validate() const;
    std::string to_json() const;
    static TrainRecipe from_json(const std::string& text);
};

class SiameseCNN {
public:
    explicit SiameseCNN(const CNNConfig& config);
    ~SiameseCNN();
    SiameseCNN(SiameseCNN&&) noexcept;

    const CNNConfig& config() const;
    nn::ParamSet& params();
    long parameter_count() const;

    // Batched forward. Views are (1, H, W, N) tensors in [0, 1].
    struct ForwardCtx {
        ForwardCtx();
        ~ForwardCtx();
        ForwardCtx(ForwardCtx&&) noexcept;
        struct State;
        std::unique_ptr<State> state;
    };
    nn::Mat forward(const nn::Tensor& view_xz, const nn::Tensor& view_yz, bool training,
                    std::mt19937_64* dropout_rng, ForwardCtx& ctx);
    void backward(const nn::Mat& grad_logits, ForwardCtx& ctx);

    // Eval-mode batched logits, context discarded.
    nn::Mat forward_eval(const nn::Tensor& view_xz, const nn::Tensor& view_yz);

    // Batch-norm running statistics (not trained, saved with checkpoints).
    std::vector<std::pair<std::string, nn::Mat*>> named_buffers();

    // Single branch evaluation; both input slots run through this same
    // instance, which is what makes the architecture Siamese.
    nn::Mat branch_features(const nn::Tensor& view); // pooled (C, N), eval mode

    Prediction predict(const PixelMapPair& pair);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Converts 8-bit maps to a normalized (1, size, size, n) tensor column block.
void fill_view_tensor(nn::Tensor& t, int slot, const std::vector<uint8_t>& grid, int size);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Fills (view_xz, view_yz, labels) for the requested dataset indices.
using BatchLoader = std::function<void(const std::vector<uint64_t>& indices, nn::Tensor& view_xz,
                                       nn::Tensor& view_yz, std::vector<int>& labels)>;

struct EpochLog {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_accuracy = 0;
};

struct TrainResult {
    std::vector<EpochLog> history;
    int best_epoch = 0;
    double best_val_loss = 0;
    bool early_stopped = false;
};

struct TrainOptions {
    uint64_t shuffle_seed = 0;
    int start_epoch = 0;     // resume point; per-epoch rngs are stateless
    int64_t adam_steps = 0;  // restored optimizer step counter
    std::filesystem::path checkpoint_path;   // best-val weights, empty to skip
    std::filesystem::path log_path;          // append-only JSONL, empty to skip
    std::function<bool(const EpochLog&)> on_epoch; // return false to stop
};

TrainResult train(SiameseCNN& model, const BatchLoader& loader,
                  const std::vector<uint64_t>& train_indices,
                  const std::vector<uint64_t>& val_indices, const TrainRecipe& recipe,
                  const TrainOptions& options);

// Checkpoint: config + recipe snapshot + named weight tensors (+ optional
// Adam state for resume). One copy of branch parameters by construction.
void save_checkpoint(const std::filesystem::path& path, SiameseCNN& model,
                     const TrainRecipe& recipe, const std::string& log_pointer = {},
                     const nn::Adam* optimizer = nullptr, int epochs_done = 0);

struct Checkpoint {
    CNNConfig config;
    TrainRecipe recipe;
    std::string log_pointer;
    int epochs_done = 0;
    int64_t adam_steps = 0;
    std::unique_ptr<SiameseCNN> model;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace nuclass::cnn
