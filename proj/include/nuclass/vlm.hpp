// Fine-tuning harness for a vision-language backbone: low-rank adapters on
// attention/MLP projections over a frozen base, completion-only SFT loss,
// and classification via constrained decoding.
//
// The desk-scale backbone here is TinyVLM, a small causal transformer with a
// pooled-patch image encoder. It exists so the adapter plumbing, the training
// loop and the decode path can be exercised end to end on one CPU core; the
// backbone choice is a config field, not a hard dependency.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nuclass/common.hpp"
#include "nuclass/datastore.hpp"
#include "nuclass/decode.hpp"

namespace nuclass::vlm {

using Mat = Eigen::MatrixXf;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct AdapterConfig {
    std::string base_model_id = "tinyvlm-64";
    int quantization_bits = 4;
    int lora_rank = 16;
    double lora_alpha = 32.0;
    double adapter_dropout = 0.05;
    // Substring patterns; a projection is adapted when its name contains any
    // of them. Zero total matches is a configuration error.
    std::vector<std::string> target_module_patterns = {"attn.", "mlp."};
    double trainable_fraction_max = 0.05;

    static AdapterConfig defaults() { return {}; }
    std::string to_json() const;
    static AdapterConfig from_json(const std::string& text);
};

struct SFTRecipe {
    int effective_batch_size = 8;
    int per_device_batch = 1;
    int devices = 1; // accumulation = effective / (per_device * devices)
    double learning_rate = 2e-4;
    double warmup_ratio = 0.03;
    double grad_clip_norm = 0.3;
    int epochs = 1;

    int accumulation_steps() const;
    void validate() const;
    std::string to_json() const;
    static SFTRecipe from_json(const std::string& text);
};

// Linear warmup from 0 to peak over round(warmup_ratio * total_steps) steps,
// constant afterwards. lr_at(0) == 0 whenever warmup is nonempty.
double lr_at(int step, int total_steps, const SFTRecipe& recipe);

struct TinyVLMConfig {
    int d_model = 64;
    int n_layers = 2;
    int vocab_size = 4096;
    int max_seq = 256;
    int ffn_mult = 4;
    // Each 512x512 view is mean-pooled to a patch_grid x patch_grid map;
    // every pooled row becomes one image token of dimension patch_grid.
    int patch_grid = 16;
    uint64_t init_seed = 0x7ea1;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class TinyVLM {
public:
    explicit TinyVLM(const TinyVLMConfig& config);
    ~TinyVLM();
    TinyVLM(TinyVLM&&) noexcept;
    TinyVLM& operator=(TinyVLM&&) noexcept;

    const TinyVLMConfig& config() const;
    const decode::WhitespaceTokenizer& tokenizer() const;

    // FNV-1a over every frozen (non-adapter) weight, in declaration order.
    uint64_t base_weight_hash() const;

    size_t total_parameter_count() const;     // base + attached adapters
    size_t trainable_parameter_count() const; // adapters only (0 if none)
    bool has_adapters() const;
    const AdapterConfig& adapter_config() const; // throws if none attached

    // Attaches rank-r adapters to every projection whose name matches a
    // pattern and freezes everything else. Throws ConfigError on rank <= 0,
    // zero matched modules, or trainable fraction above the configured cap.
    void attach_adapters(const AdapterConfig& config);

    // Names of the projections the adapters landed on.
    std::vector<std::string> adapted_module_names() const;

    // Log-softmax over the vocabulary for the next token after `prefix`,
    // conditioned on the two pixel-map views. Greedy/deterministic.
    std::vector<double> next_token_logp(const PixelMapPair& pair,
                                        const std::vector<int>& prefix) const;

    // decode::TokenScorer view of this model for a fixed image pair.
    std::unique_ptr<decode::TokenScorer> scorer_for(const PixelMapPair& pair) const;

    void save_adapters(const std::string& path, const SFTRecipe& recipe,
                       uint64_t prompt_template_hash) const;
    // Restores adapter weights; refuses checkpoints whose prompt-template
    // hash disagrees with `expected_prompt_hash` (pass 0 to skip the check).
    void load_adapters(const std::string& path, uint64_t expected_prompt_hash);

    struct Impl;
    Impl& impl() { return *impl_; }
    const Impl& impl() const { return *impl_; }

private:
    std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Supervised fine-tuning
// ---------------------------------------------------------------------------

struct SFTExample {
    PixelMapPair pair;
    datastore::PromptRecord record;
};

struct StepStats {
    int step = 0;
    double loss = 0;      // mean over the effective batch's completion tokens
    double lr = 0;
    double grad_norm = 0; // post-clip global norm
};

struct FinetuneResult {
    std::vector<StepStats> steps;
    double initial_smoothed_loss = 0;
    double final_smoothed_loss = 0;
    std::string checkpoint_path;
};

struct FinetuneOptions {
    std::string checkpoint_path;     // empty -> no checkpoint written
    std::string loss_log_path;       // empty -> no JSONL log
    int checkpoint_every_steps = 50; // periodic + final
    uint64_t prompt_template_hash = 0;
    uint64_t shuffle_seed = 17;
    std::function<void(const StepStats&)> on_step;
};

// One pass (recipe.epochs) over the examples with gradient accumulation to
// the effective batch, linear warmup, per-step global-norm clipping, and
// loss on completion tokens only. Throws on non-finite loss with step
// diagnostics; maps allocation failure to an actionable message.
FinetuneResult finetune(TinyVLM& model, const std::vector<SFTExample>& examples,
                        const SFTRecipe& recipe, const FinetuneOptions& options = {});

// Builds the inference prompt (training templates minus the target), runs
// constrained generation and packages the result with wall-clock latency.
Prediction classify(const TinyVLM& model, const PixelMapPair& pair,
                    const datastore::PromptConfig& prompt_config,
                    double temperature = decode::kDefaultTemperature);

// ---------------------------------------------------------------------------
// 4-bit block quantization (used when a backbone exceeds the memory budget;
// TinyVLM itself runs unquantized)
// ---------------------------------------------------------------------------

struct Quantized4Bit {
    int rows = 0, cols = 0;
    int block = 32;                // elements per scale block, column-major
    std::vector<uint8_t> packed;   // two 4-bit codes per byte
    std::vector<float> scales;     // one absmax scale per block
};

Quantized4Bit quantize_4bit(const Mat& w, int block = 32);
Mat dequantize_4bit(const Quantized4Bit& q);

} // namespace nuclass::vlm
