// Model-agnostic constrained generation and confidence extraction.
//
// Generation is forced to emit a fixed phrase prefix followed by exactly one
// of three canonical labels. The model is consulted once, at the first
// position where the label token sequences diverge; the per-class
// log-probabilities there go through a temperature-scaled softmax
// (probs = softmax(T * log p), T = 5 by default).
#pragma once

#include <array>
#include <string>
#include <vector>

#include "nuclass/common.hpp"

namespace nuclass::decode {

struct TokenScorer {
    virtual ~TokenScorer() = default;
    virtual int vocabulary_size() const = 0;
    // Log-distribution over the next token given the prefix.
    // Contract: log-sum-exp of the returned vector is 0 within 1e-4.
    virtual std::vector<double> score(const std::vector<int>& prefix) const = 0;
};

struct Tokenizer {
    virtual ~Tokenizer() = default;
    virtual std::vector<int> encode(const std::string& text) const = 0;
    virtual std::string decode(const std::vector<int>& tokens) const = 0;
    virtual int vocabulary_size() const = 0;
};

// Whitespace word tokenizer with ids from a stable string hash. The toy
// stand-in for a subword vocabulary; collisions are possible but the id
// space is wide enough that the default label words never collide.
class WhitespaceTokenizer final : public Tokenizer {
public:
    explicit WhitespaceTokenizer(int vocab_size = 2048);
    std::vector<int> encode(const std::string& text) const override;
    std::string decode(const std::vector<int>& tokens) const override;
    int vocabulary_size() const override { return vocab_size_; }
    int token_of(const std::string& word) const;

private:
    int vocab_size_;
    mutable std::vector<std::string> reverse_; // id -> last word seen (for decode)
};

struct PhrasalConstraint {
    std::vector<int> prefix_tokens;
    std::array<std::vector<int>, 3> label_token_seqs;
    int decision_offset = 0; // first position where the three labels diverge
    std::array<int, 3> decision_tokens = {-1, -1, -1};
};

// Tokenizes prefix and labels and locates the decision position. Throws
// ConfigError when labels are indistinguishable under this tokenizer.
PhrasalConstraint build_constraint(const Tokenizer& tokenizer,
                                   const std::array<std::string, 3>& labels,
                                   const std::string& prefix);

struct ConfidenceScore {
    std::array<double, 3> raw_logp = {0, 0, 0};
    double temperature = 5.0;
    std::array<double, 3> probs = {0, 0, 0};
};

struct GenerateResult {
    int label_index = 0;
    ConfidenceScore confidence;
    std::vector<int> emitted_tokens; // prefix ++ chosen label, always
};

constexpr double kDefaultTemperature = 5.0;

GenerateResult constrained_generate(const TokenScorer& scorer,
                                    const std::vector<int>& prompt_tokens,
                                    const PhrasalConstraint& constraint,
                                    double temperature = kDefaultTemperature);

// softmax(T * raw_logp), max-subtracted for stability. Throws on T <= 0 or
// non-finite input.
std::array<double, 3> temperature_rescale(const std::array<double, 3>& raw_logp, double T);

} // namespace nuclass::decode
