#include "nuclass/decode.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nuclass::decode {

WhitespaceTokenizer::WhitespaceTokenizer(int vocab_size) : vocab_size_(vocab_size) {
    if (vocab_size < 8) throw ConfigError("tokenizer vocabulary too small");
    reverse_.resize(static_cast<size_t>(vocab_size));
}

int WhitespaceTokenizer::token_of(const std::string& word) const {
    // Reserve id 0 for padding/unknown.
    uint64_t h = fnv1a(word.data(), word.size());
    int id = 1 + static_cast<int>(h % static_cast<uint64_t>(vocab_size_ - 1));
    reverse_[static_cast<size_t>(id)] = word;
    return id;
}

std::vector<int> WhitespaceTokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) out.push_back(token_of(word));
    return out;
}

std::string WhitespaceTokenizer::decode(const std::vector<int>& tokens) const {
    std::string out;
    for (int t : tokens) {
        if (t < 0 || t >= vocab_size_) continue;
        if (!out.empty()) out += ' ';
        const std::string& w = reverse_[static_cast<size_t>(t)];
        out += w.empty() ? "<unk>" : w;
    }
    return out;
}

PhrasalConstraint build_constraint(const Tokenizer& tokenizer,
                                   const std::array<std::string, 3>& labels,
                                   const std::string& prefix) {
    for (int i = 0; i < 3; ++i) {
        if (labels[i].empty()) throw ConfigError("constraint labels must be nonempty");
        for (int j = i + 1; j < 3; ++j)
            if (labels[i] == labels[j])
                throw ConfigError("duplicate constraint labels: \"" + labels[i] + "\"");
    }

    PhrasalConstraint c;
    c.prefix_tokens = tokenizer.encode(prefix);
    for (int i = 0; i < 3; ++i) {
        c.label_token_seqs[i] = tokenizer.encode(labels[i]);
        if (c.label_token_seqs[i].empty())
            throw ConfigError("label tokenizes to nothing: \"" + labels[i] + "\"");
    }

    size_t min_len = std::min({c.label_token_seqs[0].size(), c.label_token_seqs[1].size(),
                               c.label_token_seqs[2].size()});
    int offset = -1;
    for (size_t k = 0; k < min_len; ++k) {
        int a = c.label_token_seqs[0][k], b = c.label_token_seqs[1][k],
            d = c.label_token_seqs[2][k];
        if (!(a == b && b == d)) {
            offset = static_cast<int>(k);
            break;
        }
    }
    if (offset < 0)
        throw ConfigError("labels \"" + labels[0] + "\", \"" + labels[1] + "\", \"" + labels[2] +
                          "\" share a token prefix through the shortest label; "
                          "indistinguishable under this tokenizer");
    std::array<int, 3> toks = {c.label_token_seqs[0][offset], c.label_token_seqs[1][offset],
                               c.label_token_seqs[2][offset]};
    if (toks[0] == toks[1] || toks[0] == toks[2] || toks[1] == toks[2])
        throw ConfigError("label decision tokens are not pairwise distinct at offset " +
                          std::to_string(offset));
    c.decision_offset = offset;
    c.decision_tokens = toks;
    return c;
}

std::array<double, 3> temperature_rescale(const std::array<double, 3>& raw_logp, double T) {
    if (!(T > 0)) throw InvalidInputError("temperature must be > 0");
    std::array<double, 3> scaled;
    for (int i = 0; i < 3; ++i) {
        if (!std::isfinite(raw_logp[i]))
            throw InvalidInputError("temperature_rescale requires finite log-probabilities");
        scaled[i] = T * raw_logp[i];
    }
    double m = std::max({scaled[0], scaled[1], scaled[2]});
    std::array<double, 3> out;
    double sum = 0;
    for (int i = 0; i < 3; ++i) {
        out[i] = std::exp(scaled[i] - m);
        sum += out[i];
    }
    for (int i = 0; i < 3; ++i) out[i] /= sum;
    return out;
}

GenerateResult constrained_generate(const TokenScorer& scorer,
                                    const std::vector<int>& prompt_tokens,
                                    const PhrasalConstraint& constraint, double temperature) {
    // The output language has three members that differ only at
    // decision_offset, so beam search degenerates to scoring that single
    // position; width 1 with explicit 3-way scoring is exact.
    std::vector<int> context = prompt_tokens;
    context.insert(context.end(), constraint.prefix_tokens.begin(),
                   constraint.prefix_tokens.end());
    for (int k = 0; k < constraint.decision_offset; ++k)
        context.push_back(constraint.label_token_seqs[0][k]); // shared across labels

    std::vector<double> logp = scorer.score(context);
    if (static_cast<int>(logp.size()) != scorer.vocabulary_size())
        throw InvalidInputError("scorer returned a vector of the wrong length");

    GenerateResult res;
    res.confidence.temperature = temperature;
    for (int i = 0; i < 3; ++i) {
        int tok = constraint.decision_tokens[i];
        if (tok < 0 || tok >= static_cast<int>(logp.size()))
            throw InvalidInputError("decision token outside scorer vocabulary");
        double v = logp[static_cast<size_t>(tok)];
        if (!std::isfinite(v))
            throw InvalidInputError("scorer produced a non-finite log-probability");
        res.confidence.raw_logp[i] = v;
    }
    // Lowest index wins ties.
    int best = 0;
    for (int i = 1; i < 3; ++i)
        if (res.confidence.raw_logp[i] > res.confidence.raw_logp[best]) best = i;
    res.label_index = best;
    res.confidence.probs = temperature_rescale(res.confidence.raw_logp, temperature);

    res.emitted_tokens = constraint.prefix_tokens;
    res.emitted_tokens.insert(res.emitted_tokens.end(),
                              constraint.label_token_seqs[best].begin(),
                              constraint.label_token_seqs[best].end());
    return res;
}

} // namespace nuclass::decode
