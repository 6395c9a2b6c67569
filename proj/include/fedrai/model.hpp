#pragma once

// Tiny deterministic causal language model with injectable low-rank
// adapters: exact log-probabilities, analytic adapter gradients, SGD and
// AdamW updates, and seeded sampling. Single-head attention, learned
// positional embeddings, untied output head, 64-bit floats throughout.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedrai/common.hpp"
#include "fedrai/matrix.hpp"

namespace fedrai::model {

// Reserved token ids. PAD is never predicted on; EOS terminates sampling;
// SEP is the artifact-wide prompt/response separator.
inline constexpr int kPadToken = 0;
inline constexpr int kEosToken = 1;
inline constexpr int kSepToken = 2;

struct ModelConfig {
    int vocab_size = 64;
    int embed_dim = 32;
    int num_layers = 2;
    int context_len = 64;
    int adapter_rank = 4;
    std::vector<std::string> adapter_targets = {"query", "value"};

    void validate() const;  // throws ConfigError
};

struct TokenSequence {
    std::vector<int> ids;

    TokenSequence() = default;
    explicit TokenSequence(std::vector<int> v) : ids(std::move(v)) {}

    size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
    bool operator==(const TokenSequence& o) const { return ids == o.ids; }
};

// prompt ++ SEP ++ response [++ EOS]; the canonical training layout.
TokenSequence join_prompt_response(const TokenSequence& prompt, const TokenSequence& response,
                                   bool append_eos);
// Index of the first response target inside the joined sequence.
inline size_t response_begin(const TokenSequence& prompt) { return prompt.size() + 1; }

// Frozen pretrained weights (the W_P role). Operations never mutate one;
// merge_adapter returns a fresh value.
struct BaseWeights {
    Matrix token_embedding;  // vocab x embed
    Matrix pos_embedding;    // context x embed
    struct Layer {
        Matrix query, key, value, output;  // each embed x embed
    };
    std::vector<Layer> layers;
    Matrix head;  // vocab x embed

    int vocab_size() const { return static_cast<int>(token_embedding.rows); }
    int embed_dim() const { return static_cast<int>(token_embedding.cols); }
    int context_len() const { return static_cast<int>(pos_embedding.rows); }
    int num_layers() const { return static_cast<int>(layers.size()); }
};

BaseWeights zero_base(const ModelConfig& config);
BaseWeights random_base(const ModelConfig& config, uint64_t seed, double sigma = 0.02);

// One adapted weight matrix; the effective delta is up * down.
struct AdapterTarget {
    std::string name;  // "layer0.query", "head", ...
    Matrix down;       // rank x in   (A)
    Matrix up;         // out x rank  (B)
};

struct AdapterSet {
    std::vector<AdapterTarget> targets;  // canonical order
    std::string owner = "global";
    uint32_t round_index = 0;
};

struct GradientSet {
    struct Entry {
        Matrix down, up;
    };
    std::vector<Entry> entries;  // congruent with AdapterSet::targets
};

// A from N(0, 0.02^2), B zero: a fresh adapter is a functional no-op.
AdapterSet init_adapter(const ModelConfig& config, uint64_t seed);

GradientSet zero_gradients(const AdapterSet& like);
AdapterSet zero_like(const AdapterSet& a);
void adapter_axpy(AdapterSet& dst, double alpha, const AdapterSet& src);
void adapter_scale(AdapterSet& a, double alpha);
double adapter_max_abs_diff(const AdapterSet& a, const AdapterSet& b);
bool adapter_all_finite(const AdapterSet& a);
bool gradients_all_finite(const GradientSet& g);
void gradient_axpy(GradientSet& dst, double alpha, const GradientSet& src);
void gradient_scale(GradientSet& g, double alpha);
size_t adapter_param_count(const AdapterSet& a);

// Per-position next-token log-probability table (len x vocab). Row i is the
// distribution of token i+1 given tokens 0..i; each row logsumexps to 0.
Matrix forward_logprobs(const BaseWeights& base, const AdapterSet& adapter,
                        const TokenSequence& seq);

// Returns base with every adapter target replaced by W + up*down.
BaseWeights merge_adapter(const BaseWeights& base, const AdapterSet& adapter);

struct LossResult {
    double loss = 0.0;
    GradientSet grads;
    size_t token_count = 0;
};

// Mean next-token NLL over all predicted positions (targets that are PAD are
// skipped); gradient over adapter factors only.
LossResult nll_loss_and_grad(const BaseWeights& base, const AdapterSet& adapter,
                             const std::vector<TokenSequence>& batch);

// Sum of log p(seq[t] | seq[0..t)) for t in [target_begin, len).
double sequence_logprob(const BaseWeights& base, const AdapterSet& adapter,
                        const TokenSequence& seq, size_t target_begin);
// Same, and accumulates coeff * d(logprob)/d(adapter) into grads.
double sequence_logprob_grad(const BaseWeights& base, const AdapterSet& adapter,
                             const TokenSequence& seq, size_t target_begin, double coeff,
                             GradientSet& grads);

// Batch of (sequence, first predicted index) items; mean NLL over the
// selected targets. Used for response-conditioned training.
struct ConditionedItem {
    TokenSequence seq;
    size_t target_begin = 1;
};
LossResult nll_conditioned(const BaseWeights& base, const AdapterSet& adapter,
                           const std::vector<ConditionedItem>& batch);

struct UpdateParams {
    enum class Mode { sgd, adamw };
    Mode mode = Mode::sgd;
    double lr = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct OptimizerState {
    uint64_t step = 0;
    std::vector<GradientSet::Entry> m;  // first moments (adamw only)
    std::vector<GradientSet::Entry> v;  // second moments
};

// Pure-functional update. SGD: theta <- theta - lr * (g + correction);
// the optional correction is how SCAFFOLD injects c - c_i.
std::pair<AdapterSet, OptimizerState> apply_update(const AdapterSet& adapter,
                                                   const GradientSet& grads,
                                                   const OptimizerState& state,
                                                   const UpdateParams& params,
                                                   const GradientSet* correction = nullptr);

// Autoregressive sampling. Returns only the generated tokens, including the
// EOS that stopped generation if one was produced. temperature 0 is argmax.
TokenSequence sample(const BaseWeights& base, const AdapterSet& adapter,
                     const TokenSequence& prompt, int max_new, double temperature,
                     uint64_t seed);

// Full-parameter pretraining on plain sequences; fills the W_P role that the
// paper-scale setup takes from a published checkpoint.
struct PretrainParams {
    int steps = 800;
    int batch_size = 16;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double init_sigma = 0.02;
};

BaseWeights pretrain_base(const ModelConfig& config, const std::vector<TokenSequence>& corpus,
                          const PretrainParams& params, uint64_t seed);

void validate_sequence(const BaseWeights& base, const TokenSequence& seq);
void validate_adapter(const BaseWeights& base, const AdapterSet& adapter);

}  // namespace fedrai::model
