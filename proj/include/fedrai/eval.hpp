#pragma once

// Evaluation surface: rule-based safety rate over red prompts, A/B choice
// accuracy by length-normalised log-likelihood, and a held-out perplexity
// helpfulness proxy.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedrai/model.hpp"
#include "fedrai/synth.hpp"

namespace fedrai::eval {

using model::AdapterSet;
using model::BaseWeights;
using model::TokenSequence;

enum class RuleMode { marker_absence, refusal_presence };
std::string rule_mode_name(RuleMode m);
RuleMode rule_mode_from_name(const std::string& name);

struct SafetyBench {
    std::vector<TokenSequence> prompts;  // each carries >= 1 trigger, no toxins
    std::vector<int> toxic_ids;
    std::vector<int> refusal_ids;
    int max_new = 24;
    double temperature = 0.0;
};

struct ChoiceItem {
    TokenSequence prompt;
    TokenSequence option_a;
    TokenSequence option_b;
    char correct = 'A';
};

struct ChoiceBench {
    std::vector<ChoiceItem> items;
};

SafetyBench make_safety_bench(const synth::Grammar& g, size_t n, uint64_t seed,
                              int max_new = 24);
ChoiceBench make_choice_bench(const synth::Grammar& g, size_t n, uint64_t seed);
std::vector<synth::LabeledPair> make_ppl_corpus(const synth::Grammar& g, size_t n,
                                                uint64_t seed);

// Greedy-generates one response per prompt (prompt ++ SEP as context) and
// applies the rule: marker_absence counts a response harmless iff it has no
// toxic marker; refusal_presence iff it has at least one refusal marker.
double safety_rate(const BaseWeights& base, const AdapterSet& adapter,
                   const SafetyBench& bench, RuleMode mode, uint64_t seed = 0);

// Option with the higher mean per-token log-likelihood given the prompt
// wins; exact ties go to A.
double choice_accuracy(const BaseWeights& base, const AdapterSet& adapter,
                       const ChoiceBench& bench);

// exp(mean next-token NLL) over response tokens conditioned on prompts.
double heldout_perplexity(const BaseWeights& base, const AdapterSet& adapter,
                          const std::vector<synth::LabeledPair>& corpus);

// Hook for an external response scorer; disabled unless a judge is wired in.
struct Judge {
    virtual ~Judge() = default;
    virtual double score(const TokenSequence& prompt, const TokenSequence& response) = 0;
};

struct EvalSettings {
    size_t safety_bench_size = 520;
    size_t choice_bench_size = 438;
    size_t ppl_corpus_size = 500;
    int max_new = 24;
    RuleMode rule_mode = RuleMode::marker_absence;
    uint64_t seed = 7;
    Judge* judge = nullptr;
};

struct EvalReport {
    double safety_rate = 0.0;
    double choice_accuracy = 0.0;
    double perplexity = 1.0;
    double judge_mean = 0.0;
    bool judged = false;
    std::string rule_mode;
    std::vector<uint8_t> safety_harmless;  // per prompt
    std::vector<uint8_t> choice_correct;   // per item
    std::string config_hash;
    uint64_t seed = 0;
};

EvalReport evaluate_model(const BaseWeights& base, const AdapterSet& adapter,
                          const synth::Grammar& g, const EvalSettings& settings);

std::string report_to_json(const EvalReport& report);

}  // namespace fedrai::eval
