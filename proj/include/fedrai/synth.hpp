#pragma once

// Synthetic token-grammar corpus. Harmfulness is marker-determined: a red
// response carries at least one TOXIC marker, an acceptable response carries
// at least one REFUSAL marker and no TOXIC markers, so every safety quantity
// downstream is exactly computable.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fedrai/model.hpp"

namespace fedrai::synth {

enum class SafetyLabel { safe, unsafe };

// Corpus atom: a red-teaming prompt with either a red or an acceptable
// response attached.
struct LabeledPair {
    model::TokenSequence prompt;
    model::TokenSequence response;
    SafetyLabel label = SafetyLabel::safe;
};

struct FillerRange {
    int lo = 0;
    int hi = 0;  // inclusive
};

struct Grammar {
    int vocab_size = 64;
    std::vector<std::string> token_names;  // id -> name
    std::map<std::string, int> vocab;      // name -> id

    std::vector<int> trigger_ids;  // red-prompt markers
    std::vector<int> toxic_ids;    // harm markers
    std::vector<int> refusal_ids;  // safe-response markers
    int critique_id = 0;
    int revise_id = 0;
    int ok_id = 0;
    FillerRange fillers;  // full filler span

    int prompt_len_min = 8, prompt_len_max = 16;
    int response_len_min = 8, response_len_max = 24;

    void validate() const;
};

// Standard layout: PAD EOS SEP CRITIQUE REVISE OK, 4 triggers, 2 toxic
// markers, 8 refusal markers, fillers for the rest. Throws ConfigError when
// vocab_size cannot host the templates.
Grammar default_grammar(int vocab_size = 64);

// Disjoint filler sub-ranges so the three corpus splits cannot share items.
FillerRange split_filler_range(const Grammar& g, int split_index, int num_splits = 3);

model::TokenSequence random_red_prompt(const Grammar& g, FillerRange fillers,
                                       std::mt19937_64& rng);
model::TokenSequence random_response(const Grammar& g, FillerRange fillers, bool toxic,
                                     std::mt19937_64& rng);

struct CorpusSpec {
    size_t fl_total = 20000;
    size_t filter_total = 20000;
    size_t cai_total = 2000;
    double harmful_fraction_fl = 0.30;
    double filter_balance = 0.50;  // unsafe share of the filter split
    uint64_t seed = 42;

    void validate() const;
};

struct CorpusBundle {
    std::vector<LabeledPair> fl;
    std::vector<LabeledPair> filter_train;
    std::vector<model::TokenSequence> cai_prompts;
};

CorpusBundle synth_corpus(const Grammar& g, const CorpusSpec& spec);

struct PartitionPlan {
    size_t num_clients = 20;
    size_t per_client = 1000;
    std::vector<std::vector<size_t>> client_indices;  // into the fl corpus
};

// Stratified assignment: each client receives exactly
// round(per_client * harmful_fraction) unsafe items, the rest safe.
PartitionPlan partition(const std::vector<LabeledPair>& fl_corpus, size_t num_clients,
                        size_t per_client, double harmful_fraction, uint64_t seed);

SafetyLabel ground_truth_label(const Grammar& g, const model::TokenSequence& response);

// ---------------------------------------------------------------------------
// Persistence: labeled pairs as JSON Lines, grammar manifest as JSON.
// ---------------------------------------------------------------------------

std::string label_name(SafetyLabel label);
SafetyLabel label_from_name(const std::string& name);

void write_labeled_pairs(const std::string& path, const std::vector<LabeledPair>& pairs);
std::vector<LabeledPair> read_labeled_pairs(const std::string& path);

void write_prompts(const std::string& path, const std::vector<model::TokenSequence>& prompts);
std::vector<model::TokenSequence> read_prompts(const std::string& path);

void write_grammar(const std::string& path, const Grammar& g);
Grammar read_grammar(const std::string& path);

}  // namespace fedrai::synth
