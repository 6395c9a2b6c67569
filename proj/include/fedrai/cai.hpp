#pragma once

// Constitutional-AI stage: three-turn collection of red / self-critical /
// self-revised responses, preference-pair construction, and per-round
// SFT + DPO training of the global adapter under a fixed iteration budget.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fedrai/model.hpp"
#include "fedrai/synth.hpp"

namespace fedrai::cai {

using model::AdapterSet;
using model::BaseWeights;
using model::GradientSet;
using model::TokenSequence;

struct RedTeamRecord {
    TokenSequence red_prompt;
    TokenSequence red_response;
    TokenSequence critique;
    TokenSequence revised_response;
};

struct PreferencePair {
    TokenSequence prompt;
    TokenSequence chosen;    // the self-revised response
    TokenSequence rejected;  // the red response
};

// Conversation builder for the critique/revision turns. Items are literal
// token ids or placeholders filled per record.
struct CaiTemplates {
    enum class Slot { token, red_prompt, red_response, critique };
    struct Item {
        Slot slot = Slot::token;
        int token = 0;
    };
    std::vector<Item> critique_turn;
    std::vector<Item> revision_turn;
};

CaiTemplates default_templates(const synth::Grammar& g);
// Plain-text file, one line per turn:
//   critique: {red_prompt} SEP {red_response} SEP CRITIQUE SEP
//   revision: {red_prompt} SEP {red_response} SEP {critique} SEP REVISE SEP
CaiTemplates load_templates(const std::string& path, const synth::Grammar& g);
void write_default_templates(const std::string& path, const synth::Grammar& g);

TokenSequence instantiate_turn(const std::vector<CaiTemplates::Item>& turn,
                               const TokenSequence& red_prompt,
                               const TokenSequence& red_response,
                               const TokenSequence* critique);

struct Responder {
    virtual ~Responder() = default;
    virtual TokenSequence respond(const TokenSequence& conversation) = 0;
};

// Deterministic grammar-driven responder: emits a grammar red response in
// turn 1, lists the toxic markers it finds in turn 2, and revises by
// replacing every toxic marker with the primary refusal token in turn 3.
class ScriptedResponder : public Responder {
public:
    ScriptedResponder(synth::Grammar grammar, synth::FillerRange fillers, uint64_t seed);
    TokenSequence respond(const TokenSequence& conversation) override;

private:
    synth::Grammar grammar_;
    synth::FillerRange fillers_;
    uint64_t seed_;
};

// Samples every turn from the model. Per-call seeds are a pure function of
// (seed, conversation) so records replay exactly.
class ModelResponder : public Responder {
public:
    ModelResponder(const BaseWeights& base, const AdapterSet& adapter, int max_new,
                   double temperature, uint64_t seed);
    TokenSequence respond(const TokenSequence& conversation) override;
    static uint64_t call_seed(uint64_t seed, const TokenSequence& conversation);

private:
    const BaseWeights& base_;
    const AdapterSet& adapter_;
    int max_new_;
    double temperature_;
    uint64_t seed_;
};

RedTeamRecord generate_cai_record(Responder& responder, const TokenSequence& red_prompt,
                                  const CaiTemplates& templates);

// One pair per record; records whose revised response equals the red
// response are dropped and counted.
std::pair<std::vector<PreferencePair>, size_t> build_preference_dataset(
    const std::vector<RedTeamRecord>& records);

struct CaiConfig {
    double beta = 0.1;
    int iterations_per_round = 50;
    double sft_fraction = 0.5;
    double lr = 0.05;
    int batch_size = 16;
    enum class Mode { cost_efficient, full_epoch };
    Mode mode = Mode::cost_efficient;

    void validate() const;
};

// -log sigmoid(beta * [(lp_w - lp_ref_w) - (lp_l - lp_ref_l)])
double dpo_loss_from_logps(double lp_w, double lp_ref_w, double lp_l, double lp_ref_l,
                           double beta);

struct DpoResult {
    double loss = 0.0;
    GradientSet grads;
};

// Gradient over the policy adapter only; the reference contributes
// constants. Sequence log-probs sum response tokens conditioned on prompt.
DpoResult dpo_loss_and_grad(const AdapterSet& policy, const AdapterSet& reference,
                            const BaseWeights& base, const PreferencePair& pair, double beta);

struct CaiStage {
    CaiConfig config;
    std::vector<RedTeamRecord> records;
    std::vector<PreferencePair> pairs;
    size_t dropped_records = 0;
    AdapterSet reference;  // snapshot taken at stage entry each round
};

CaiStage build_stage(const CaiConfig& config, std::vector<RedTeamRecord> records);

// Planned per-stage step counts for a dataset size: {sft_steps, dpo_steps}.
std::pair<int, int> plan_steps(const CaiConfig& config, size_t dataset_size);

struct CaiStats {
    int sft_steps = 0;
    int dpo_steps = 0;
    double mean_sft_loss = 0.0;
    double mean_dpo_loss = 0.0;
    bool skipped = false;
};

// Runs the SFT stage then the DPO stage on the global adapter and returns
// the updated adapter; stage.reference is re-snapshotted at entry.
CaiStats run_cai_stage(AdapterSet& global, const BaseWeights& base, CaiStage& stage,
                       uint32_t round_index, uint64_t seed);

// Persistence (JSON Lines).
void write_records(const std::string& path, const std::vector<RedTeamRecord>& records);
std::vector<RedTeamRecord> read_records(const std::string& path);
void write_pairs(const std::string& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_pairs(const std::string& path);

}  // namespace fedrai::cai
