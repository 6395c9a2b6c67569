#pragma once

// Federated round engine: distribute the global adapter, run local client
// training (optionally gated by the safety filter), aggregate via FedAvg or
// SCAFFOLD, then optionally run the CAI stage on the fresh global adapter.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedrai/cai.hpp"
#include "fedrai/filter.hpp"
#include "fedrai/model.hpp"
#include "fedrai/synth.hpp"

namespace fedrai::fl {

using model::AdapterSet;
using model::BaseWeights;

enum class Method { fedavg, scaffold };
std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct RoundConfig {
    int num_clients = 20;
    int num_rounds = 50;
    int clients_per_round = 5;
    int local_iterations = 25;  // mini-batch steps per selected client
    int batch_size = 16;
    double local_lr = 0.1;
    double server_lr = 1.0;  // SCAFFOLD only
    Method method = Method::fedavg;
    uint64_t master_seed = 1;

    void validate() const;
};

struct ClientState {
    int id = 0;
    std::vector<synth::LabeledPair> dataset;
    std::optional<AdapterSet> control;  // c_i, SCAFFOLD only
    uint64_t seed = 0;
};

struct ClientRoundStats {
    int id = 0;
    size_t pre_filter = 0;
    size_t post_filter = 0;
    double mean_loss = 0.0;
    bool fully_filtered = false;
};

struct RoundEvalMetrics {
    double safety_rate = 0.0;
    double choice_accuracy = 0.0;
    double perplexity = 0.0;
};

struct RoundLog {
    uint32_t round = 0;
    std::vector<int> selected;
    std::vector<ClientRoundStats> clients;
    std::string method;
    int cai_steps = 0;
    int cai_sft_steps = 0;
    int cai_dpo_steps = 0;
    std::optional<RoundEvalMetrics> eval;
    std::vector<int> failed_clients;
};

// Stable-field-order JSON Lines record.
std::string round_log_to_json(const RoundLog& log);

struct ServerState {
    AdapterSet global;                // W_G
    std::optional<AdapterSet> control;  // c, SCAFFOLD only
    uint32_t round_index = 0;         // completed rounds
    std::vector<RoundLog> history;
};

std::vector<ClientState> make_clients(const std::vector<synth::LabeledPair>& fl_corpus,
                                      const synth::PartitionPlan& plan,
                                      const RoundConfig& config, const AdapterSet& shape);

ServerState make_server(const AdapterSet& initial, const RoundConfig& config);

// clients_per_round distinct ids, uniform without replacement, a pure
// function of (master_seed, round_index).
std::vector<int> sample_clients(uint32_t round_index, const RoundConfig& config);

struct LocalTrainResult {
    AdapterSet local;                      // W_L
    std::optional<AdapterSet> control;     // c_i^+, SCAFFOLD only
    ClientRoundStats stats;
};

// Runs local_iterations SGD steps of the LM loss on batches drawn from the
// (filtered) client dataset. With SCAFFOLD the step gradient is corrected by
// c - c_i and c_i^+ = c_i - c + (W_G - W_L) / (K * lr).
LocalTrainResult local_train(const ClientState& client, const AdapterSet& global,
                             const BaseWeights& base, const RoundConfig& config,
                             const filter::FilterModel* filt,
                             const AdapterSet* server_control, uint32_t round_index);

// c_i^+ = c_i - c + (global - local) / (K * lr)
AdapterSet scaffold_control_update(const AdapterSet& c_i, const AdapterSet& c,
                                   const AdapterSet& global, const AdapterSet& local,
                                   int local_iterations, double local_lr);

// Element-wise weighted mean of adapter factors; weights are retained
// sample counts. All-zero weights fall back to uniform with a warning.
AdapterSet aggregate_fedavg(const std::vector<std::pair<AdapterSet, double>>& locals);

struct ScaffoldLocal {
    int client_id = 0;
    AdapterSet local;        // W_L
    AdapterSet control_new;  // c_i^+
    AdapterSet control_old;  // c_i
};

// W_G += (server_lr/|S|) * sum(W_L - W_G); c += (|S|/N) * mean(c_i^+ - c_i).
void aggregate_scaffold(ServerState& server, const std::vector<ScaffoldLocal>& locals,
                        const RoundConfig& config);

using RoundEvalFn = std::function<RoundEvalMetrics(const AdapterSet&)>;

// One full round: sample -> local train -> aggregate -> CAI -> evaluate.
// Mutates server (and client control variates under SCAFFOLD); per-client
// failures are recorded and the round continues while at least one client
// succeeded.
RoundLog run_round(ServerState& server, std::vector<ClientState>& clients,
                   const BaseWeights& base, const RoundConfig& config,
                   const filter::FilterModel* filt, cai::CaiStage* cai_stage,
                   const RoundEvalFn& eval_fn = nullptr);

}  // namespace fedrai::fl
