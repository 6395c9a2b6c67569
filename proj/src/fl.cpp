#include "fedrai/fl.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>

#include "json.hpp"

namespace fedrai::fl {

using nlohmann::ordered_json;

std::string method_name(Method m) {
    return m == Method::fedavg ? "fedavg" : "scaffold";
}

Method method_from_name(const std::string& name) {
    if (name == "fedavg") {
        return Method::fedavg;
    }
    if (name == "scaffold") {
        return Method::scaffold;
    }
    throw ConfigError("unknown FL method '" + name + "' (expected fedavg or scaffold)");
}

void RoundConfig::validate() const {
    if (num_clients < 1 || num_rounds < 1 || clients_per_round < 1 || batch_size < 1) {
        throw ConfigError("round config counts must be >= 1");
    }
    if (local_iterations < 0) {
        throw ConfigError("local_iterations must be >= 0");
    }
    if (clients_per_round > num_clients) {
        throw ConfigError("clients_per_round must be <= num_clients");
    }
    if (local_lr <= 0.0 || server_lr <= 0.0) {
        throw ConfigError("learning rates must be > 0");
    }
}

std::vector<ClientState> make_clients(const std::vector<synth::LabeledPair>& fl_corpus,
                                      const synth::PartitionPlan& plan,
                                      const RoundConfig& config, const AdapterSet& shape) {
    config.validate();
    if (plan.client_indices.size() != static_cast<size_t>(config.num_clients)) {
        throw ConfigError("partition plan does not cover num_clients");
    }
    std::vector<ClientState> clients;
    clients.reserve(plan.client_indices.size());
    for (size_t c = 0; c < plan.client_indices.size(); ++c) {
        ClientState st;
        st.id = static_cast<int>(c);
        st.dataset.reserve(plan.client_indices[c].size());
        for (size_t idx : plan.client_indices[c]) {
            st.dataset.push_back(fl_corpus[idx]);
        }
        if (st.dataset.empty()) {
            throw ConfigError("client dataset is empty");
        }
        st.seed = derive_seed(config.master_seed, "client", c);
        if (config.method == Method::scaffold) {
            AdapterSet zero = model::zero_like(shape);
            zero.owner = "client:" + std::to_string(c);
            st.control = std::move(zero);
        }
        clients.push_back(std::move(st));
    }
    return clients;
}

ServerState make_server(const AdapterSet& initial, const RoundConfig& config) {
    ServerState s;
    s.global = initial;
    s.global.owner = "global";
    s.round_index = 0;
    if (config.method == Method::scaffold) {
        AdapterSet zero = model::zero_like(initial);
        zero.owner = "server-control";
        s.control = std::move(zero);
    }
    return s;
}

std::vector<int> sample_clients(uint32_t round_index, const RoundConfig& config) {
    config.validate();
    std::mt19937_64 rng(mix64(derive_seed(config.master_seed, "select", round_index)));
    std::vector<int> ids(static_cast<size_t>(config.num_clients));
    for (int i = 0; i < config.num_clients; ++i) {
        ids[static_cast<size_t>(i)] = i;
    }
    // partial Fisher-Yates: the first clients_per_round entries are a
    // uniform draw without replacement
    for (int i = 0; i < config.clients_per_round; ++i) {
        std::uniform_int_distribution<int> d(i, config.num_clients - 1);
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(d(rng))]);
    }
    ids.resize(static_cast<size_t>(config.clients_per_round));
    return ids;
}

AdapterSet scaffold_control_update(const AdapterSet& c_i, const AdapterSet& c,
                                   const AdapterSet& global, const AdapterSet& local,
                                   int local_iterations, double local_lr) {
    AdapterSet next = c_i;
    model::adapter_axpy(next, -1.0, c);
    if (local_iterations > 0) {
        const double scale = 1.0 / (static_cast<double>(local_iterations) * local_lr);
        model::adapter_axpy(next, scale, global);
        model::adapter_axpy(next, -scale, local);
    }
    return next;
}

LocalTrainResult local_train(const ClientState& client, const AdapterSet& global,
                             const BaseWeights& base, const RoundConfig& config,
                             const filter::FilterModel* filt,
                             const AdapterSet* server_control, uint32_t round_index) {
    config.validate();
    if (client.dataset.empty()) {
        throw std::invalid_argument("client dataset is empty");
    }
    if (config.method == Method::scaffold && (!client.control || !server_control)) {
        throw ConfigError("scaffold requires client and server control variates");
    }

    LocalTrainResult res;
    res.stats.id = client.id;
    res.stats.pre_filter = client.dataset.size();

    const std::vector<synth::LabeledPair>* data = &client.dataset;
    std::vector<synth::LabeledPair> retained;
    if (filt) {
        auto [kept, removed] = filter::filter_dataset(*filt, client.dataset);
        (void)removed;
        retained = std::move(kept);
        data = &retained;
    }
    res.stats.post_filter = data->size();

    if (data->empty()) {
        // the filter removed everything: contribute a zero delta, keep c_i
        res.stats.fully_filtered = true;
        res.local = global;
        res.local.owner = "client:" + std::to_string(client.id);
        if (config.method == Method::scaffold) {
            res.control = *client.control;
        }
        return res;
    }

    AdapterSet local = global;
    local.owner = "client:" + std::to_string(client.id);

    // SCAFFOLD correction c - c_i enters every SGD step as an additive term.
    std::optional<model::GradientSet> correction;
    if (config.method == Method::scaffold) {
        model::GradientSet corr = model::zero_gradients(global);
        for (size_t e = 0; e < corr.entries.size(); ++e) {
            const auto& c = server_control->targets[e];
            const auto& ci = client.control->targets[e];
            for (size_t i = 0; i < corr.entries[e].down.size(); ++i) {
                corr.entries[e].down.data[i] = c.down.data[i] - ci.down.data[i];
            }
            for (size_t i = 0; i < corr.entries[e].up.size(); ++i) {
                corr.entries[e].up.data[i] = c.up.data[i] - ci.up.data[i];
            }
        }
        correction = std::move(corr);
    }

    std::mt19937_64 rng(
        mix64(derive_seed(config.master_seed, "local", static_cast<uint64_t>(client.id),
                          round_index)));
    std::vector<size_t> order(data->size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::shuffle(order.begin(), order.end(), rng);
    size_t cursor = 0;

    model::UpdateParams sgd;
    sgd.mode = model::UpdateParams::Mode::sgd;
    sgd.lr = config.local_lr;
    model::OptimizerState opt_state;

    double loss_sum = 0.0;
    const size_t batch_size = static_cast<size_t>(config.batch_size);
    for (int step = 0; step < config.local_iterations; ++step) {
        const size_t take = std::min(batch_size, order.size());
        if (cursor + take > order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        std::vector<model::TokenSequence> batch;
        batch.reserve(take);
        for (size_t i = 0; i < take; ++i) {
            const synth::LabeledPair& p = (*data)[order[cursor + i]];
            batch.push_back(model::join_prompt_response(p.prompt, p.response, true));
        }
        cursor += take;

        model::LossResult res = model::nll_loss_and_grad(base, local, batch);
        auto [next, st] = model::apply_update(local, res.grads, opt_state, sgd,
                                              correction ? &*correction : nullptr);
        local = std::move(next);
        opt_state = std::move(st);
        loss_sum += res.loss;
    }
    res.stats.mean_loss =
        config.local_iterations > 0 ? loss_sum / config.local_iterations : 0.0;

    if (config.method == Method::scaffold) {
        res.control = scaffold_control_update(*client.control, *server_control, global, local,
                                              config.local_iterations, config.local_lr);
    }
    res.local = std::move(local);
    return res;
}

AdapterSet aggregate_fedavg(const std::vector<std::pair<AdapterSet, double>>& locals) {
    if (locals.empty()) {
        throw std::invalid_argument("aggregate_fedavg needs at least one adapter");
    }
    double total = 0.0;
    for (const auto& [adapter, weight] : locals) {
        if (weight < 0.0) {
            throw std::invalid_argument("negative aggregation weight");
        }
        total += weight;
    }
    std::vector<double> weights(locals.size());
    if (total <= 0.0) {
        std::cerr << "[fedrai] warning: all aggregation weights are zero, "
                     "falling back to uniform\n";
        std::fill(weights.begin(), weights.end(), 1.0 / static_cast<double>(locals.size()));
    } else {
        for (size_t i = 0; i < locals.size(); ++i) {
            weights[i] = locals[i].second / total;
        }
    }
    AdapterSet out = model::zero_like(locals.front().first);
    out.owner = "global";
    for (size_t i = 0; i < locals.size(); ++i) {
        model::adapter_axpy(out, weights[i], locals[i].first);
    }
    return out;
}

void aggregate_scaffold(ServerState& server, const std::vector<ScaffoldLocal>& locals,
                        const RoundConfig& config) {
    if (locals.empty()) {
        throw std::invalid_argument("aggregate_scaffold needs at least one client");
    }
    if (!server.control) {
        throw ConfigError("server control variate missing");
    }
    const double inv_s = 1.0 / static_cast<double>(locals.size());
    // W_G + (server_lr/|S|) * sum(W_L - W_G)  ==  (1 - server_lr) W_G
    //                                             + (server_lr/|S|) sum W_L
    model::adapter_scale(server.global, 1.0 - config.server_lr);
    for (const auto& l : locals) {
        model::adapter_axpy(server.global, config.server_lr * inv_s, l.local);
    }
    // c <- c + (|S|/N) * mean(c_i^+ - c_i)
    const double inv_n = 1.0 / static_cast<double>(config.num_clients);
    for (const auto& l : locals) {
        model::adapter_axpy(*server.control, inv_n, l.control_new);
        model::adapter_axpy(*server.control, -inv_n, l.control_old);
    }
}

RoundLog run_round(ServerState& server, std::vector<ClientState>& clients,
                   const BaseWeights& base, const RoundConfig& config,
                   const filter::FilterModel* filt, cai::CaiStage* cai_stage,
                   const RoundEvalFn& eval_fn) {
    config.validate();
    if (clients.size() != static_cast<size_t>(config.num_clients)) {
        throw ConfigError("client list does not match num_clients");
    }
    const uint32_t round = server.round_index;
    RoundLog log;
    log.round = round;
    log.method = method_name(config.method);
    log.selected = sample_clients(round, config);

    std::vector<LocalTrainResult> results;
    results.reserve(log.selected.size());
    std::vector<int> ok_ids;
    for (int id : log.selected) {
        ClientState& client = clients[static_cast<size_t>(id)];
        try {
            results.push_back(local_train(client, server.global, base, config, filt,
                                          server.control ? &*server.control : nullptr, round));
            ok_ids.push_back(id);
            log.clients.push_back(results.back().stats);
        } catch (const std::exception& e) {
            std::cerr << "[fedrai] client " << id << " failed in round " << round << ": "
                      << e.what() << "\n";
            log.failed_clients.push_back(id);
        }
    }
    if (results.empty()) {
        throw TrainingError("all selected clients failed in round " + std::to_string(round));
    }

    if (config.method == Method::fedavg) {
        std::vector<std::pair<AdapterSet, double>> locals;
        locals.reserve(results.size());
        for (const auto& r : results) {
            locals.emplace_back(r.local, static_cast<double>(r.stats.post_filter));
        }
        server.global = aggregate_fedavg(locals);
    } else {
        std::vector<ScaffoldLocal> locals;
        locals.reserve(results.size());
        for (size_t k = 0; k < results.size(); ++k) {
            const int id = ok_ids[k];
            ScaffoldLocal sl;
            sl.client_id = id;
            sl.local = results[k].local;
            sl.control_new = *results[k].control;
            sl.control_old = *clients[static_cast<size_t>(id)].control;
            locals.push_back(std::move(sl));
        }
        aggregate_scaffold(server, locals, config);
        for (size_t k = 0; k < locals.size(); ++k) {
            clients[static_cast<size_t>(locals[k].client_id)].control = locals[k].control_new;
        }
    }
    server.global.owner = "global";
    server.global.round_index = round + 1;

    if (cai_stage) {
        cai::CaiStats stats = cai::run_cai_stage(server.global, base, *cai_stage, round,
                                                 config.master_seed);
        log.cai_sft_steps = stats.sft_steps;
        log.cai_dpo_steps = stats.dpo_steps;
        log.cai_steps = stats.sft_steps + stats.dpo_steps;
    }

    if (eval_fn) {
        log.eval = eval_fn(server.global);
    }

    server.round_index = round + 1;
    server.history.push_back(log);
    return log;
}

std::string round_log_to_json(const RoundLog& log) {
    ordered_json j;
    j["round"] = log.round;
    j["selected"] = log.selected;
    ordered_json clients = ordered_json::array();
    for (const auto& c : log.clients) {
        ordered_json cj;
        cj["id"] = c.id;
        cj["pre_filter"] = c.pre_filter;
        cj["post_filter"] = c.post_filter;
        cj["mean_loss"] = c.mean_loss;
        cj["fully_filtered"] = c.fully_filtered;
        clients.push_back(cj);
    }
    j["clients"] = clients;
    j["method"] = log.method;
    j["cai_steps"] = log.cai_steps;
    j["cai_sft_steps"] = log.cai_sft_steps;
    j["cai_dpo_steps"] = log.cai_dpo_steps;
    if (log.eval) {
        ordered_json ej;
        ej["safety_rate"] = log.eval->safety_rate;
        ej["choice_accuracy"] = log.eval->choice_accuracy;
        ej["perplexity"] = log.eval->perplexity;
        j["eval"] = ej;
    } else {
        j["eval"] = nullptr;
    }
    j["failed_clients"] = log.failed_clients;
    return j.dump();
}

}  // namespace fedrai::fl
