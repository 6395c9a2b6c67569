#include "fedrai/cai.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fedrai::cai {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

namespace {

CaiTemplates::Item token_item(int id) {
    return {CaiTemplates::Slot::token, id};
}

std::vector<CaiTemplates::Item> parse_turn(const std::string& text, const synth::Grammar& g,
                                           bool allow_critique, const std::string& where) {
    std::vector<CaiTemplates::Item> items;
    std::istringstream ss(text);
    std::string word;
    while (ss >> word) {
        if (word == "{red_prompt}") {
            items.push_back({CaiTemplates::Slot::red_prompt, 0});
        } else if (word == "{red_response}") {
            items.push_back({CaiTemplates::Slot::red_response, 0});
        } else if (word == "{critique}") {
            if (!allow_critique) {
                throw ConfigError(where + ": {critique} is only valid in the revision turn");
            }
            items.push_back({CaiTemplates::Slot::critique, 0});
        } else {
            auto it = g.vocab.find(word);
            if (it == g.vocab.end()) {
                throw ConfigError(where + ": unknown token name '" + word + "'");
            }
            items.push_back(token_item(it->second));
        }
    }
    if (items.empty()) {
        throw ConfigError(where + ": empty template");
    }
    return items;
}

}  // namespace

CaiTemplates default_templates(const synth::Grammar& g) {
    CaiTemplates t;
    const int sep = model::kSepToken;
    t.critique_turn = {{CaiTemplates::Slot::red_prompt, 0}, token_item(sep),
                       {CaiTemplates::Slot::red_response, 0}, token_item(sep),
                       token_item(g.critique_id), token_item(sep)};
    t.revision_turn = {{CaiTemplates::Slot::red_prompt, 0},  token_item(sep),
                       {CaiTemplates::Slot::red_response, 0}, token_item(sep),
                       {CaiTemplates::Slot::critique, 0},     token_item(sep),
                       token_item(g.revise_id),               token_item(sep)};
    return t;
}

CaiTemplates load_templates(const std::string& path, const synth::Grammar& g) {
    std::ifstream in(path);
    if (!in) {
        throw MissingInputError("cannot open template file: " + path);
    }
    CaiTemplates t;
    bool have_critique = false, have_revision = false;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const std::string where = path + ":" + std::to_string(lineno);
        auto colon = line.find(':');
        if (colon == std::string::npos) {
            throw ConfigError(where + ": expected '<turn>: <items>'");
        }
        const std::string name = line.substr(0, colon);
        const std::string rest = line.substr(colon + 1);
        if (name == "critique") {
            t.critique_turn = parse_turn(rest, g, false, where);
            have_critique = true;
        } else if (name == "revision") {
            t.revision_turn = parse_turn(rest, g, true, where);
            have_revision = true;
        } else {
            throw ConfigError(where + ": unknown turn '" + name + "'");
        }
    }
    if (!have_critique || !have_revision) {
        throw ConfigError(path + ": template file needs both critique and revision turns");
    }
    return t;
}

void write_default_templates(const std::string& path, const synth::Grammar& g) {
    (void)g;
    std::string text =
        "# Conversation templates for the self-critique and self-revision turns.\n"
        "# Items are grammar token names or the placeholders {red_prompt},\n"
        "# {red_response} and {critique}.\n"
        "critique: {red_prompt} SEP {red_response} SEP CRITIQUE SEP\n"
        "revision: {red_prompt} SEP {red_response} SEP {critique} SEP REVISE SEP\n";
    write_text_file_atomic(path, text);
}

TokenSequence instantiate_turn(const std::vector<CaiTemplates::Item>& turn,
                               const TokenSequence& red_prompt,
                               const TokenSequence& red_response,
                               const TokenSequence* critique) {
    TokenSequence out;
    for (const auto& item : turn) {
        switch (item.slot) {
            case CaiTemplates::Slot::token:
                out.ids.push_back(item.token);
                break;
            case CaiTemplates::Slot::red_prompt:
                out.ids.insert(out.ids.end(), red_prompt.ids.begin(), red_prompt.ids.end());
                break;
            case CaiTemplates::Slot::red_response:
                out.ids.insert(out.ids.end(), red_response.ids.begin(), red_response.ids.end());
                break;
            case CaiTemplates::Slot::critique:
                if (!critique) {
                    throw std::invalid_argument("critique placeholder without critique");
                }
                out.ids.insert(out.ids.end(), critique->ids.begin(), critique->ids.end());
                break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Responders
// ---------------------------------------------------------------------------

ScriptedResponder::ScriptedResponder(synth::Grammar grammar, synth::FillerRange fillers,
                                     uint64_t seed)
    : grammar_(std::move(grammar)), fillers_(fillers), seed_(seed) {}

TokenSequence ScriptedResponder::respond(const TokenSequence& conversation) {
    if (conversation.empty()) {
        throw std::invalid_argument("empty conversation");
    }
    bool wants_revision = false, wants_critique = false;
    for (int id : conversation.ids) {
        if (id == grammar_.revise_id) {
            wants_revision = true;
        } else if (id == grammar_.critique_id) {
            wants_critique = true;
        }
    }
    auto is_toxic = [&](int id) {
        return std::find(grammar_.toxic_ids.begin(), grammar_.toxic_ids.end(), id) !=
               grammar_.toxic_ids.end();
    };

    if (wants_revision) {
        // Revise the red response (the span between the first and second SEP)
        // by replacing every toxic marker with the primary refusal token.
        TokenSequence revised;
        int seps_seen = 0;
        for (int id : conversation.ids) {
            if (id == model::kSepToken) {
                ++seps_seen;
                continue;
            }
            if (seps_seen == 1) {
                revised.ids.push_back(is_toxic(id) ? grammar_.refusal_ids.front() : id);
            }
        }
        if (revised.empty()) {
            throw GenerationError("revision turn carried no red response");
        }
        return revised;
    }
    if (wants_critique) {
        // Name the toxic markers present, in order of first occurrence.
        TokenSequence critique;
        for (int id : conversation.ids) {
            if (is_toxic(id) &&
                std::find(critique.ids.begin(), critique.ids.end(), id) == critique.ids.end()) {
                critique.ids.push_back(id);
            }
        }
        if (critique.empty()) {
            critique.ids.push_back(grammar_.ok_id);
        }
        return critique;
    }
    // Turn 1: produce a red response, deterministic per conversation.
    std::string key;
    key.reserve(conversation.size() * 3);
    for (int id : conversation.ids) {
        key += std::to_string(id);
        key += ',';
    }
    std::mt19937_64 rng(mix64(derive_seed(seed_, "scripted-red", fnv1a(key))));
    return synth::random_response(grammar_, fillers_, /*toxic=*/true, rng);
}

ModelResponder::ModelResponder(const BaseWeights& base, const AdapterSet& adapter, int max_new,
                               double temperature, uint64_t seed)
    : base_(base), adapter_(adapter), max_new_(max_new), temperature_(temperature), seed_(seed) {}

uint64_t ModelResponder::call_seed(uint64_t seed, const TokenSequence& conversation) {
    std::string key;
    key.reserve(conversation.size() * 3);
    for (int id : conversation.ids) {
        key += std::to_string(id);
        key += ',';
    }
    return derive_seed(seed, "model-responder", fnv1a(key));
}

TokenSequence ModelResponder::respond(const TokenSequence& conversation) {
    TokenSequence out = model::sample(base_, adapter_, conversation, max_new_, temperature_,
                                      call_seed(seed_, conversation));
    if (!out.empty() && out.ids.back() == model::kEosToken) {
        out.ids.pop_back();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Record collection and preference pairs
// ---------------------------------------------------------------------------

RedTeamRecord generate_cai_record(Responder& responder, const TokenSequence& red_prompt,
                                  const CaiTemplates& templates) {
    if (red_prompt.empty()) {
        throw std::invalid_argument("empty red prompt");
    }
    RedTeamRecord rec;
    rec.red_prompt = red_prompt;

    // Turn 1: the red prompt elicits a red response.
    TokenSequence turn1 = red_prompt;
    turn1.ids.push_back(model::kSepToken);
    rec.red_response = responder.respond(turn1);
    if (rec.red_response.empty()) {
        throw GenerationError("responder returned an empty red response");
    }

    // Turn 2: self-critique over the turn-1 conversation.
    TokenSequence turn2 =
        instantiate_turn(templates.critique_turn, rec.red_prompt, rec.red_response, nullptr);
    rec.critique = responder.respond(turn2);
    if (rec.critique.empty()) {
        throw GenerationError("responder returned an empty critique");
    }

    // Turn 3: self-revision with both prior turns in context.
    TokenSequence turn3 = instantiate_turn(templates.revision_turn, rec.red_prompt,
                                           rec.red_response, &rec.critique);
    rec.revised_response = responder.respond(turn3);
    if (rec.revised_response.empty()) {
        throw GenerationError("responder returned an empty revised response");
    }
    return rec;
}

std::pair<std::vector<PreferencePair>, size_t> build_preference_dataset(
    const std::vector<RedTeamRecord>& records) {
    std::vector<PreferencePair> pairs;
    pairs.reserve(records.size());
    size_t dropped = 0;
    for (const auto& rec : records) {
        if (rec.revised_response == rec.red_response) {
            ++dropped;
            continue;
        }
        pairs.push_back({rec.red_prompt, rec.revised_response, rec.red_response});
    }
    return {std::move(pairs), dropped};
}

// ---------------------------------------------------------------------------
// DPO
// ---------------------------------------------------------------------------

void CaiConfig::validate() const {
    if (beta <= 0.0) {
        throw ConfigError("cai beta must be > 0");
    }
    if (mode == Mode::cost_efficient && iterations_per_round < 1) {
        throw ConfigError("cai iterations_per_round must be >= 1 in cost_efficient mode");
    }
    if (sft_fraction < 0.0 || sft_fraction > 1.0) {
        throw ConfigError("cai sft_fraction must lie in [0,1]");
    }
    if (batch_size < 1) {
        throw ConfigError("cai batch_size must be >= 1");
    }
}

double dpo_loss_from_logps(double lp_w, double lp_ref_w, double lp_l, double lp_ref_l,
                           double beta) {
    const double margin = beta * ((lp_w - lp_ref_w) - (lp_l - lp_ref_l));
    // -log sigmoid(m) = softplus(-m)
    return std::max(-margin, 0.0) + std::log1p(std::exp(-std::fabs(margin)));
}

DpoResult dpo_loss_and_grad(const AdapterSet& policy, const AdapterSet& reference,
                            const BaseWeights& base, const PreferencePair& pair, double beta) {
    if (pair.chosen == pair.rejected) {
        throw std::invalid_argument("preference pair must have distinct responses");
    }
    const TokenSequence seq_w = model::join_prompt_response(pair.prompt, pair.chosen, false);
    const TokenSequence seq_l = model::join_prompt_response(pair.prompt, pair.rejected, false);
    const size_t begin = model::response_begin(pair.prompt);

    const double lp_w = model::sequence_logprob(base, policy, seq_w, begin);
    const double lp_l = model::sequence_logprob(base, policy, seq_l, begin);
    const double lp_ref_w = model::sequence_logprob(base, reference, seq_w, begin);
    const double lp_ref_l = model::sequence_logprob(base, reference, seq_l, begin);

    const double margin = beta * ((lp_w - lp_ref_w) - (lp_l - lp_ref_l));
    if (!std::isfinite(margin)) {
        throw NumericError("non-finite DPO margin");
    }
    const double sig = 1.0 / (1.0 + std::exp(-margin));

    DpoResult res;
    res.loss = dpo_loss_from_logps(lp_w, lp_ref_w, lp_l, lp_ref_l, beta);
    res.grads = model::zero_gradients(policy);
    // dL/dlp_w = beta (sigma(m) - 1); dL/dlp_l = -beta (sigma(m) - 1)
    const double coeff_w = beta * (sig - 1.0);
    model::sequence_logprob_grad(base, policy, seq_w, begin, coeff_w, res.grads);
    model::sequence_logprob_grad(base, policy, seq_l, begin, -coeff_w, res.grads);
    if (!model::gradients_all_finite(res.grads)) {
        throw NumericError("non-finite DPO gradient");
    }
    return res;
}

// ---------------------------------------------------------------------------
// Stage
// ---------------------------------------------------------------------------

CaiStage build_stage(const CaiConfig& config, std::vector<RedTeamRecord> records) {
    config.validate();
    CaiStage stage;
    stage.config = config;
    stage.records = std::move(records);
    auto [pairs, dropped] = build_preference_dataset(stage.records);
    stage.pairs = std::move(pairs);
    stage.dropped_records = dropped;
    return stage;
}

std::pair<int, int> plan_steps(const CaiConfig& config, size_t dataset_size) {
    if (config.mode == CaiConfig::Mode::cost_efficient) {
        const int n = config.iterations_per_round;
        const int sft = static_cast<int>(
            std::ceil(config.sft_fraction * static_cast<double>(n)));
        return {sft, n - sft};
    }
    const int per_stage = static_cast<int>(
        (dataset_size + static_cast<size_t>(config.batch_size) - 1) /
        static_cast<size_t>(config.batch_size));
    return {per_stage, per_stage};
}

namespace {

// Replacement-free shuffled batch cursor, reshuffling per epoch.
class BatchCursor {
public:
    BatchCursor(size_t n, std::mt19937_64& rng) : rng_(rng), order_(n) {
        for (size_t i = 0; i < n; ++i) {
            order_[i] = i;
        }
        std::shuffle(order_.begin(), order_.end(), rng_);
    }

    std::vector<size_t> next(size_t batch) {
        const size_t take = std::min(batch, order_.size());
        if (cursor_ + take > order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            cursor_ = 0;
        }
        std::vector<size_t> out(order_.begin() + static_cast<long>(cursor_),
                                order_.begin() + static_cast<long>(cursor_ + take));
        cursor_ += take;
        return out;
    }

private:
    std::mt19937_64& rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

}  // namespace

CaiStats run_cai_stage(AdapterSet& global, const BaseWeights& base, CaiStage& stage,
                       uint32_t round_index, uint64_t seed) {
    stage.config.validate();
    CaiStats stats;
    if (stage.pairs.empty()) {
        stats.skipped = true;
        return stats;
    }
    // The DPO anchor is the global adapter as it entered this round's stage.
    stage.reference = global;
    stage.reference.owner = "cai-reference";

    const auto [sft_steps, dpo_steps] = plan_steps(stage.config, stage.pairs.size());
    const size_t batch = static_cast<size_t>(stage.config.batch_size);
    model::UpdateParams sgd;
    sgd.mode = model::UpdateParams::Mode::sgd;
    sgd.lr = stage.config.lr;
    model::OptimizerState opt_state;

    std::mt19937_64 rng(mix64(derive_seed(seed, "cai-stage", round_index)));
    BatchCursor sft_cursor(stage.pairs.size(), rng);
    double sft_loss_sum = 0.0;
    for (int step = 0; step < sft_steps; ++step) {
        const std::vector<size_t> idx = sft_cursor.next(batch);
        std::vector<model::ConditionedItem> items;
        items.reserve(idx.size());
        for (size_t i : idx) {
            const PreferencePair& p = stage.pairs[i];
            items.push_back({model::join_prompt_response(p.prompt, p.chosen, true),
                             model::response_begin(p.prompt)});
        }
        model::LossResult res = model::nll_conditioned(base, global, items);
        auto [next, st] = model::apply_update(global, res.grads, opt_state, sgd);
        global = std::move(next);
        opt_state = std::move(st);
        sft_loss_sum += res.loss;
        ++stats.sft_steps;
    }

    BatchCursor dpo_cursor(stage.pairs.size(), rng);
    double dpo_loss_sum = 0.0;
    for (int step = 0; step < dpo_steps; ++step) {
        const std::vector<size_t> idx = dpo_cursor.next(batch);
        std::vector<double> losses(idx.size(), 0.0);
        std::vector<GradientSet> grads(idx.size());
        parallel_for(idx.size(), [&, this_global = &global](size_t k) {
            DpoResult r = dpo_loss_and_grad(*this_global, stage.reference, base,
                                            stage.pairs[idx[k]], stage.config.beta);
            losses[k] = r.loss;
            grads[k] = std::move(r.grads);
        });
        GradientSet mean = model::zero_gradients(global);
        double loss = 0.0;
        const double inv = 1.0 / static_cast<double>(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) {
            model::gradient_axpy(mean, inv, grads[k]);
            loss += losses[k] * inv;
        }
        auto [next, st] = model::apply_update(global, mean, opt_state, sgd);
        global = std::move(next);
        opt_state = std::move(st);
        dpo_loss_sum += loss;
        ++stats.dpo_steps;
    }

    stats.mean_sft_loss = stats.sft_steps > 0 ? sft_loss_sum / stats.sft_steps : 0.0;
    stats.mean_dpo_loss = stats.dpo_steps > 0 ? dpo_loss_sum / stats.dpo_steps : 0.0;
    return stats;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void write_records(const std::string& path, const std::vector<RedTeamRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        ordered_json j;
        j["red_prompt"] = r.red_prompt.ids;
        j["red_response"] = r.red_response.ids;
        j["critique"] = r.critique.ids;
        j["revised_response"] = r.revised_response.ids;
        out += j.dump();
        out += '\n';
    }
    write_text_file_atomic(path, out);
}

std::vector<RedTeamRecord> read_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingInputError("cannot open CAI records: " + path);
    }
    std::vector<RedTeamRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        ordered_json j = ordered_json::parse(line);
        RedTeamRecord r;
        r.red_prompt.ids = j.at("red_prompt").get<std::vector<int>>();
        r.red_response.ids = j.at("red_response").get<std::vector<int>>();
        r.critique.ids = j.at("critique").get<std::vector<int>>();
        r.revised_response.ids = j.at("revised_response").get<std::vector<int>>();
        records.push_back(std::move(r));
    }
    return records;
}

void write_pairs(const std::string& path, const std::vector<PreferencePair>& pairs) {
    std::string out;
    for (const auto& p : pairs) {
        ordered_json j;
        j["prompt"] = p.prompt.ids;
        j["chosen"] = p.chosen.ids;
        j["rejected"] = p.rejected.ids;
        out += j.dump();
        out += '\n';
    }
    write_text_file_atomic(path, out);
}

std::vector<PreferencePair> read_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingInputError("cannot open preference pairs: " + path);
    }
    std::vector<PreferencePair> pairs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        ordered_json j = ordered_json::parse(line);
        PreferencePair p;
        p.prompt.ids = j.at("prompt").get<std::vector<int>>();
        p.chosen.ids = j.at("chosen").get<std::vector<int>>();
        p.rejected.ids = j.at("rejected").get<std::vector<int>>();
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace fedrai::cai
