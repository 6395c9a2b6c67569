#include "fedrai/synth.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fedrai::synth {

using nlohmann::ordered_json;

void Grammar::validate() const {
    if (vocab_size < 24) {
        throw ConfigError("grammar vocab too small for templates (need >= 24 ids)");
    }
    if (trigger_ids.empty() || toxic_ids.empty() || refusal_ids.empty()) {
        throw ConfigError("grammar marker sets must be non-empty");
    }
    auto in_range = [&](int id) { return id >= 0 && id < vocab_size; };
    for (const auto& [name, id] : vocab) {
        if (!in_range(id)) {
            throw ConfigError("grammar token '" + name + "' out of vocab range");
        }
    }
    std::vector<int> all;
    all.insert(all.end(), trigger_ids.begin(), trigger_ids.end());
    all.insert(all.end(), toxic_ids.begin(), toxic_ids.end());
    all.insert(all.end(), refusal_ids.begin(), refusal_ids.end());
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
        throw ConfigError("grammar marker sets must be disjoint");
    }
    if (fillers.lo > fillers.hi || !in_range(fillers.lo) || !in_range(fillers.hi)) {
        throw ConfigError("grammar filler range invalid");
    }
    if (prompt_len_min < 1 || prompt_len_min > prompt_len_max || response_len_min < 1 ||
        response_len_min > response_len_max) {
        throw ConfigError("grammar length ranges invalid");
    }
}

Grammar default_grammar(int vocab_size) {
    if (vocab_size < 24) {
        throw ConfigError("grammar vocab too small for templates (need >= 24 ids)");
    }
    Grammar g;
    g.vocab_size = vocab_size;
    auto add = [&](const std::string& name) {
        int id = static_cast<int>(g.token_names.size());
        g.token_names.push_back(name);
        g.vocab[name] = id;
        return id;
    };
    add("PAD");   // model::kPadToken
    add("EOS");   // model::kEosToken
    add("SEP");   // model::kSepToken
    g.critique_id = add("CRITIQUE");
    g.revise_id = add("REVISE");
    g.ok_id = add("OK");
    for (char c : {'A', 'B', 'C', 'D'}) {
        g.trigger_ids.push_back(add(std::string("TRIG_") + c));
    }
    for (char c : {'A', 'B'}) {
        g.toxic_ids.push_back(add(std::string("TOX_") + c));
    }
    for (char c : {'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H'}) {
        g.refusal_ids.push_back(add(std::string("REF_") + c));
    }
    g.fillers.lo = static_cast<int>(g.token_names.size());
    g.fillers.hi = vocab_size - 1;
    for (int id = g.fillers.lo; id < vocab_size; ++id) {
        add("F" + std::to_string(id));
    }
    g.validate();
    return g;
}

FillerRange split_filler_range(const Grammar& g, int split_index, int num_splits) {
    if (split_index < 0 || split_index >= num_splits) {
        throw std::invalid_argument("bad split index");
    }
    const int total = g.fillers.hi - g.fillers.lo + 1;
    if (total < num_splits) {
        throw ConfigError("not enough filler tokens to keep splits disjoint");
    }
    const int width = total / num_splits;
    const int lo = g.fillers.lo + split_index * width;
    const int hi = (split_index == num_splits - 1) ? g.fillers.hi : lo + width - 1;
    return {lo, hi};
}

namespace {

int pick(const std::vector<int>& ids, std::mt19937_64& rng) {
    std::uniform_int_distribution<size_t> d(0, ids.size() - 1);
    return ids[d(rng)];
}

int pick_filler(FillerRange r, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> d(r.lo, r.hi);
    return d(rng);
}

}  // namespace

model::TokenSequence random_red_prompt(const Grammar& g, FillerRange fillers,
                                       std::mt19937_64& rng) {
    std::uniform_int_distribution<int> len_d(g.prompt_len_min, g.prompt_len_max);
    const int len = len_d(rng);
    model::TokenSequence seq;
    seq.ids.resize(static_cast<size_t>(len));
    for (auto& id : seq.ids) {
        id = pick_filler(fillers, rng);
    }
    std::uniform_int_distribution<int> ntrig_d(1, 2);
    const int ntrig = std::min(ntrig_d(rng), len);
    std::uniform_int_distribution<int> pos_d(0, len - 1);
    int placed = 0;
    while (placed < ntrig) {
        int pos = pos_d(rng);
        bool already = false;
        for (int t : g.trigger_ids) {
            if (seq.ids[static_cast<size_t>(pos)] == t) {
                already = true;
            }
        }
        if (!already) {
            seq.ids[static_cast<size_t>(pos)] = pick(g.trigger_ids, rng);
            ++placed;
        }
    }
    return seq;
}

model::TokenSequence random_response(const Grammar& g, FillerRange fillers, bool toxic,
                                     std::mt19937_64& rng) {
    std::uniform_int_distribution<int> len_d(g.response_len_min, g.response_len_max);
    const int len = len_d(rng);
    model::TokenSequence seq;
    seq.ids.resize(static_cast<size_t>(len));
    for (auto& id : seq.ids) {
        id = pick_filler(fillers, rng);
    }
    const std::vector<int>& markers = toxic ? g.toxic_ids : g.refusal_ids;
    // responses open with their marker, with up to two more sprinkled in
    seq.ids[0] = pick(markers, rng);
    std::uniform_int_distribution<int> extra_d(0, 2);
    const int extra = extra_d(rng);
    if (len > 1) {
        std::uniform_int_distribution<int> pos_d(1, len - 1);
        for (int i = 0; i < extra; ++i) {
            seq.ids[static_cast<size_t>(pos_d(rng))] = pick(markers, rng);
        }
    }
    return seq;
}

void CorpusSpec::validate() const {
    if (harmful_fraction_fl < 0.0 || harmful_fraction_fl > 1.0) {
        throw ConfigError("harmful_fraction_fl must lie in [0,1]");
    }
    if (filter_balance < 0.0 || filter_balance > 1.0) {
        throw ConfigError("filter_balance must lie in [0,1]");
    }
    if (fl_total == 0 || filter_total == 0) {
        throw ConfigError("corpus split sizes must be >= 1");
    }
}

CorpusBundle synth_corpus(const Grammar& g, const CorpusSpec& spec) {
    g.validate();
    spec.validate();
    CorpusBundle out;

    auto build_split = [&](size_t total, double unsafe_fraction, FillerRange fillers,
                           uint64_t seed) {
        std::mt19937_64 rng(mix64(seed));
        const size_t n_unsafe = static_cast<size_t>(std::llround(
            static_cast<double>(total) * unsafe_fraction));
        std::vector<LabeledPair> items;
        items.reserve(total);
        for (size_t i = 0; i < total; ++i) {
            const bool toxic = i < n_unsafe;
            LabeledPair p;
            p.prompt = random_red_prompt(g, fillers, rng);
            p.response = random_response(g, fillers, toxic, rng);
            p.label = toxic ? SafetyLabel::unsafe : SafetyLabel::safe;
            items.push_back(std::move(p));
        }
        std::shuffle(items.begin(), items.end(), rng);
        return items;
    };

    out.fl = build_split(spec.fl_total, spec.harmful_fraction_fl, split_filler_range(g, 0),
                         derive_seed(spec.seed, "fl-split"));
    out.filter_train = build_split(spec.filter_total, spec.filter_balance,
                                   split_filler_range(g, 1),
                                   derive_seed(spec.seed, "filter-split"));

    std::mt19937_64 cai_rng(mix64(derive_seed(spec.seed, "cai-split")));
    FillerRange cai_range = split_filler_range(g, 2);
    out.cai_prompts.reserve(spec.cai_total);
    for (size_t i = 0; i < spec.cai_total; ++i) {
        out.cai_prompts.push_back(random_red_prompt(g, cai_range, cai_rng));
    }
    return out;
}

PartitionPlan partition(const std::vector<LabeledPair>& fl_corpus, size_t num_clients,
                        size_t per_client, double harmful_fraction, uint64_t seed) {
    if (num_clients == 0 || per_client == 0) {
        throw std::invalid_argument("partition needs at least one client and one item");
    }
    if (fl_corpus.size() < num_clients * per_client) {
        throw PartitionError("corpus smaller than num_clients * per_client");
    }
    const size_t unsafe_per_client = static_cast<size_t>(std::llround(
        static_cast<double>(per_client) * harmful_fraction));
    const size_t safe_per_client = per_client - unsafe_per_client;

    std::vector<size_t> unsafe_idx, safe_idx;
    for (size_t i = 0; i < fl_corpus.size(); ++i) {
        (fl_corpus[i].label == SafetyLabel::unsafe ? unsafe_idx : safe_idx).push_back(i);
    }
    if (unsafe_idx.size() < num_clients * unsafe_per_client) {
        throw PartitionError("not enough unsafe items for stratified partition");
    }
    if (safe_idx.size() < num_clients * safe_per_client) {
        throw PartitionError("not enough safe items for stratified partition");
    }

    std::mt19937_64 rng(mix64(derive_seed(seed, "partition")));
    std::shuffle(unsafe_idx.begin(), unsafe_idx.end(), rng);
    std::shuffle(safe_idx.begin(), safe_idx.end(), rng);

    PartitionPlan plan;
    plan.num_clients = num_clients;
    plan.per_client = per_client;
    plan.client_indices.resize(num_clients);
    size_t u = 0, s = 0;
    for (size_t c = 0; c < num_clients; ++c) {
        auto& mine = plan.client_indices[c];
        mine.reserve(per_client);
        for (size_t i = 0; i < unsafe_per_client; ++i) {
            mine.push_back(unsafe_idx[u++]);
        }
        for (size_t i = 0; i < safe_per_client; ++i) {
            mine.push_back(safe_idx[s++]);
        }
        std::shuffle(mine.begin(), mine.end(), rng);
    }
    return plan;
}

SafetyLabel ground_truth_label(const Grammar& g, const model::TokenSequence& response) {
    for (int id : response.ids) {
        for (int tox : g.toxic_ids) {
            if (id == tox) {
                return SafetyLabel::unsafe;
            }
        }
    }
    return SafetyLabel::safe;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::string label_name(SafetyLabel label) {
    return label == SafetyLabel::unsafe ? "unsafe" : "safe";
}

SafetyLabel label_from_name(const std::string& name) {
    if (name == "unsafe") {
        return SafetyLabel::unsafe;
    }
    if (name == "safe") {
        return SafetyLabel::safe;
    }
    throw IoError("unknown safety label: " + name);
}

void write_labeled_pairs(const std::string& path, const std::vector<LabeledPair>& pairs) {
    std::string out;
    for (const auto& p : pairs) {
        ordered_json j;
        j["prompt"] = p.prompt.ids;
        j["response"] = p.response.ids;
        j["label"] = label_name(p.label);
        out += j.dump();
        out += '\n';
    }
    write_text_file_atomic(path, out);
}

std::vector<LabeledPair> read_labeled_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingInputError("cannot open dataset: " + path);
    }
    std::vector<LabeledPair> pairs;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        LabeledPair p;
        p.prompt.ids = j.at("prompt").get<std::vector<int>>();
        p.response.ids = j.at("response").get<std::vector<int>>();
        p.label = label_from_name(j.at("label").get<std::string>());
        pairs.push_back(std::move(p));
    }
    return pairs;
}

void write_prompts(const std::string& path, const std::vector<model::TokenSequence>& prompts) {
    std::string out;
    for (const auto& p : prompts) {
        ordered_json j;
        j["prompt"] = p.ids;
        out += j.dump();
        out += '\n';
    }
    write_text_file_atomic(path, out);
}

std::vector<model::TokenSequence> read_prompts(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingInputError("cannot open prompt file: " + path);
    }
    std::vector<model::TokenSequence> prompts;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        ordered_json j = ordered_json::parse(line);
        prompts.emplace_back(j.at("prompt").get<std::vector<int>>());
    }
    return prompts;
}

void write_grammar(const std::string& path, const Grammar& g) {
    ordered_json j;
    j["vocab_size"] = g.vocab_size;
    ordered_json vocab = ordered_json::object();
    for (size_t id = 0; id < g.token_names.size(); ++id) {
        vocab[g.token_names[id]] = id;
    }
    j["vocab"] = vocab;
    j["trigger_ids"] = g.trigger_ids;
    j["toxic_ids"] = g.toxic_ids;
    j["refusal_ids"] = g.refusal_ids;
    j["critique_id"] = g.critique_id;
    j["revise_id"] = g.revise_id;
    j["ok_id"] = g.ok_id;
    j["filler_lo"] = g.fillers.lo;
    j["filler_hi"] = g.fillers.hi;
    j["prompt_len"] = {g.prompt_len_min, g.prompt_len_max};
    j["response_len"] = {g.response_len_min, g.response_len_max};
    write_text_file_atomic(path, j.dump(2) + "\n");
}

Grammar read_grammar(const std::string& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path));
    } catch (const IoError&) {
        throw MissingInputError("cannot open grammar manifest: " + path);
    }
    Grammar g;
    g.vocab_size = j.at("vocab_size").get<int>();
    g.token_names.assign(static_cast<size_t>(g.vocab_size), "");
    for (const auto& [name, id] : j.at("vocab").items()) {
        int i = id.get<int>();
        g.vocab[name] = i;
        if (i >= 0 && i < g.vocab_size) {
            g.token_names[static_cast<size_t>(i)] = name;
        }
    }
    g.trigger_ids = j.at("trigger_ids").get<std::vector<int>>();
    g.toxic_ids = j.at("toxic_ids").get<std::vector<int>>();
    g.refusal_ids = j.at("refusal_ids").get<std::vector<int>>();
    g.critique_id = j.at("critique_id").get<int>();
    g.revise_id = j.at("revise_id").get<int>();
    g.ok_id = j.at("ok_id").get<int>();
    g.fillers.lo = j.at("filler_lo").get<int>();
    g.fillers.hi = j.at("filler_hi").get<int>();
    g.prompt_len_min = j.at("prompt_len")[0].get<int>();
    g.prompt_len_max = j.at("prompt_len")[1].get<int>();
    g.response_len_min = j.at("response_len")[0].get<int>();
    g.response_len_max = j.at("response_len")[1].get<int>();
    g.validate();
    return g;
}

}  // namespace fedrai::synth
