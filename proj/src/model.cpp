#include "fedrai/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fedrai::model {

namespace {

constexpr const char* kRoleNames[] = {"embedding", "query", "key", "value", "output", "head"};

bool is_per_layer_role(const std::string& role) {
    return role == "query" || role == "key" || role == "value" || role == "output";
}

bool is_known_role(const std::string& role) {
    for (const char* r : kRoleNames) {
        if (role == r) {
            return true;
        }
    }
    return false;
}

struct TargetRef {
    enum class Kind { embedding, query, key, value, output, head } kind;
    int layer = -1;
};

TargetRef resolve_target(const BaseWeights& base, const std::string& name) {
    if (name == "embedding") {
        return {TargetRef::Kind::embedding, -1};
    }
    if (name == "head") {
        return {TargetRef::Kind::head, -1};
    }
    if (name.rfind("layer", 0) == 0) {
        size_t dotpos = name.find('.');
        if (dotpos != std::string::npos) {
            int layer = -1;
            try {
                layer = std::stoi(name.substr(5, dotpos - 5));
            } catch (...) {
                layer = -1;
            }
            std::string role = name.substr(dotpos + 1);
            if (layer >= 0 && layer < base.num_layers()) {
                if (role == "query") {
                    return {TargetRef::Kind::query, layer};
                }
                if (role == "key") {
                    return {TargetRef::Kind::key, layer};
                }
                if (role == "value") {
                    return {TargetRef::Kind::value, layer};
                }
                if (role == "output") {
                    return {TargetRef::Kind::output, layer};
                }
            }
        }
    }
    throw ConfigError("unknown adapter target '" + name + "' for this model");
}

template <typename W>
auto& target_matrix(W& base, const TargetRef& ref) {
    switch (ref.kind) {
        case TargetRef::Kind::embedding: return base.token_embedding;
        case TargetRef::Kind::head: return base.head;
        case TargetRef::Kind::query: return base.layers[ref.layer].query;
        case TargetRef::Kind::key: return base.layers[ref.layer].key;
        case TargetRef::Kind::value: return base.layers[ref.layer].value;
        default: return base.layers[ref.layer].output;
    }
}

// Expanded, canonically ordered target names for a config.
std::vector<std::string> expand_targets(const ModelConfig& config) {
    std::vector<std::string> names;
    for (const auto& role : config.adapter_targets) {
        if (!is_known_role(role)) {
            throw ConfigError("unknown adapter target role '" + role + "'");
        }
        if (is_per_layer_role(role)) {
            for (int l = 0; l < config.num_layers; ++l) {
                names.push_back("layer" + std::to_string(l) + "." + role);
            }
        } else {
            names.push_back(role);
        }
    }
    std::vector<std::string> dedup = names;
    std::sort(dedup.begin(), dedup.end());
    if (std::adjacent_find(dedup.begin(), dedup.end()) != dedup.end()) {
        throw ConfigError("duplicate adapter target role");
    }
    return names;
}

void check_congruent(const AdapterSet& a, const GradientSet& g) {
    if (a.targets.size() != g.entries.size()) {
        throw ConfigError("gradient set not congruent with adapter");
    }
    for (size_t i = 0; i < a.targets.size(); ++i) {
        if (!a.targets[i].down.same_shape(g.entries[i].down) ||
            !a.targets[i].up.same_shape(g.entries[i].up)) {
            throw ConfigError("gradient factor shape mismatch at " + a.targets[i].name);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward trace
// ---------------------------------------------------------------------------

struct LayerTrace {
    std::vector<double> x_in;   // n x D, layer input
    std::vector<double> q, k, v;  // n x D each
    std::vector<double> attn;   // n x n, row i holds weights over j <= i
    std::vector<double> mixed;  // n x D, attention-weighted value mix
};

struct Trace {
    size_t n = 0;
    size_t dim = 0;
    size_t vocab = 0;
    std::vector<int> ids;
    std::vector<LayerTrace> layers;
    std::vector<double> x_final;   // n x D
    std::vector<double> logprobs;  // n x V
    std::vector<double> probs;     // n x V, softmax rows (reused in backward)
};

void run_forward(const BaseWeights& w, const std::vector<int>& ids, Trace& t) {
    const size_t n = ids.size();
    const size_t D = static_cast<size_t>(w.embed_dim());
    const size_t V = static_cast<size_t>(w.vocab_size());
    const size_t L = static_cast<size_t>(w.num_layers());
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

    t.n = n;
    t.dim = D;
    t.vocab = V;
    t.ids = ids;
    t.layers.assign(L, LayerTrace{});

    std::vector<double> x(n * D);
    for (size_t i = 0; i < n; ++i) {
        const double* emb = w.token_embedding.row(static_cast<size_t>(ids[i]));
        const double* pos = w.pos_embedding.row(i);
        double* xi = x.data() + i * D;
        for (size_t d = 0; d < D; ++d) {
            xi[d] = emb[d] + pos[d];
        }
    }

    for (size_t l = 0; l < L; ++l) {
        LayerTrace& lt = t.layers[l];
        lt.x_in = x;
        lt.q.resize(n * D);
        lt.k.resize(n * D);
        lt.v.resize(n * D);
        lt.attn.assign(n * n, 0.0);
        lt.mixed.assign(n * D, 0.0);
        const BaseWeights::Layer& ly = w.layers[l];
        for (size_t i = 0; i < n; ++i) {
            const double* xi = lt.x_in.data() + i * D;
            matvec(ly.query, xi, lt.q.data() + i * D);
            matvec(ly.key, xi, lt.k.data() + i * D);
            matvec(ly.value, xi, lt.v.data() + i * D);
        }
        for (size_t i = 0; i < n; ++i) {
            double* arow = lt.attn.data() + i * n;
            const double* qi = lt.q.data() + i * D;
            double mx = -1e300;
            for (size_t j = 0; j <= i; ++j) {
                double s = dot(qi, lt.k.data() + j * D, D) * inv_sqrt_d;
                arow[j] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (size_t j = 0; j <= i; ++j) {
                arow[j] = std::exp(arow[j] - mx);
                z += arow[j];
            }
            const double inv_z = 1.0 / z;
            double* mix = lt.mixed.data() + i * D;
            for (size_t j = 0; j <= i; ++j) {
                arow[j] *= inv_z;
                axpy(arow[j], lt.v.data() + j * D, mix, D);
            }
            // residual add of the projected mix
            double* xi = x.data() + i * D;
            for (size_t r = 0; r < D; ++r) {
                xi[r] += dot(ly.output.row(r), mix, D);
            }
        }
    }

    t.x_final = x;
    t.logprobs.resize(n * V);
    t.probs.resize(n * V);
    for (size_t i = 0; i < n; ++i) {
        const double* xi = t.x_final.data() + i * D;
        double* row = t.logprobs.data() + i * V;
        double* prow = t.probs.data() + i * V;
        matvec(w.head, xi, row);
        double mx = -1e300;
        for (size_t r = 0; r < V; ++r) {
            mx = std::max(mx, row[r]);
        }
        double z = 0.0;
        for (size_t r = 0; r < V; ++r) {
            prow[r] = std::exp(row[r] - mx);
            z += prow[r];
        }
        const double lse = mx + std::log(z);
        const double inv_z = 1.0 / z;
        for (size_t r = 0; r < V; ++r) {
            row[r] -= lse;
            prow[r] *= inv_z;
        }
    }
}

// Dense per-matrix gradients, mirroring BaseWeights.
struct WeightGrads {
    Matrix token_embedding;
    Matrix pos_embedding;
    std::vector<BaseWeights::Layer> layers;
    Matrix head;
};

// Which dense gradients a caller actually needs.
struct GradMask {
    bool embedding = false, head = false;
    struct L {
        bool query = false, key = false, value = false, output = false;
    };
    std::vector<L> layers;

    static GradMask full(const BaseWeights& w) {
        GradMask m;
        m.embedding = m.head = true;
        m.layers.assign(w.layers.size(), L{true, true, true, true});
        return m;
    }
    static GradMask for_adapter(const BaseWeights& w, const AdapterSet& a) {
        GradMask m;
        m.layers.assign(w.layers.size(), L{});
        for (const auto& tgt : a.targets) {
            TargetRef ref = resolve_target(w, tgt.name);
            switch (ref.kind) {
                case TargetRef::Kind::embedding: m.embedding = true; break;
                case TargetRef::Kind::head: m.head = true; break;
                case TargetRef::Kind::query: m.layers[ref.layer].query = true; break;
                case TargetRef::Kind::key: m.layers[ref.layer].key = true; break;
                case TargetRef::Kind::value: m.layers[ref.layer].value = true; break;
                case TargetRef::Kind::output: m.layers[ref.layer].output = true; break;
            }
        }
        return m;
    }
};

// Only the masked matrices are materialised; the rest stay empty.
WeightGrads zero_weight_grads(const BaseWeights& w, const GradMask& mask) {
    WeightGrads g;
    if (mask.embedding) {
        g.token_embedding = Matrix(w.token_embedding.rows, w.token_embedding.cols);
        g.pos_embedding = Matrix(w.pos_embedding.rows, w.pos_embedding.cols);
    }
    g.layers.resize(w.layers.size());
    for (size_t l = 0; l < w.layers.size(); ++l) {
        if (mask.layers[l].query) {
            g.layers[l].query = Matrix(w.layers[l].query.rows, w.layers[l].query.cols);
        }
        if (mask.layers[l].key) {
            g.layers[l].key = Matrix(w.layers[l].key.rows, w.layers[l].key.cols);
        }
        if (mask.layers[l].value) {
            g.layers[l].value = Matrix(w.layers[l].value.rows, w.layers[l].value.cols);
        }
        if (mask.layers[l].output) {
            g.layers[l].output = Matrix(w.layers[l].output.rows, w.layers[l].output.cols);
        }
    }
    if (mask.head) {
        g.head = Matrix(w.head.rows, w.head.cols);
    }
    return g;
}

// Backpropagates coeff * d(sum of selected target logprobs)/d(weights) into
// dense grads. `dlogits` must already hold the per-row logit gradients.
void run_backward(const BaseWeights& w, const Trace& t, std::vector<double>& dlogits,
                  const GradMask& mask, WeightGrads& grads) {
    const size_t n = t.n;
    const size_t D = t.dim;
    const size_t V = t.vocab;
    const size_t L = w.layers.size();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

    std::vector<double> dx(n * D, 0.0);
    for (size_t i = 0; i < n; ++i) {
        const double* dl = dlogits.data() + i * V;
        bool active = false;
        for (size_t r = 0; r < V; ++r) {
            if (dl[r] != 0.0) {
                active = true;
                break;
            }
        }
        if (!active) {
            continue;  // position contributes no loss
        }
        double* dxi = dx.data() + i * D;
        matvec_t_add(w.head, dl, dxi);
        if (mask.head) {
            add_outer(grads.head, dl, t.x_final.data() + i * D);
        }
    }

    std::vector<double> dmix(n * D), dq(n * D), dk(n * D), dv(n * D), dalpha;
    for (size_t li = L; li-- > 0;) {
        const LayerTrace& lt = t.layers[li];
        const BaseWeights::Layer& ly = w.layers[li];
        std::fill(dmix.begin(), dmix.end(), 0.0);
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);

        // output projection: x_out = x_in + W_o * mixed
        for (size_t i = 0; i < n; ++i) {
            const double* dxi = dx.data() + i * D;
            matvec_t_add(ly.output, dxi, dmix.data() + i * D);
            if (mask.layers[li].output) {
                add_outer(grads.layers[li].output, dxi, lt.mixed.data() + i * D);
            }
        }

        // attention: mixed_i = sum_j a_ij v_j, a = softmax(q k^T / sqrt(D))
        dalpha.assign(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            const double* dmi = dmix.data() + i * D;
            const double* arow = lt.attn.data() + i * n;
            double inner = 0.0;
            for (size_t j = 0; j <= i; ++j) {
                dalpha[j] = dot(dmi, lt.v.data() + j * D, D);
                axpy(arow[j], dmi, dv.data() + j * D, D);
                inner += arow[j] * dalpha[j];
            }
            double* dqi = dq.data() + i * D;
            const double* qi = lt.q.data() + i * D;
            for (size_t j = 0; j <= i; ++j) {
                const double ds = arow[j] * (dalpha[j] - inner) * inv_sqrt_d;
                axpy(ds, lt.k.data() + j * D, dqi, D);
                axpy(ds, qi, dk.data() + j * D, D);
            }
        }

        // projections: q_i = W_q x_i etc.; residual carries dx through
        for (size_t i = 0; i < n; ++i) {
            const double* xi = lt.x_in.data() + i * D;
            double* dxi = dx.data() + i * D;
            const double* dqi = dq.data() + i * D;
            const double* dki = dk.data() + i * D;
            const double* dvi = dv.data() + i * D;
            if (mask.layers[li].query) {
                add_outer(grads.layers[li].query, dqi, xi);
            }
            if (mask.layers[li].key) {
                add_outer(grads.layers[li].key, dki, xi);
            }
            if (mask.layers[li].value) {
                add_outer(grads.layers[li].value, dvi, xi);
            }
            matvec_t_add(ly.query, dqi, dxi);
            matvec_t_add(ly.key, dki, dxi);
            matvec_t_add(ly.value, dvi, dxi);
        }
    }

    if (mask.embedding) {
        for (size_t i = 0; i < n; ++i) {
            axpy(1.0, dx.data() + i * D, grads.token_embedding.row(static_cast<size_t>(t.ids[i])),
                 D);
        }
    }
    for (size_t i = 0; i < n; ++i) {
        if (mask.embedding) {  // positional grads only matter when embeddings train
            axpy(1.0, dx.data() + i * D, grads.pos_embedding.row(i), D);
        }
    }
}

// Fills dlogits rows for targets in [begin, n) with coeff*(onehot - p) and
// returns the summed target logprob. PAD targets are skipped.
double fill_dlogits(const Trace& t, size_t begin, double coeff, std::vector<double>& dlogits,
                    size_t* counted = nullptr) {
    const size_t n = t.n;
    const size_t V = t.vocab;
    dlogits.assign(n * V, 0.0);
    double lp_sum = 0.0;
    size_t count = 0;
    for (size_t pos = begin; pos < n; ++pos) {
        const int target = t.ids[pos];
        if (target == kPadToken) {
            continue;
        }
        const size_t row = pos - 1;
        const double* p = t.probs.data() + row * V;
        double* dl = dlogits.data() + row * V;
        for (size_t r = 0; r < V; ++r) {
            dl[r] = -coeff * p[r];
        }
        dl[static_cast<size_t>(target)] += coeff;
        lp_sum += t.logprobs[row * V + static_cast<size_t>(target)];
        ++count;
    }
    if (counted) {
        *counted = count;
    }
    return lp_sum;
}

double logprob_sum_only(const Trace& t, size_t begin, size_t* counted = nullptr) {
    double lp_sum = 0.0;
    size_t count = 0;
    for (size_t pos = begin; pos < t.n; ++pos) {
        if (t.ids[pos] == kPadToken) {
            continue;
        }
        lp_sum += t.logprobs[(pos - 1) * t.vocab + static_cast<size_t>(t.ids[pos])];
        ++count;
    }
    if (counted) {
        *counted = count;
    }
    return lp_sum;
}

void extract_adapter_grads(const BaseWeights& base, const AdapterSet& adapter,
                           const WeightGrads& dense, GradientSet& out) {
    for (size_t ti = 0; ti < adapter.targets.size(); ++ti) {
        const AdapterTarget& tgt = adapter.targets[ti];
        const Matrix* dw = &target_matrix(dense, resolve_target(base, tgt.name));
        Matrix& da = out.entries[ti].down;
        Matrix& db = out.entries[ti].up;
        const size_t rank = tgt.down.rows;
        const size_t in = tgt.down.cols;
        const size_t outdim = tgt.up.rows;
        // dA += B^T dW ; dB += dW A^T
        for (size_t o = 0; o < outdim; ++o) {
            const double* dwrow = dw->row(o);
            for (size_t r = 0; r < rank; ++r) {
                axpy(tgt.up(o, r), dwrow, da.row(r), in);
                db(o, r) += dot(dwrow, tgt.down.row(r), in);
            }
        }
    }
}

void accumulate_weight_grads(WeightGrads& dst, const WeightGrads& src) {
    auto add = [](Matrix& a, const Matrix& b) {
        for (size_t i = 0; i < b.data.size(); ++i) {
            a.data[i] += b.data[i];
        }
    };
    add(dst.token_embedding, src.token_embedding);
    add(dst.pos_embedding, src.pos_embedding);
    for (size_t l = 0; l < dst.layers.size(); ++l) {
        add(dst.layers[l].query, src.layers[l].query);
        add(dst.layers[l].key, src.layers[l].key);
        add(dst.layers[l].value, src.layers[l].value);
        add(dst.layers[l].output, src.layers[l].output);
    }
    add(dst.head, src.head);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and construction
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (vocab_size < 1 || embed_dim < 1 || num_layers < 1 || context_len < 2 ||
        adapter_rank < 1) {
        throw ConfigError("model config counts must be >= 1 (context_len >= 2)");
    }
    if (adapter_rank > embed_dim) {
        throw ConfigError("adapter_rank must be <= embed_dim");
    }
    if (vocab_size <= kSepToken) {
        throw ConfigError("vocab_size too small for reserved tokens");
    }
    expand_targets(*this);
}

TokenSequence join_prompt_response(const TokenSequence& prompt, const TokenSequence& response,
                                   bool append_eos) {
    TokenSequence out;
    out.ids.reserve(prompt.size() + response.size() + 2);
    out.ids = prompt.ids;
    out.ids.push_back(kSepToken);
    out.ids.insert(out.ids.end(), response.ids.begin(), response.ids.end());
    if (append_eos) {
        out.ids.push_back(kEosToken);
    }
    return out;
}

BaseWeights zero_base(const ModelConfig& config) {
    config.validate();
    BaseWeights w;
    const size_t V = static_cast<size_t>(config.vocab_size);
    const size_t D = static_cast<size_t>(config.embed_dim);
    w.token_embedding = Matrix(V, D);
    w.pos_embedding = Matrix(static_cast<size_t>(config.context_len), D);
    w.layers.resize(static_cast<size_t>(config.num_layers));
    for (auto& l : w.layers) {
        l.query = Matrix(D, D);
        l.key = Matrix(D, D);
        l.value = Matrix(D, D);
        l.output = Matrix(D, D);
    }
    w.head = Matrix(V, D);
    return w;
}

BaseWeights random_base(const ModelConfig& config, uint64_t seed, double sigma) {
    BaseWeights w = zero_base(config);
    std::mt19937_64 rng(mix64(seed));
    std::normal_distribution<double> dist(0.0, sigma);
    auto fill = [&](Matrix& m) {
        for (auto& v : m.data) {
            v = dist(rng);
        }
    };
    fill(w.token_embedding);
    fill(w.pos_embedding);
    for (auto& l : w.layers) {
        fill(l.query);
        fill(l.key);
        fill(l.value);
        fill(l.output);
    }
    fill(w.head);
    return w;
}

AdapterSet init_adapter(const ModelConfig& config, uint64_t seed) {
    config.validate();
    BaseWeights shape = zero_base(config);
    AdapterSet a;
    a.owner = "global";
    a.round_index = 0;
    std::mt19937_64 rng(mix64(seed));
    for (const auto& name : expand_targets(config)) {
        const Matrix& w = target_matrix(shape, resolve_target(shape, name));
        AdapterTarget tgt;
        tgt.name = name;
        const size_t out = w.rows;
        const size_t in = w.cols;
        tgt.down = randn_matrix(static_cast<size_t>(config.adapter_rank), in, 0.02, rng);
        tgt.up = Matrix(out, static_cast<size_t>(config.adapter_rank));
        a.targets.push_back(std::move(tgt));
    }
    return a;
}

// ---------------------------------------------------------------------------
// Adapter arithmetic
// ---------------------------------------------------------------------------

GradientSet zero_gradients(const AdapterSet& like) {
    GradientSet g;
    g.entries.reserve(like.targets.size());
    for (const auto& t : like.targets) {
        g.entries.push_back({Matrix(t.down.rows, t.down.cols), Matrix(t.up.rows, t.up.cols)});
    }
    return g;
}

AdapterSet zero_like(const AdapterSet& a) {
    AdapterSet z = a;
    for (auto& t : z.targets) {
        t.down.fill(0.0);
        t.up.fill(0.0);
    }
    return z;
}

void adapter_axpy(AdapterSet& dst, double alpha, const AdapterSet& src) {
    if (dst.targets.size() != src.targets.size()) {
        throw ConfigError("adapter shape mismatch in axpy");
    }
    for (size_t i = 0; i < dst.targets.size(); ++i) {
        axpy(alpha, src.targets[i].down.data.data(), dst.targets[i].down.data.data(),
             dst.targets[i].down.size());
        axpy(alpha, src.targets[i].up.data.data(), dst.targets[i].up.data.data(),
             dst.targets[i].up.size());
    }
}

void adapter_scale(AdapterSet& a, double alpha) {
    for (auto& t : a.targets) {
        for (auto& v : t.down.data) {
            v *= alpha;
        }
        for (auto& v : t.up.data) {
            v *= alpha;
        }
    }
}

double adapter_max_abs_diff(const AdapterSet& a, const AdapterSet& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.targets.size(); ++i) {
        m = std::max(m, max_abs_diff(a.targets[i].down, b.targets[i].down));
        m = std::max(m, max_abs_diff(a.targets[i].up, b.targets[i].up));
    }
    return m;
}

bool adapter_all_finite(const AdapterSet& a) {
    for (const auto& t : a.targets) {
        if (!all_finite(t.down) || !all_finite(t.up)) {
            return false;
        }
    }
    return true;
}

bool gradients_all_finite(const GradientSet& g) {
    for (const auto& e : g.entries) {
        if (!all_finite(e.down) || !all_finite(e.up)) {
            return false;
        }
    }
    return true;
}

void gradient_axpy(GradientSet& dst, double alpha, const GradientSet& src) {
    for (size_t i = 0; i < dst.entries.size(); ++i) {
        axpy(alpha, src.entries[i].down.data.data(), dst.entries[i].down.data.data(),
             dst.entries[i].down.size());
        axpy(alpha, src.entries[i].up.data.data(), dst.entries[i].up.data.data(),
             dst.entries[i].up.size());
    }
}

void gradient_scale(GradientSet& g, double alpha) {
    for (auto& e : g.entries) {
        for (auto& v : e.down.data) {
            v *= alpha;
        }
        for (auto& v : e.up.data) {
            v *= alpha;
        }
    }
}

size_t adapter_param_count(const AdapterSet& a) {
    size_t n = 0;
    for (const auto& t : a.targets) {
        n += t.down.size() + t.up.size();
    }
    return n;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

void validate_sequence(const BaseWeights& base, const TokenSequence& seq) {
    if (seq.empty()) {
        throw std::invalid_argument("token sequence must be non-empty");
    }
    if (seq.size() > static_cast<size_t>(base.context_len())) {
        throw LengthError("sequence length " + std::to_string(seq.size()) +
                          " exceeds context " + std::to_string(base.context_len()));
    }
    for (int id : seq.ids) {
        if (id < 0 || id >= base.vocab_size()) {
            throw std::invalid_argument("token id out of range: " + std::to_string(id));
        }
    }
}

void validate_adapter(const BaseWeights& base, const AdapterSet& adapter) {
    for (const auto& t : adapter.targets) {
        // resolve_target throws on targets the model does not have
        const Matrix& w = target_matrix(base, resolve_target(base, t.name));
        if (t.down.cols != w.cols || t.up.rows != w.rows || t.down.rows != t.up.cols) {
            throw ConfigError("adapter factor shapes inconsistent at " + t.name);
        }
    }
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

BaseWeights merge_adapter(const BaseWeights& base, const AdapterSet& adapter) {
    validate_adapter(base, adapter);
    BaseWeights merged = base;
    for (const auto& t : adapter.targets) {
        Matrix& w = target_matrix(merged, resolve_target(merged, t.name));
        const size_t rank = t.down.rows;
        for (size_t o = 0; o < w.rows; ++o) {
            double* wrow = w.row(o);
            for (size_t r = 0; r < rank; ++r) {
                axpy(t.up(o, r), t.down.row(r), wrow, w.cols);
            }
        }
    }
    return merged;
}

Matrix forward_logprobs(const BaseWeights& base, const AdapterSet& adapter,
                        const TokenSequence& seq) {
    validate_sequence(base, seq);
    BaseWeights merged = merge_adapter(base, adapter);
    Trace t;
    run_forward(merged, seq.ids, t);
    Matrix out(t.n, t.vocab);
    out.data = std::move(t.logprobs);
    return out;
}

LossResult nll_loss_and_grad(const BaseWeights& base, const AdapterSet& adapter,
                             const std::vector<TokenSequence>& batch) {
    std::vector<ConditionedItem> items;
    items.reserve(batch.size());
    for (const auto& seq : batch) {
        items.push_back({seq, 1});
    }
    return nll_conditioned(base, adapter, items);
}

LossResult nll_conditioned(const BaseWeights& base, const AdapterSet& adapter,
                           const std::vector<ConditionedItem>& batch) {
    if (batch.empty()) {
        throw std::invalid_argument("empty batch");
    }
    validate_adapter(base, adapter);
    BaseWeights merged = merge_adapter(base, adapter);
    GradMask mask = GradMask::for_adapter(base, adapter);

    // First pass: count predicted tokens so the mean's gradient coefficient
    // is known before any backward runs.
    std::vector<Trace> traces(batch.size());
    std::vector<size_t> counts(batch.size(), 0);
    std::vector<double> sums(batch.size(), 0.0);
    parallel_for(batch.size(), [&](size_t i) {
        validate_sequence(base, batch[i].seq);
        run_forward(merged, batch[i].seq.ids, traces[i]);
        sums[i] = logprob_sum_only(traces[i], std::max<size_t>(batch[i].target_begin, 1),
                                   &counts[i]);
    });
    size_t total = 0;
    double lp = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        total += counts[i];
        lp += sums[i];
    }
    if (total == 0) {
        throw std::invalid_argument("batch contains no predictable positions");
    }
    const double coeff = -1.0 / static_cast<double>(total);

    std::vector<WeightGrads> dense(batch.size());
    parallel_for(batch.size(), [&](size_t i) {
        dense[i] = zero_weight_grads(base, mask);
        std::vector<double> dlogits;
        fill_dlogits(traces[i], std::max<size_t>(batch[i].target_begin, 1), coeff, dlogits);
        run_backward(merged, traces[i], dlogits, mask, dense[i]);
    });
    for (size_t i = 1; i < dense.size(); ++i) {
        accumulate_weight_grads(dense[0], dense[i]);
    }

    LossResult res;
    res.loss = -lp / static_cast<double>(total);
    res.token_count = total;
    res.grads = zero_gradients(adapter);
    extract_adapter_grads(base, adapter, dense[0], res.grads);
    return res;
}

double sequence_logprob(const BaseWeights& base, const AdapterSet& adapter,
                        const TokenSequence& seq, size_t target_begin) {
    validate_sequence(base, seq);
    validate_adapter(base, adapter);
    BaseWeights merged = merge_adapter(base, adapter);
    Trace t;
    run_forward(merged, seq.ids, t);
    return logprob_sum_only(t, std::max<size_t>(target_begin, 1));
}

double sequence_logprob_grad(const BaseWeights& base, const AdapterSet& adapter,
                             const TokenSequence& seq, size_t target_begin, double coeff,
                             GradientSet& grads) {
    validate_sequence(base, seq);
    validate_adapter(base, adapter);
    check_congruent(adapter, grads);
    BaseWeights merged = merge_adapter(base, adapter);
    Trace t;
    run_forward(merged, seq.ids, t);
    std::vector<double> dlogits;
    const double lp = fill_dlogits(t, std::max<size_t>(target_begin, 1), coeff, dlogits);
    GradMask mask = GradMask::for_adapter(base, adapter);
    WeightGrads dense = zero_weight_grads(base, mask);
    run_backward(merged, t, dlogits, mask, dense);
    extract_adapter_grads(base, adapter, dense, grads);
    return lp;
}

std::pair<AdapterSet, OptimizerState> apply_update(const AdapterSet& adapter,
                                                   const GradientSet& grads,
                                                   const OptimizerState& state,
                                                   const UpdateParams& params,
                                                   const GradientSet* correction) {
    check_congruent(adapter, grads);
    if (correction) {
        check_congruent(adapter, *correction);
    }
    if (!gradients_all_finite(grads) || (correction && !gradients_all_finite(*correction))) {
        throw NumericError("non-finite gradient in apply_update");
    }
    if (!state.m.empty() && state.m.size() != adapter.targets.size()) {
        throw ConfigError("optimizer state not congruent with adapter");
    }
    AdapterSet next = adapter;
    OptimizerState st = state;
    st.step += 1;

    auto effective = [&](size_t e, bool up, size_t i) {
        const Matrix& g = up ? grads.entries[e].up : grads.entries[e].down;
        double v = g.data[i];
        if (correction) {
            const Matrix& c = up ? correction->entries[e].up : correction->entries[e].down;
            v += c.data[i];
        }
        return v;
    };

    if (params.mode == UpdateParams::Mode::sgd) {
        for (size_t e = 0; e < next.targets.size(); ++e) {
            for (size_t i = 0; i < next.targets[e].down.size(); ++i) {
                next.targets[e].down.data[i] -= params.lr * effective(e, false, i);
            }
            for (size_t i = 0; i < next.targets[e].up.size(); ++i) {
                next.targets[e].up.data[i] -= params.lr * effective(e, true, i);
            }
        }
        return {std::move(next), std::move(st)};
    }

    if (st.m.empty()) {
        GradientSet z = zero_gradients(adapter);
        st.m = z.entries;
        st.v = z.entries;
    }
    const double bc1 = 1.0 - std::pow(params.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(params.beta2, static_cast<double>(st.step));
    auto adamw = [&](Matrix& theta, Matrix& m, Matrix& v, size_t e, bool up) {
        for (size_t i = 0; i < theta.size(); ++i) {
            const double g = effective(e, up, i);
            m.data[i] = params.beta1 * m.data[i] + (1.0 - params.beta1) * g;
            v.data[i] = params.beta2 * v.data[i] + (1.0 - params.beta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            theta.data[i] -= params.lr * (mhat / (std::sqrt(vhat) + params.eps) +
                                          params.weight_decay * theta.data[i]);
        }
    };
    for (size_t e = 0; e < next.targets.size(); ++e) {
        adamw(next.targets[e].down, st.m[e].down, st.v[e].down, e, false);
        adamw(next.targets[e].up, st.m[e].up, st.v[e].up, e, true);
    }
    return {std::move(next), std::move(st)};
}

TokenSequence sample(const BaseWeights& base, const AdapterSet& adapter,
                     const TokenSequence& prompt, int max_new, double temperature,
                     uint64_t seed) {
    validate_sequence(base, prompt);
    validate_adapter(base, adapter);
    if (max_new < 1) {
        throw std::invalid_argument("max_new must be >= 1");
    }
    if (temperature < 0.0) {
        throw std::invalid_argument("temperature must be >= 0");
    }
    if (prompt.size() + 1 > static_cast<size_t>(base.context_len())) {
        throw LengthError("prompt leaves no room for generation");
    }
    BaseWeights merged = merge_adapter(base, adapter);
    std::mt19937_64 rng(mix64(seed));
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    TokenSequence seq = prompt;
    TokenSequence out;
    const size_t V = static_cast<size_t>(base.vocab_size());
    Trace t;
    for (int step = 0; step < max_new; ++step) {
        if (seq.size() >= static_cast<size_t>(base.context_len())) {
            break;
        }
        run_forward(merged, seq.ids, t);
        const double* row = t.logprobs.data() + (t.n - 1) * V;
        int next = 0;
        if (temperature == 0.0) {
            next = static_cast<int>(std::max_element(row, row + V) - row);
        } else {
            double mx = -1e300;
            std::vector<double> scaled(V);
            for (size_t r = 0; r < V; ++r) {
                scaled[r] = row[r] / temperature;
                mx = std::max(mx, scaled[r]);
            }
            double z = 0.0;
            for (size_t r = 0; r < V; ++r) {
                scaled[r] = std::exp(scaled[r] - mx);
                z += scaled[r];
            }
            const double u = unif(rng) * z;
            double cum = 0.0;
            next = static_cast<int>(V) - 1;
            for (size_t r = 0; r < V; ++r) {
                cum += scaled[r];
                if (u < cum) {
                    next = static_cast<int>(r);
                    break;
                }
            }
        }
        out.ids.push_back(next);
        if (next == kEosToken) {
            break;
        }
        seq.ids.push_back(next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

BaseWeights pretrain_base(const ModelConfig& config, const std::vector<TokenSequence>& corpus,
                          const PretrainParams& params, uint64_t seed) {
    config.validate();
    if (corpus.empty()) {
        throw std::invalid_argument("pretraining corpus is empty");
    }
    BaseWeights w = random_base(config, derive_seed(seed, "pretrain-init"), params.init_sigma);
    GradMask mask = GradMask::full(w);
    WeightGrads m = zero_weight_grads(w, mask);
    WeightGrads v = zero_weight_grads(w, mask);

    std::mt19937_64 order_rng(mix64(derive_seed(seed, "pretrain-order")));
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::shuffle(order.begin(), order.end(), order_rng);
    size_t cursor = 0;

    const size_t bs = static_cast<size_t>(std::max(params.batch_size, 1));
    std::vector<Trace> traces(bs);
    std::vector<WeightGrads> dense(bs);
    std::vector<size_t> counts(bs);

    for (int step = 0; step < params.steps; ++step) {
        const size_t take = std::min(bs, corpus.size());
        if (cursor + take > order.size()) {
            std::shuffle(order.begin(), order.end(), order_rng);
            cursor = 0;
        }
        std::vector<const TokenSequence*> batch(take);
        for (size_t i = 0; i < take; ++i) {
            batch[i] = &corpus[order[cursor + i]];
        }
        cursor += take;

        parallel_for(take, [&](size_t i) {
            run_forward(w, batch[i]->ids, traces[i]);
            logprob_sum_only(traces[i], 1, &counts[i]);
        });
        size_t total = 0;
        for (size_t i = 0; i < take; ++i) {
            total += counts[i];
        }
        if (total == 0) {
            continue;
        }
        const double coeff = -1.0 / static_cast<double>(total);
        parallel_for(take, [&](size_t i) {
            dense[i] = zero_weight_grads(w, mask);
            std::vector<double> dlogits;
            fill_dlogits(traces[i], 1, coeff, dlogits);
            run_backward(w, traces[i], dlogits, mask, dense[i]);
        });
        for (size_t i = 1; i < take; ++i) {
            accumulate_weight_grads(dense[0], dense[i]);
        }

        const double bc1 = 1.0 - std::pow(params.beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(params.beta2, static_cast<double>(step + 1));
        auto adam = [&](Matrix& theta, Matrix& mm, Matrix& vv, const Matrix& g) {
            for (size_t i = 0; i < theta.data.size(); ++i) {
                mm.data[i] = params.beta1 * mm.data[i] + (1.0 - params.beta1) * g.data[i];
                vv.data[i] = params.beta2 * vv.data[i] + (1.0 - params.beta2) * g.data[i] * g.data[i];
                theta.data[i] -=
                    params.lr * (mm.data[i] / bc1) / (std::sqrt(vv.data[i] / bc2) + params.eps);
            }
        };
        adam(w.token_embedding, m.token_embedding, v.token_embedding, dense[0].token_embedding);
        adam(w.pos_embedding, m.pos_embedding, v.pos_embedding, dense[0].pos_embedding);
        for (size_t l = 0; l < w.layers.size(); ++l) {
            adam(w.layers[l].query, m.layers[l].query, v.layers[l].query, dense[0].layers[l].query);
            adam(w.layers[l].key, m.layers[l].key, v.layers[l].key, dense[0].layers[l].key);
            adam(w.layers[l].value, m.layers[l].value, v.layers[l].value, dense[0].layers[l].value);
            adam(w.layers[l].output, m.layers[l].output, v.layers[l].output,
                 dense[0].layers[l].output);
        }
        adam(w.head, m.head, v.head, dense[0].head);
    }
    return w;
}

}  // namespace fedrai::model
