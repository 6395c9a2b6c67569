#include "fedrai/filter.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace fedrai::filter {

using nlohmann::ordered_json;

namespace {

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double t) {
    return std::max(t, 0.0) + std::log1p(std::exp(-std::fabs(t)));
}

// Token-occurrence counts of prompt ++ SEP ++ response.
std::vector<double> featurize(int vocab_size, const LabeledPair& pair) {
    std::vector<double> x(static_cast<size_t>(vocab_size), 0.0);
    auto count = [&](const std::vector<int>& ids) {
        for (int id : ids) {
            if (id >= 0 && id < vocab_size) {
                x[static_cast<size_t>(id)] += 1.0;
            }
        }
    };
    count(pair.prompt.ids);
    x[static_cast<size_t>(model::kSepToken)] += 1.0;
    count(pair.response.ids);
    return x;
}

}  // namespace

FilterModel train_filter(const std::vector<LabeledPair>& dataset, int vocab_size,
                         const TrainParams& params, uint64_t seed) {
    (void)seed;  // training is full-batch from zero weights; kept for the contract
    if (dataset.empty()) {
        throw TrainingError("filter training set is empty");
    }
    size_t n_unsafe = 0;
    for (const auto& p : dataset) {
        if (p.label == SafetyLabel::unsafe) {
            ++n_unsafe;
        }
    }
    if (n_unsafe == 0 || n_unsafe == dataset.size()) {
        throw TrainingError("filter training set must contain both classes");
    }

    const size_t n = dataset.size();
    const size_t d = static_cast<size_t>(vocab_size);
    std::vector<std::vector<double>> feats(n);
    std::vector<double> labels(n);
    for (size_t i = 0; i < n; ++i) {
        feats[i] = featurize(vocab_size, dataset[i]);
        labels[i] = dataset[i].label == SafetyLabel::unsafe ? 1.0 : 0.0;
    }

    FilterModel m;
    m.vocab_size = vocab_size;
    m.weights.assign(d, 0.0);
    m.bias = 0.0;
    m.tau = params.tau;

    std::vector<double> gw(d);
    double prev_loss = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < params.max_epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        double loss = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double z = dot(m.weights.data(), feats[i].data(), d) + m.bias;
            const double p = sigmoid(z);
            const double err = p - labels[i];
            axpy(err, feats[i].data(), gw.data(), d);
            gb += err;
            // -[y log p + (1-y) log(1-p)], computed stably
            loss += (labels[i] > 0.5) ? softplus(-z) : softplus(z);
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        loss *= inv_n;
        for (size_t j = 0; j < d; ++j) {
            m.weights[j] -= params.lr * gw[j] * inv_n;
        }
        m.bias -= params.lr * gb * inv_n;
        if (std::fabs(prev_loss - loss) < params.tol) {
            break;
        }
        prev_loss = loss;
    }
    return m;
}

Classification classify(const FilterModel& model, const LabeledPair& pair) {
    const std::vector<double> x = featurize(model.vocab_size, pair);
    const double z = dot(model.weights.data(), x.data(), x.size()) + model.bias;
    Classification c;
    c.score = sigmoid(z);
    c.label = (c.score >= model.tau) ? SafetyLabel::unsafe : SafetyLabel::safe;
    return c;
}

std::pair<std::vector<LabeledPair>, size_t> filter_dataset(const FilterModel& model,
                                                           const std::vector<LabeledPair>& data) {
    std::vector<LabeledPair> retained;
    retained.reserve(data.size());
    for (const auto& p : data) {
        if (classify(model, p).label == SafetyLabel::safe) {
            retained.push_back(p);
        }
    }
    const size_t removed = data.size() - retained.size();
    return {std::move(retained), removed};
}

double hmean(double precision, double recall) {
    if (precision + recall <= 0.0) {
        return 0.0;
    }
    return 2.0 * precision * recall / (precision + recall);
}

FilterMetrics metrics_from_counts(size_t tp, size_t fp, size_t fn, size_t tn) {
    FilterMetrics m;
    m.tp = tp;
    m.fp = fp;
    m.fn = fn;
    m.tn = tn;
    const double total = static_cast<double>(tp + fp + fn + tn);
    m.accuracy = total > 0.0 ? 100.0 * static_cast<double>(tp + tn) / total : 0.0;
    m.precision = (tp + fp) > 0 ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fp)
                                : 0.0;
    m.recall = (tp + fn) > 0 ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fn)
                             : 0.0;
    m.hmean = hmean(m.precision, m.recall);
    return m;
}

FilterMetrics evaluate_filter(const FilterModel& model, const std::vector<LabeledPair>& test) {
    if (test.empty()) {
        throw std::invalid_argument("empty test set");
    }
    size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (const auto& p : test) {
        const bool predicted_unsafe = classify(model, p).label == SafetyLabel::unsafe;
        const bool actually_unsafe = p.label == SafetyLabel::unsafe;
        if (predicted_unsafe && actually_unsafe) {
            ++tp;
        } else if (predicted_unsafe) {
            ++fp;
        } else if (actually_unsafe) {
            ++fn;
        } else {
            ++tn;
        }
    }
    return metrics_from_counts(tp, fp, fn, tn);
}

void save_filter(const std::string& path, const FilterModel& model) {
    ordered_json j;
    j["version"] = 1;
    j["vocab_size"] = model.vocab_size;
    j["tau"] = model.tau;
    j["bias"] = model.bias;
    ordered_json w = ordered_json::object();
    for (size_t i = 0; i < model.weights.size(); ++i) {
        w[std::to_string(i)] = model.weights[i];
    }
    j["weights"] = w;
    write_text_file_atomic(path, j.dump(2) + "\n");
}

FilterModel load_filter(const std::string& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path));
    } catch (const IoError&) {
        throw MissingInputError("cannot open filter model: " + path);
    }
    FilterModel m;
    m.vocab_size = j.at("vocab_size").get<int>();
    m.tau = j.at("tau").get<double>();
    m.bias = j.at("bias").get<double>();
    m.weights.assign(static_cast<size_t>(m.vocab_size), 0.0);
    for (const auto& [key, val] : j.at("weights").items()) {
        const int id = std::stoi(key);
        if (id >= 0 && id < m.vocab_size) {
            m.weights[static_cast<size_t>(id)] = val.get<double>();
        }
    }
    return m;
}

}  // namespace fedrai::filter
