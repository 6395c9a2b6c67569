#pragma once

// Trainable safety filter: logistic regression over bag-of-token counts of
// prompt ++ SEP ++ response. Trained on the server split, deployed to
// clients to drop unsafe pairs before local training. Positive class is
// "unsafe" throughout.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedrai/synth.hpp"

namespace fedrai::filter {

using synth::LabeledPair;
using synth::SafetyLabel;

struct FilterModel {
    int vocab_size = 0;
    std::vector<double> weights;  // one per token id
    double bias = 0.0;
    double tau = 0.5;  // decision threshold: unsafe iff score >= tau
};

struct TrainParams {
    double lr = 1.0;
    int max_epochs = 400;
    double tol = 1e-6;  // stop when the epoch loss moves less than this
    double tau = 0.5;
};

// Full-batch logistic-loss gradient descent from zero weights; deterministic
// per seed. Throws TrainingError when the dataset has a single class.
FilterModel train_filter(const std::vector<LabeledPair>& dataset, int vocab_size,
                         const TrainParams& params, uint64_t seed);

struct Classification {
    SafetyLabel label = SafetyLabel::safe;
    double score = 0.0;  // P(unsafe)
};

Classification classify(const FilterModel& model, const LabeledPair& pair);

// Keeps pairs classified safe, in their original order.
std::pair<std::vector<LabeledPair>, size_t> filter_dataset(const FilterModel& model,
                                                           const std::vector<LabeledPair>& data);

struct FilterMetrics {
    double accuracy = 0.0;  // all four are percentages
    double precision = 0.0;
    double recall = 0.0;
    double hmean = 0.0;
    size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Harmonic mean of two percentages; 0 when both are 0.
double hmean(double precision, double recall);
FilterMetrics metrics_from_counts(size_t tp, size_t fp, size_t fn, size_t tn);
FilterMetrics evaluate_filter(const FilterModel& model, const std::vector<LabeledPair>& test);

void save_filter(const std::string& path, const FilterModel& model);
FilterModel load_filter(const std::string& path);

}  // namespace fedrai::filter
