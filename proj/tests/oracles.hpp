#pragma once

// Test-only oracles, kept independent of the library's computation paths:
// a straight-line re-implementation of the forward pass, a central
// finite-difference gradient checker, and a hand-rolled AdamW reference.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fedrai/model.hpp"

namespace oracles {

namespace fm = fedrai::model;

// Straight-line forward pass: builds every effective matrix itself and
// walks the architecture with plain loops. Returns len x vocab logprobs.
inline std::vector<std::vector<double>> naive_forward(const fm::BaseWeights& base,
                                                      const fm::AdapterSet& adapter,
                                                      const std::vector<int>& ids) {
    const size_t n = ids.size();
    const size_t D = static_cast<size_t>(base.embed_dim());
    const size_t V = static_cast<size_t>(base.vocab_size());
    const size_t L = static_cast<size_t>(base.num_layers());

    auto effective = [&](const fedrai::Matrix& w, const std::string& name) {
        std::vector<std::vector<double>> e(w.rows, std::vector<double>(w.cols));
        for (size_t r = 0; r < w.rows; ++r) {
            for (size_t c = 0; c < w.cols; ++c) {
                e[r][c] = w(r, c);
            }
        }
        for (const auto& t : adapter.targets) {
            if (t.name != name) {
                continue;
            }
            for (size_t r = 0; r < w.rows; ++r) {
                for (size_t c = 0; c < w.cols; ++c) {
                    double delta = 0.0;
                    for (size_t k = 0; k < t.down.rows; ++k) {
                        delta += t.up(r, k) * t.down(k, c);
                    }
                    e[r][c] += delta;
                }
            }
        }
        return e;
    };

    std::vector<std::vector<double>> x(n, std::vector<double>(D));
    auto emb = effective(base.token_embedding, "embedding");
    for (size_t i = 0; i < n; ++i) {
        for (size_t d = 0; d < D; ++d) {
            x[i][d] = emb[static_cast<size_t>(ids[i])][d] + base.pos_embedding(i, d);
        }
    }

    for (size_t l = 0; l < L; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        auto wq = effective(base.layers[l].query, prefix + "query");
        auto wk = effective(base.layers[l].key, prefix + "key");
        auto wv = effective(base.layers[l].value, prefix + "value");
        auto wo = effective(base.layers[l].output, prefix + "output");

        std::vector<std::vector<double>> q(n, std::vector<double>(D, 0.0)), k = q, v = q;
        for (size_t i = 0; i < n; ++i) {
            for (size_t r = 0; r < D; ++r) {
                for (size_t c = 0; c < D; ++c) {
                    q[i][r] += wq[r][c] * x[i][c];
                    k[i][r] += wk[r][c] * x[i][c];
                    v[i][r] += wv[r][c] * x[i][c];
                }
            }
        }
        std::vector<std::vector<double>> nx = x;
        for (size_t i = 0; i < n; ++i) {
            std::vector<double> scores(i + 1, 0.0);
            for (size_t j = 0; j <= i; ++j) {
                for (size_t d = 0; d < D; ++d) {
                    scores[j] += q[i][d] * k[j][d];
                }
                scores[j] /= std::sqrt(static_cast<double>(D));
            }
            double z = 0.0;
            for (size_t j = 0; j <= i; ++j) {
                z += std::exp(scores[j]);
            }
            std::vector<double> mix(D, 0.0);
            for (size_t j = 0; j <= i; ++j) {
                const double a = std::exp(scores[j]) / z;
                for (size_t d = 0; d < D; ++d) {
                    mix[d] += a * v[j][d];
                }
            }
            for (size_t r = 0; r < D; ++r) {
                double o = 0.0;
                for (size_t c = 0; c < D; ++c) {
                    o += wo[r][c] * mix[c];
                }
                nx[i][r] += o;
            }
        }
        x = nx;
    }

    auto head = effective(base.head, "head");
    std::vector<std::vector<double>> out(n, std::vector<double>(V, 0.0));
    for (size_t i = 0; i < n; ++i) {
        for (size_t r = 0; r < V; ++r) {
            for (size_t c = 0; c < D; ++c) {
                out[i][r] += head[r][c] * x[i][c];
            }
        }
        double z = 0.0;
        for (size_t r = 0; r < V; ++r) {
            z += std::exp(out[i][r]);
        }
        const double lse = std::log(z);
        for (size_t r = 0; r < V; ++r) {
            out[i][r] -= lse;
        }
    }
    return out;
}

// Flattened view over adapter factors so coordinates can be perturbed.
struct AdapterCoord {
    size_t target;
    bool up;
    size_t index;
};

inline std::vector<AdapterCoord> all_coords(const fm::AdapterSet& a) {
    std::vector<AdapterCoord> coords;
    for (size_t t = 0; t < a.targets.size(); ++t) {
        for (size_t i = 0; i < a.targets[t].down.size(); ++i) {
            coords.push_back({t, false, i});
        }
        for (size_t i = 0; i < a.targets[t].up.size(); ++i) {
            coords.push_back({t, true, i});
        }
    }
    return coords;
}

inline double& coord_ref(fm::AdapterSet& a, const AdapterCoord& c) {
    return c.up ? a.targets[c.target].up.data[c.index] : a.targets[c.target].down.data[c.index];
}

inline double coord_grad(const fm::GradientSet& g, const AdapterCoord& c) {
    return c.up ? g.entries[c.target].up.data[c.index] : g.entries[c.target].down.data[c.index];
}

// Central finite differences on `count` random coordinates with a
// non-negligible analytic gradient; returns the worst relative error.
inline double max_rel_grad_error(const fm::AdapterSet& adapter, const fm::GradientSet& grads,
                                 const std::function<double(const fm::AdapterSet&)>& loss_fn,
                                 size_t count, uint64_t seed, double eps = 1e-4) {
    std::vector<AdapterCoord> coords = all_coords(adapter);
    std::vector<AdapterCoord> usable;
    for (const auto& c : coords) {
        if (std::fabs(coord_grad(grads, c)) >= 1e-8) {
            usable.push_back(c);
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(usable.begin(), usable.end(), rng);
    if (usable.size() > count) {
        usable.resize(count);
    }
    double worst = 0.0;
    for (const auto& c : usable) {
        fm::AdapterSet perturbed = adapter;
        coord_ref(perturbed, c) += eps;
        const double up = loss_fn(perturbed);
        coord_ref(perturbed, c) -= 2.0 * eps;
        const double down = loss_fn(perturbed);
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = coord_grad(grads, c);
        const double rel = std::fabs(numeric - analytic) /
                           std::max(std::fabs(analytic), std::fabs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

// Reference AdamW (decoupled weight decay), elementwise over a flat vector.
struct AdamwRef {
    std::vector<double> m, v;
    uint64_t t = 0;

    void step(std::vector<double>& theta, const std::vector<double>& g, double lr, double beta1,
              double beta2, double eps, double weight_decay) {
        if (m.empty()) {
            m.assign(theta.size(), 0.0);
            v.assign(theta.size(), 0.0);
        }
        ++t;
        for (size_t i = 0; i < theta.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / (1.0 - std::pow(beta1, static_cast<double>(t)));
            const double vhat = v[i] / (1.0 - std::pow(beta2, static_cast<double>(t)));
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * theta[i]);
        }
    }
};

}  // namespace oracles
