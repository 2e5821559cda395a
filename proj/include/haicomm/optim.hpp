#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "haicomm/rng.hpp"
#include "haicomm/tensor.hpp"

namespace haicomm {

// Named, ordered collection of trainable leaves. Registration order is the
// serialization order.
template <typename T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<T>> tensors;

    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        names.push_back(name);
        tensors.push_back(std::move(t));
        return tensors.back();
    }

    void append(const ParamSet& other, const std::string& prefix) {
        for (std::size_t i = 0; i < other.names.size(); ++i) {
            names.push_back(prefix + other.names[i]);
            tensors.push_back(other.tensors[i]);
        }
    }

    std::size_t size() const { return tensors.size(); }

    void zero_grad() {
        for (auto& t : tensors) t.zero_grad();
    }

    void scale_grads(T f) {
        for (auto& t : tensors) {
            if (!t.has_grad()) continue;
            auto& g = const_cast<std::vector<T>&>(t.grad());
            for (auto& v : g) v *= f;
        }
    }

    const Tensor<T>* find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return &tensors[i];
        return nullptr;
    }

    // Snapshot / restore of raw values (grads and optimizer state untouched).
    std::vector<std::vector<T>> snapshot() const {
        std::vector<std::vector<T>> out;
        out.reserve(tensors.size());
        for (const auto& t : tensors) out.push_back(t.data());
        return out;
    }

    void restore(const std::vector<std::vector<T>>& snap) {
        for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i].data() = snap[i];
    }
};

template <typename T>
Tensor<T> make_param(Shape shape, Rng& rng, T stddev) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> make_param_const(Shape shape, T value) {
    return Tensor<T>::full(std::move(shape), value, true);
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW with bias correction and decoupled weight decay. State rows follow the
// ParamSet order; step() is deterministic given parameters, grads and lr.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamSet<T>& params, T lr) {
        if (state_.empty()) {
            state_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                state_[i].m.assign(params.tensors[i].numel(), T(0));
                state_[i].v.assign(params.tensors[i].numel(), T(0));
            }
        }
        ++t_;
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, t_));
        const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, t_));
        const T eps = static_cast<T>(cfg_.eps);
        const T wd = static_cast<T>(cfg_.weight_decay);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params.tensors[i];
            auto& st = state_[i];
            const bool has_g = p.has_grad();
            for (std::size_t k = 0; k < p.numel(); ++k) {
                const T g = has_g ? p.grad()[k] : T(0);
                if (!std::isfinite(g))
                    throw NumericError("adamw: non-finite gradient in parameter '" + params.names[i] +
                                       "' at element " + std::to_string(k));
                st.m[k] = b1 * st.m[k] + (T(1) - b1) * g;
                st.v[k] = b2 * st.v[k] + (T(1) - b2) * g * g;
                const T mhat = st.m[k] / bc1;
                const T vhat = st.v[k] / bc2;
                p.data()[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p.data()[k]);
            }
        }
    }

    std::int64_t steps() const { return t_; }

private:
    struct State {
        std::vector<T> m, v;
    };
    AdamWConfig cfg_;
    std::vector<State> state_;
    std::int64_t t_ = 0;
};

// Linear warmup over the first warmup_epochs, then cosine decay to zero at
// total_epochs. `step` is an epoch index (fractional values allowed).
inline double cosine_annealing_lr(double step, double warmup_epochs, double total_epochs,
                                  double base_lr) {
    if (total_epochs <= 0) throw ConfigError("cosine_annealing_lr: total_epochs must be positive");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
        throw ConfigError("cosine_annealing_lr: warmup must lie in [0, total)");
    if (step < 0) step = 0;
    if (warmup_epochs > 0 && step < warmup_epochs) return base_lr * (step + 1.0) / warmup_epochs;
    if (step >= total_epochs) return 0.0;
    const double t = (step - warmup_epochs) / (total_epochs - warmup_epochs);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace haicomm
