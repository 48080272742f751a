#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "shiftdet/autodiff.hpp"
#include "shiftdet/rng.hpp"
#include "shiftdet/tensor.hpp"

namespace shiftdet {

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;      // accumulated between optimizer steps
    Tensor<T> velocity;  // SGD momentum buffer

    Param(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape), velocity(value.shape) {}
};

template <typename T>
using ParamPtr = std::shared_ptr<Param<T>>;

template <typename T>
ParamPtr<T> make_param(std::string name, Tensor<T> v) {
    return std::make_shared<Param<T>>(std::move(name), std::move(v));
}

/// He-style normal init scaled by fan-in.
template <typename T>
ParamPtr<T> init_param(std::string name, std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
    return make_param<T>(std::move(name), std::move(t));
}

template <typename T>
ParamPtr<T> zero_param(std::string name, std::vector<int> shape) {
    return make_param<T>(std::move(name), Tensor<T>(std::move(shape)));
}

/// Binds shared parameters into one graph: each parameter gets exactly one
/// leaf node per graph, so gradients from all uses accumulate there, and
/// pull_grads() moves them onto the Param in a fixed order. Passing
/// trainable=false yields a constant leaf (no gradient is ever computed),
/// which is how discriminators are frozen during generator steps.
template <typename T>
class GraphParams {
public:
    Var<T> use(const ParamPtr<T>& p, bool trainable = true) {
        auto it = lookup_.find(p.get());
        if (it != lookup_.end()) return entries_[it->second].leaf;
        Var<T> leaf = Var<T>::leaf(p->value, trainable);
        lookup_.emplace(p.get(), entries_.size());
        entries_.push_back({p, leaf});
        return leaf;
    }

    /// param.grad += leaf.grad for every bound parameter, in bind order.
    void pull_grads() {
        for (auto& e : entries_) {
            const auto& g = e.leaf.node()->grad;
            if (g.data.empty()) continue;
            for (std::size_t i = 0; i < g.numel(); ++i) e.param->grad[i] += g[i];
        }
    }

private:
    struct Entry {
        ParamPtr<T> param;
        Var<T> leaf;
    };
    std::vector<Entry> entries_;
    std::unordered_map<const Param<T>*, std::size_t> lookup_;
};

template <typename T>
void zero_grads(const std::vector<ParamPtr<T>>& params) {
    for (auto& p : params) p->grad.fill(T(0));
}

/// Plain SGD with momentum: v = m*v + g; p -= lr*v. A zero gradient leaves
/// the value bit-identical.
template <typename T>
void sgd_step(const std::vector<ParamPtr<T>>& params, double lr, double momentum) {
    for (auto& p : params) {
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            p->velocity[i] = static_cast<T>(momentum) * p->velocity[i] + p->grad[i];
            p->value[i] -= static_cast<T>(lr) * p->velocity[i];
        }
    }
}

/// Scale accumulated gradients so their global L2 norm is at most max_norm.
template <typename T>
double clip_grad_norm(const std::vector<ParamPtr<T>>& params, double max_norm) {
    double sq = 0;
    for (auto& p : params) {
        for (std::size_t i = 0; i < p->grad.numel(); ++i) sq += static_cast<double>(p->grad[i]) * p->grad[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            for (auto& g : p->grad.data) g *= s;
        }
    }
    return norm;
}

/// FNV-1a over the raw parameter bytes; used by the frozen-extractor and
/// gradient-routing audits.
template <typename T>
std::uint64_t params_checksum(const std::vector<ParamPtr<T>>& params) {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& p : params) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.ptr());
        for (std::size_t i = 0; i < p->value.numel() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

template <typename T>
std::vector<Tensor<T>> snapshot_values(const std::vector<ParamPtr<T>>& params) {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p->value);
    return out;
}

template <typename T>
bool values_bit_identical(const std::vector<ParamPtr<T>>& params, const std::vector<Tensor<T>>& snap) {
    if (params.size() != snap.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->value.shape != snap[i].shape) return false;
        if (std::memcmp(params[i]->value.ptr(), snap[i].ptr(), snap[i].numel() * sizeof(T)) != 0) return false;
    }
    return true;
}

}  // namespace shiftdet
