#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "shiftdet/autodiff.hpp"
#include "shiftdet/instance_features.hpp"
#include "shiftdet/rng.hpp"

namespace shiftdet {

enum class PairGroup { source_source, source_target };

/// A discriminator input batch. With pairing on, items are channel-wise
/// concatenations (first member first); with pairing off the trainer routes
/// uncombined features through the same structure.
template <typename T>
struct PairBatch {
    PairGroup group = PairGroup::source_source;
    Var<T> items;
    int count = 0;
    std::optional<int> class_id;  // instance pairs only
};

/// Channel-axis concatenation, order preserving (a fills the first half).
template <typename T>
Var<T> combine(const Var<T>& a, const Var<T>& b) {
    if (a.value().shape != b.value().shape) throw std::invalid_argument("combine: feature shapes must match");
    return concat_channels(a, b);
}

struct PairIndices {
    std::vector<std::pair<int, int>> ss;  // ordered (i, j) with i != j, both source
    std::vector<std::pair<int, int>> st;  // (source, target)
};

/// Index-level pairing: SS pairs are ordered pairs of distinct source
/// indices; ST pairs draw one source and one target uniformly, both with
/// replacement across pairs. Returns empty lists (a skip signal) when the
/// preconditions |source| >= 2, |target| >= 1 fail.
inline PairIndices make_pair_indices(int n_source, int n_target, int n_pairs, Rng& rng) {
    PairIndices out;
    if (n_source < 2 || n_target < 1 || n_pairs < 1) return out;
    for (int k = 0; k < n_pairs; ++k) {
        const int i = rng.uniform_int(0, n_source - 1);
        int j = rng.uniform_int(0, n_source - 2);
        if (j >= i) ++j;  // distinct indices
        out.ss.emplace_back(i, j);
    }
    for (int k = 0; k < n_pairs; ++k) {
        out.st.emplace_back(rng.uniform_int(0, n_source - 1), rng.uniform_int(0, n_target - 1));
    }
    return out;
}

/// Feature-level pairing over pooled (N, ...) blocks. Both returned batches
/// have n_pairs items, or count == 0 when the step must be skipped.
template <typename T>
std::pair<PairBatch<T>, PairBatch<T>> make_pairs(const Var<T>& source_feats, const Var<T>& target_feats,
                                                 int n_pairs, Rng& rng) {
    const int ns = source_feats.defined() ? source_feats.value().shape[0] : 0;
    const int nt = target_feats.defined() ? target_feats.value().shape[0] : 0;
    PairBatch<T> g1, g2;
    g1.group = PairGroup::source_source;
    g2.group = PairGroup::source_target;
    const PairIndices idx = make_pair_indices(ns, nt, n_pairs, rng);
    if (idx.ss.empty()) return {g1, g2};

    std::vector<int> a1, b1, a2, b2;
    for (const auto& [i, j] : idx.ss) {
        a1.push_back(i);
        b1.push_back(j);
    }
    for (const auto& [s, t] : idx.st) {
        a2.push_back(s);
        b2.push_back(t);
    }
    g1.items = combine(rows_select(source_feats, a1), rows_select(source_feats, b1));
    g1.count = n_pairs;
    g2.items = combine(rows_select(source_feats, a2), rows_select(target_feats, b2));
    g2.count = n_pairs;
    return {g1, g2};
}

/// Unpaired fallback (the pairing ablation): group 1 holds source singles,
/// group 2 target singles, both drawn with replacement.
template <typename T>
std::pair<PairBatch<T>, PairBatch<T>> make_single_batches(const Var<T>& source_feats, const Var<T>& target_feats,
                                                          int n_items, Rng& rng) {
    const int ns = source_feats.defined() ? source_feats.value().shape[0] : 0;
    const int nt = target_feats.defined() ? target_feats.value().shape[0] : 0;
    PairBatch<T> g1, g2;
    g1.group = PairGroup::source_source;
    g2.group = PairGroup::source_target;
    if (ns < 1 || nt < 1 || n_items < 1) return {g1, g2};
    std::vector<int> a, b;
    for (int k = 0; k < n_items; ++k) a.push_back(rng.uniform_int(0, ns - 1));
    for (int k = 0; k < n_items; ++k) b.push_back(rng.uniform_int(0, nt - 1));
    g1.items = rows_select(source_feats, a);
    g1.count = n_items;
    g2.items = rows_select(target_feats, b);
    g2.count = n_items;
    return {g1, g2};
}

/// Per-class pairing of instance features; classes that lack two source or
/// one target feature are omitted (and excluded from the instance losses for
/// the step).
template <typename T>
std::map<int, std::pair<PairBatch<T>, PairBatch<T>>> make_instance_pairs(const InstanceFeatureSet<T>& source,
                                                                         const InstanceFeatureSet<T>& target,
                                                                         int n_pairs_per_class, Rng& rng,
                                                                         bool paired = true) {
    std::map<int, std::pair<PairBatch<T>, PairBatch<T>>> out;
    for (const auto& [cls, feats] : source.by_class) {
        auto ti = target.by_class.find(cls);
        if (ti == target.by_class.end()) continue;
        auto batches = paired ? make_pairs(feats, ti->second, n_pairs_per_class, rng)
                              : make_single_batches(feats, ti->second, n_pairs_per_class, rng);
        if (batches.first.count == 0) continue;
        batches.first.class_id = cls;
        batches.second.class_id = cls;
        out.emplace(cls, std::move(batches));
    }
    return out;
}

}  // namespace shiftdet
