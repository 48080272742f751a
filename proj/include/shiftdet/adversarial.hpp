#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftdet/autodiff.hpp"
#include "shiftdet/pairing.hpp"
#include "shiftdet/params.hpp"
#include "shiftdet/split_pooling.hpp"

namespace shiftdet {

/// Two 3x3 convolutions, global average pooling, then a linear head emitting
/// one logit per item; sigma(logit) is the source-source probability.
template <typename T>
struct ImagePatchDiscriminator {
    int in_channels = 0, hidden = 64;
    ParamPtr<T> conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b;

    static ImagePatchDiscriminator init(int in_channels, Rng& rng, const std::string& prefix, int hidden = 64) {
        ImagePatchDiscriminator d;
        d.in_channels = in_channels;
        d.hidden = hidden;
        d.conv1_w = init_param<T>(prefix + ".conv1.w", {hidden, in_channels, 3, 3}, in_channels * 9, rng);
        d.conv1_b = zero_param<T>(prefix + ".conv1.b", {hidden});
        d.conv2_w = init_param<T>(prefix + ".conv2.w", {hidden, hidden, 3, 3}, hidden * 9, rng);
        d.conv2_b = zero_param<T>(prefix + ".conv2.b", {hidden});
        d.fc_w = init_param<T>(prefix + ".fc.w", {1, hidden}, hidden, rng);
        d.fc_b = zero_param<T>(prefix + ".fc.b", {1});
        return d;
    }

    /// items: (N, in_channels, bins, bins) -> logits (N,)
    Var<T> logits(GraphParams<T>& g, const Var<T>& items, bool trainable) const {
        if (items.value().shape.size() != 4 || items.value().shape[1] != in_channels)
            throw std::invalid_argument("ImagePatchDiscriminator: bad input shape " + shape_str(items.value().shape));
        Var<T> h = relu(conv2d(items, g.use(conv1_w, trainable), g.use(conv1_b, trainable), 1, 1));
        h = relu(conv2d(h, g.use(conv2_w, trainable), g.use(conv2_b, trainable), 1, 1));
        Var<T> z = linear(global_avg_pool(h), g.use(fc_w, trainable), g.use(fc_b, trainable));
        return reshape(z, {items.value().shape[0]});
    }

    std::vector<ParamPtr<T>> params() const { return {conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b}; }
};

/// Multi-way instance discriminator with 2*C outputs; (class i, group g)
/// maps to output index 2*(i-1) + g for g in {0,1}.
template <typename T>
struct InstanceDiscriminator {
    int in_dim = 0, hidden = 128, class_count = 0;
    ParamPtr<T> fc1_w, fc1_b, fc2_w, fc2_b, out_w, out_b;

    static InstanceDiscriminator init(int in_dim, int class_count, Rng& rng, const std::string& prefix,
                                      int hidden = 128) {
        InstanceDiscriminator d;
        d.in_dim = in_dim;
        d.hidden = hidden;
        d.class_count = class_count;
        d.fc1_w = init_param<T>(prefix + ".fc1.w", {hidden, in_dim}, in_dim, rng);
        d.fc1_b = zero_param<T>(prefix + ".fc1.b", {hidden});
        d.fc2_w = init_param<T>(prefix + ".fc2.w", {hidden, hidden}, hidden, rng);
        d.fc2_b = zero_param<T>(prefix + ".fc2.b", {hidden});
        d.out_w = init_param<T>(prefix + ".out.w", {2 * class_count, hidden}, hidden, rng);
        d.out_b = zero_param<T>(prefix + ".out.b", {2 * class_count});
        return d;
    }

    static int output_index(int class_id, PairGroup group) {
        return 2 * (class_id - 1) + (group == PairGroup::source_target ? 1 : 0);
    }

    /// items: (N, in_dim) -> logits (N, 2C); softmax over the 2C outputs.
    Var<T> logits(GraphParams<T>& g, const Var<T>& items, bool trainable) const {
        if (items.value().shape.size() != 2 || items.value().shape[1] != in_dim)
            throw std::invalid_argument("InstanceDiscriminator: bad input shape " + shape_str(items.value().shape));
        Var<T> h = relu(linear(items, g.use(fc1_w, trainable), g.use(fc1_b, trainable)));
        h = relu(linear(h, g.use(fc2_w, trainable), g.use(fc2_b, trainable)));
        return linear(h, g.use(out_w, trainable), g.use(out_b, trainable));
    }

    std::vector<ParamPtr<T>> params() const { return {fc1_w, fc1_b, fc2_w, fc2_b, out_w, out_b}; }
};

struct ScaleSharingPolicy {
    bool shared = true;  // one image discriminator across all three scales
};

/// The discriminators an adaptation run owns. Disabled components allocate
/// nothing; with sharing on, all enabled scale groups route to the same
/// parameter set.
template <typename T>
struct DiscriminatorBank {
    ScaleSharingPolicy policy;
    std::array<std::shared_ptr<ImagePatchDiscriminator<T>>, 3> image{};  // indexed by ScaleGroup, null if off
    std::shared_ptr<InstanceDiscriminator<T>> instance;

    static DiscriminatorBank init(int patch_channels, int instance_dim, int class_count, ScaleSharingPolicy policy,
                                  const std::array<bool, 3>& scales_enabled, bool instance_enabled, Rng& rng) {
        DiscriminatorBank b;
        b.policy = policy;
        if (policy.shared) {
            std::shared_ptr<ImagePatchDiscriminator<T>> shared;
            for (int s = 0; s < 3; ++s) {
                if (!scales_enabled[static_cast<std::size_t>(s)]) continue;
                if (!shared) {
                    shared = std::make_shared<ImagePatchDiscriminator<T>>(
                        ImagePatchDiscriminator<T>::init(patch_channels, rng, "d_image.shared"));
                }
                b.image[static_cast<std::size_t>(s)] = shared;
            }
        } else {
            for (int s = 0; s < 3; ++s) {
                if (!scales_enabled[static_cast<std::size_t>(s)]) continue;
                b.image[static_cast<std::size_t>(s)] =
                    std::make_shared<ImagePatchDiscriminator<T>>(ImagePatchDiscriminator<T>::init(
                        patch_channels, rng, std::string("d_image.") + scale_group_name(static_cast<ScaleGroup>(s))));
            }
        }
        if (instance_enabled) {
            b.instance = std::make_shared<InstanceDiscriminator<T>>(
                InstanceDiscriminator<T>::init(instance_dim, class_count, rng, "d_instance"));
        }
        return b;
    }

    const ImagePatchDiscriminator<T>* image_for(ScaleGroup g) const {
        return image[static_cast<std::size_t>(g)].get();
    }

    /// Unique parameter list (a shared image discriminator appears once).
    std::vector<ParamPtr<T>> params() const {
        std::vector<ParamPtr<T>> out;
        const ImagePatchDiscriminator<T>* last = nullptr;
        for (const auto& d : image) {
            if (!d || d.get() == last) continue;
            for (auto& p : d->params()) out.push_back(p);
            last = d.get();
        }
        if (instance) {
            for (auto& p : instance->params()) out.push_back(p);
        }
        return out;
    }
};

/// Discriminator objective for one scale: -mean log D over group 1
/// (source-source) - mean log(1-D) over group 2 (source-target).
template <typename T>
Var<T> d_image_loss(const ImagePatchDiscriminator<T>& d, GraphParams<T>& g, const PairBatch<T>& g1,
                    const PairBatch<T>& g2, bool trainable_d = true) {
    if (g1.count == 0 || g2.count == 0) return zero_scalar<T>();
    Var<T> z1 = d.logits(g, g1.items, trainable_d);
    Var<T> z2 = d.logits(g, g2.items, trainable_d);
    Var<T> l1 = bce_with_logits(z1, std::vector<double>(static_cast<std::size_t>(g1.count), 1.0));
    Var<T> l2 = bce_with_logits(z2, std::vector<double>(static_cast<std::size_t>(g2.count), 0.0));
    return add(l1, l2);
}

/// Generator objective: the non-saturating label swap of d_image_loss.
/// Gradients flow to the feature producers; the discriminator stays frozen.
template <typename T>
Var<T> g_image_loss(const ImagePatchDiscriminator<T>& d, GraphParams<T>& g, const PairBatch<T>& g1,
                    const PairBatch<T>& g2) {
    if (g1.count == 0 || g2.count == 0) return zero_scalar<T>();
    Var<T> z1 = d.logits(g, g1.items, /*trainable=*/false);
    Var<T> z2 = d.logits(g, g2.items, /*trainable=*/false);
    Var<T> l1 = bce_with_logits(z1, std::vector<double>(static_cast<std::size_t>(g1.count), 0.0));
    Var<T> l2 = bce_with_logits(z2, std::vector<double>(static_cast<std::size_t>(g2.count), 1.0));
    return add(l1, l2);
}

template <typename T>
using InstancePairMap = std::map<int, std::pair<PairBatch<T>, PairBatch<T>>>;

namespace adv_detail {

template <typename T>
Var<T> instance_loss(const InstanceDiscriminator<T>& d, GraphParams<T>& g, const InstancePairMap<T>& pairs,
                     bool trainable_d, bool swap_groups) {
    Var<T> total = zero_scalar<T>();
    for (const auto& [cls, batches] : pairs) {
        const auto& [n1, n2] = batches;
        if (n1.count == 0 || n2.count == 0) continue;
        const int idx1 = InstanceDiscriminator<T>::output_index(cls, PairGroup::source_source);
        const int idx2 = InstanceDiscriminator<T>::output_index(cls, PairGroup::source_target);
        const int t1 = swap_groups ? idx2 : idx1;
        const int t2 = swap_groups ? idx1 : idx2;
        Var<T> z1 = d.logits(g, n1.items, trainable_d);
        Var<T> z2 = d.logits(g, n2.items, trainable_d);
        total = add(total, softmax_cross_entropy(z1, std::vector<int>(static_cast<std::size_t>(n1.count), t1)));
        total = add(total, softmax_cross_entropy(z2, std::vector<int>(static_cast<std::size_t>(n2.count), t2)));
    }
    return total;
}

}  // namespace adv_detail

/// Sum over classes of the 2C-way cross-entropy toward (class, own group).
template <typename T>
Var<T> d_instance_loss(const InstanceDiscriminator<T>& d, GraphParams<T>& g, const InstancePairMap<T>& pairs,
                       bool trainable_d = true) {
    return adv_detail::instance_loss(d, g, pairs, trainable_d, /*swap_groups=*/false);
}

/// Same classes, other group: confuses domains without crossing classes.
template <typename T>
Var<T> g_instance_loss(const InstanceDiscriminator<T>& d, GraphParams<T>& g, const InstancePairMap<T>& pairs) {
    return adv_detail::instance_loss(d, g, pairs, /*trainable_d=*/false, /*swap_groups=*/true);
}

}  // namespace shiftdet
