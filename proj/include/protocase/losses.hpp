#pragma once

// The four training-loss terms and their weighted composition:
//   total = (1/n) sum CE + lc * ClusterCost + ls * SeparationCost + lf * FineLoss
// ClusterCost pulls the k nearest same-type patch distances down,
// SeparationCost (reported negative) pushes the k nearest off-type distances
// up, FineLoss penalizes same-type activation outside the annotation mask at
// image resolution plus any off-type activation at feature resolution.

#include <string>
#include <vector>

#include "protocase/common.hpp"
#include "protocase/image.hpp"
#include "protocase/network.hpp"
#include "protocase/ops.hpp"

namespace protocase {

struct LossConfig {
    double lambda_cluster = 0.8;
    double lambda_sep = 0.08;
    double lambda_fine = 0.001;
    int k = 1;                    // same k as the pooling layer
    bool normalize_fine = false;  // divide each norm by its pixel count
};

inline ad::Tensor cross_entropy_margin(ad::Tape& tape, const ad::Tensor& logits, int label) {
    return ad::softmax_cross_entropy(tape, logits, label);
}

struct LabeledFeatures {
    ad::Tensor features;  // [C, H_f, W_f]
    int label = 0;        // margin type index
};

namespace detail {

// mean over the k smallest squared patch-prototype distances, then min over
// the prototype subset selected by `same_type`.
inline ad::Tensor min_over_protos_mink(ad::Tape& tape, const ad::Tensor& features, int label,
                                       const ModelState& state, int k, bool same_type,
                                       const char* what) {
    std::vector<ad::Tensor> per_proto;
    for (int j = 0; j < state.num_prototypes(); ++j) {
        const auto& p = state.prototypes[j];
        if (!p.active) continue;
        if ((static_cast<int>(p.margin) == label) != same_type) continue;
        auto dist = ad::prototype_distance_map(tape, features, p.vec);
        per_proto.push_back(ad::mink_mean(tape, dist, k));
    }
    if (per_proto.empty())
        throw std::invalid_argument(std::string(what) + ": no active " +
                                    (same_type ? "same-type" : "off-type") +
                                    " prototypes for label " + std::to_string(label));
    return ad::min_element(tape, ad::stack_scalars(tape, per_proto));
}

}  // namespace detail

// Eq. ClusterCost: (1/n) sum_i min_{same-type j} meank smallest d(z, p_j).
inline ad::Tensor cluster_cost(ad::Tape& tape, const std::vector<LabeledFeatures>& batch,
                               const ModelState& state, int k) {
    if (batch.empty()) throw std::invalid_argument("cluster_cost: empty batch");
    ad::Tensor acc;
    for (const auto& item : batch) {
        auto v = detail::min_over_protos_mink(tape, item.features, item.label, state, k,
                                              /*same_type=*/true, "cluster_cost");
        acc = acc ? ad::add(tape, acc, v) : v;
    }
    return ad::div_scalar(tape, acc, static_cast<double>(batch.size()));
}

// Eq. SeparationCost: the same quantity over off-type prototypes, negated;
// the returned value is <= 0 and enters the objective with a positive weight.
inline ad::Tensor separation_cost(ad::Tape& tape, const std::vector<LabeledFeatures>& batch,
                                  const ModelState& state, int k) {
    if (batch.empty()) throw std::invalid_argument("separation_cost: empty batch");
    ad::Tensor acc;
    for (const auto& item : batch) {
        auto v = detail::min_over_protos_mink(tape, item.features, item.label, state, k,
                                              /*same_type=*/false, "separation_cost");
        acc = acc ? ad::add(tape, acc, v) : v;
    }
    return ad::scale(tape, ad::div_scalar(tape, acc, static_cast<double>(batch.size())), -1.0);
}

struct FineItem {
    ad::Tensor features;
    int label = 0;
    const Image* mask = nullptr;  // fine-scale if available, else lesion-scale
};

// Eq. FineLoss, summed (not averaged) over the annotated subset D'.
// Same-type prototypes: L2 norm of the mask-weighted upsampled similarity
// map at image resolution. Off-type prototypes: L2 norm of the raw
// feature-resolution similarity map, exactly as written.
inline ad::Tensor fine_annotation_loss(ad::Tape& tape, const std::vector<FineItem>& batch,
                                       const ModelState& state, int out_h, int out_w,
                                       bool normalize = false) {
    if (batch.empty()) throw std::invalid_argument("fine_annotation_loss: empty batch");
    ad::Tensor acc;
    for (const auto& item : batch) {
        if (item.mask == nullptr)
            throw std::invalid_argument("fine_annotation_loss: sample in D' without a mask");
        if (item.mask->h != out_h || item.mask->w != out_w)
            throw std::invalid_argument("fine_annotation_loss: mask dimensions mismatch");
        auto mask_t = ad::make_tensor({out_h, out_w}, item.mask->pix, false);
        for (int j = 0; j < state.num_prototypes(); ++j) {
            const auto& p = state.prototypes[j];
            if (!p.active) continue;
            auto sim = similarity_map(tape, item.features, p.vec, state.epsilon_sim);
            ad::Tensor term;
            if (static_cast<int>(p.margin) == item.label) {
                auto up = ad::bilinear_upsample(tape, sim, out_h, out_w);
                term = ad::l2_norm(tape, ad::mul(tape, mask_t, up));
                if (normalize) term = ad::scale(tape, term, 1.0 / (static_cast<double>(out_h) * out_w));
            } else {
                term = ad::l2_norm(tape, sim);
                if (normalize) term = ad::scale(tape, term, 1.0 / static_cast<double>(sim->numel()));
            }
            acc = acc ? ad::add(tape, acc, term) : term;
        }
    }
    if (!acc) throw std::invalid_argument("fine_annotation_loss: no active prototypes");
    return acc;
}

struct ObjectiveItem {
    ad::Tensor image;
    int label = 0;
    const Image* mask = nullptr;  // membership in D'; required when lambda_fine > 0
};

struct ObjectiveResult {
    ad::Tensor total;
    double ce = 0.0;
    double cluster = 0.0;
    double sep = 0.0;
    double fine = 0.0;
};

// Full Eq.-style objective over a batch; terms with a zero coefficient are
// skipped entirely so their gradient contribution vanishes exactly.
inline ObjectiveResult total_objective(ad::Tape& tape, const std::vector<ObjectiveItem>& batch,
                                       const ModelState& state, const LossConfig& cfg) {
    if (batch.empty()) throw std::invalid_argument("total_objective: empty batch");

    std::vector<LabeledFeatures> feats;
    feats.reserve(batch.size());
    const auto active = state.active_prototypes();
    const int k_pool = state.pool_k();

    ad::Tensor ce_acc;
    for (const auto& item : batch) {
        auto features = extract_features(tape, state, item.image);
        feats.push_back({features, item.label});
        std::vector<ad::Tensor> pooled;
        pooled.reserve(active.size());
        for (int j : active) {
            auto sim = similarity_map(tape, features, state.prototypes[j].vec, state.epsilon_sim);
            pooled.push_back(pool_topk(tape, sim, k_pool));
        }
        auto scores = ad::stack_scalars(tape, pooled);
        auto logits = margin_logits(tape, state, scores, active);
        auto ce = cross_entropy_margin(tape, logits, item.label);
        ce_acc = ce_acc ? ad::add(tape, ce_acc, ce) : ce;
    }

    ObjectiveResult r;
    ad::Tensor total = ad::div_scalar(tape, ce_acc, static_cast<double>(batch.size()));
    r.ce = ad::scalar_value(total);

    if (cfg.lambda_cluster != 0.0) {
        auto cc = cluster_cost(tape, feats, state, cfg.k);
        r.cluster = ad::scalar_value(cc);
        total = ad::add(tape, total, ad::scale(tape, cc, cfg.lambda_cluster));
    }
    if (cfg.lambda_sep != 0.0) {
        auto sc = separation_cost(tape, feats, state, cfg.k);
        r.sep = ad::scalar_value(sc);
        total = ad::add(tape, total, ad::scale(tape, sc, cfg.lambda_sep));
    }
    if (cfg.lambda_fine != 0.0) {
        std::vector<FineItem> fine_batch;
        for (std::size_t i = 0; i < batch.size(); ++i)
            fine_batch.push_back({feats[i].features, batch[i].label, batch[i].mask});
        auto fl = fine_annotation_loss(tape, fine_batch, state, state.input_h, state.input_w,
                                       cfg.normalize_fine);
        r.fine = ad::scalar_value(fl);
        total = ad::add(tape, total, ad::scale(tape, fl, cfg.lambda_fine));
    }
    r.total = total;
    return r;
}

}  // namespace protocase
