#pragma once

// Forward architecture: convolutional feature extractor f (sigmoid-bounded
// output), prototype layer g with the log-distance similarity transform,
// top-k average pooling to one score per prototype, margin head h1 and the
// isolated malignancy head h2.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "protocase/common.hpp"
#include "protocase/image.hpp"
#include "protocase/ops.hpp"
#include "protocase/rng.hpp"
#include "protocase/tensor.hpp"

namespace protocase {

enum class Activation : int { None = 0, ReLU = 1, Sigmoid = 2 };

struct LayerSpec {
    enum class Kind : int { Conv = 0, MaxPool = 1 } kind = Kind::Conv;
    // conv fields
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int padding = 0;
    Activation act = Activation::None;
    bool addon = false;  // belongs to the randomly initialized add-on block (warm-up scope)
    // pool fields
    int pool_window = 2;

    static LayerSpec conv(int out_ch, int k, int pad, Activation a, bool addon_layer = false) {
        LayerSpec s;
        s.kind = Kind::Conv;
        s.out_channels = out_ch;
        s.kernel = k;
        s.padding = pad;
        s.act = a;
        s.addon = addon_layer;
        return s;
    }
    static LayerSpec maxpool(int window) {
        LayerSpec s;
        s.kind = Kind::MaxPool;
        s.pool_window = window;
        return s;
    }
};

struct ExtractorConfig {
    int in_channels = 1;
    std::vector<LayerSpec> layers;

    // Desk-scale stack: 64x64x1 -> 16x16x64, final activation sigmoid so all
    // feature values lie in (0,1). The two trailing 1x1 convolutions are the
    // add-on block that warm-up trains first.
    static ExtractorConfig desk_default() {
        ExtractorConfig c;
        c.layers = {
            LayerSpec::conv(16, 3, 1, Activation::ReLU),
            LayerSpec::conv(16, 3, 1, Activation::ReLU),
            LayerSpec::maxpool(2),
            LayerSpec::conv(32, 3, 1, Activation::ReLU),
            LayerSpec::maxpool(2),
            LayerSpec::conv(64, 1, 0, Activation::ReLU, /*addon=*/true),
            LayerSpec::conv(64, 1, 0, Activation::Sigmoid, /*addon=*/true),
        };
        return c;
    }

    // Tiny stack for gradient checks and micro tests.
    static ExtractorConfig micro(int channels = 8) {
        ExtractorConfig c;
        c.layers = {
            LayerSpec::conv(4, 3, 1, Activation::ReLU),
            LayerSpec::maxpool(2),
            LayerSpec::conv(channels, 1, 0, Activation::ReLU, /*addon=*/true),
            LayerSpec::conv(channels, 1, 0, Activation::Sigmoid, /*addon=*/true),
        };
        return c;
    }
};

struct FeatureGeometry {
    int channels = 0;
    int h = 0;
    int w = 0;
};

inline FeatureGeometry feature_geometry(const ExtractorConfig& cfg, int in_h, int in_w) {
    int c = cfg.in_channels, h = in_h, w = in_w;
    for (const auto& l : cfg.layers) {
        if (l.kind == LayerSpec::Kind::Conv) {
            h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
            w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
            c = l.out_channels;
        } else {
            h /= l.pool_window;
            w /= l.pool_window;
        }
        if (h < 1 || w < 1) throw ConfigError("extractor: spatial dims collapse to zero");
    }
    return {c, h, w};
}

struct ConvParams {
    ad::Tensor weight;  // [out, in, k, k]
    ad::Tensor bias;    // [out]
};

struct Prototype {
    ad::Tensor vec;  // [C]
    MarginType margin = MarginType::Circumscribed;
    bool active = true;
    bool has_source = false;
    std::string source_id;
    int source_row = 0;
    int source_col = 0;
};

struct ModelState {
    ExtractorConfig extractor_cfg;
    std::vector<ConvParams> extractor;  // one entry per conv layer, in order
    std::vector<Prototype> prototypes;
    ad::Tensor h1;  // [3, m]
    double h2_weights[kNumMarginTypes] = {0.0, 0.0, 0.0};
    double h2_shift = 0.0;
    double h2_scale = 1.0;
    double pool_fraction = 0.05;
    double epsilon_sim = 1e-4;
    int input_h = 64;
    int input_w = 64;
    bool stage_b_done = false;

    FeatureGeometry geometry() const {
        return feature_geometry(extractor_cfg, input_h, input_w);
    }

    int pool_k() const {
        const auto g = geometry();
        const int k = static_cast<int>(std::floor(pool_fraction * g.h * g.w));
        if (k < 1) throw ConfigError("pool_fraction yields k < 1");
        return k;
    }

    int num_prototypes() const { return static_cast<int>(prototypes.size()); }

    std::vector<int> active_prototypes() const {
        std::vector<int> idx;
        for (int j = 0; j < num_prototypes(); ++j)
            if (prototypes[j].active) idx.push_back(j);
        return idx;
    }

    int active_count_of_type(MarginType t) const {
        int n = 0;
        for (const auto& p : prototypes)
            if (p.active && p.margin == t) ++n;
        return n;
    }

    void set_requires_grad_extractor(bool base_layers, bool addon_layers) {
        std::size_t conv_idx = 0;
        for (const auto& l : extractor_cfg.layers) {
            if (l.kind != LayerSpec::Kind::Conv) continue;
            const bool rg = l.addon ? addon_layers : base_layers;
            extractor[conv_idx].weight->requires_grad = rg;
            extractor[conv_idx].bias->requires_grad = rg;
            ++conv_idx;
        }
    }
    void set_requires_grad_prototypes(bool rg) {
        for (auto& p : prototypes) p.vec->requires_grad = rg;
    }

    // Named parameter view; the checkpoint writer and gradient checks share it.
    std::vector<std::pair<std::string, ad::Tensor>> named_parameters() {
        std::vector<std::pair<std::string, ad::Tensor>> out;
        std::size_t conv_idx = 0;
        for (std::size_t li = 0; li < extractor_cfg.layers.size(); ++li) {
            if (extractor_cfg.layers[li].kind != LayerSpec::Kind::Conv) continue;
            out.emplace_back("extractor.conv" + std::to_string(conv_idx) + ".weight",
                             extractor[conv_idx].weight);
            out.emplace_back("extractor.conv" + std::to_string(conv_idx) + ".bias",
                             extractor[conv_idx].bias);
            ++conv_idx;
        }
        for (int j = 0; j < num_prototypes(); ++j)
            out.emplace_back("prototype." + std::to_string(j), prototypes[j].vec);
        out.emplace_back("h1.weight", h1);
        return out;
    }
};

// Deep copy; the copy shares no tensor storage with the source.
inline ModelState clone(const ModelState& s) {
    ModelState c = s;
    c.extractor.clear();
    for (const auto& layer : s.extractor)
        c.extractor.push_back({ad::make_tensor(layer.weight->shape, layer.weight->data,
                                               layer.weight->requires_grad),
                               ad::make_tensor(layer.bias->shape, layer.bias->data,
                                               layer.bias->requires_grad)});
    c.prototypes.clear();
    for (const auto& p : s.prototypes) {
        Prototype q = p;
        q.vec = ad::make_tensor(p.vec->shape, p.vec->data, p.vec->requires_grad);
        c.prototypes.push_back(std::move(q));
    }
    c.h1 = ad::make_tensor(s.h1->shape, s.h1->data, s.h1->requires_grad);
    return c;
}

inline ad::Tensor image_to_tensor(const Image& im) {
    return ad::make_tensor({1, im.h, im.w}, im.pix, false);
}

// f(x): runs the convolutional stack; output values lie in (0,1).
inline ad::Tensor extract_features(ad::Tape& tape, const ModelState& state, const ad::Tensor& image) {
    if (image->shape != std::vector<int>{state.extractor_cfg.in_channels, state.input_h, state.input_w})
        throw std::invalid_argument("extract_features: image shape " + ad::shape_str(image->shape) +
                                    " does not match configured input " +
                                    ad::shape_str({state.extractor_cfg.in_channels, state.input_h,
                                                   state.input_w}));
    ad::Tensor x = image;
    std::size_t conv_idx = 0;
    for (const auto& l : state.extractor_cfg.layers) {
        if (l.kind == LayerSpec::Kind::Conv) {
            x = ad::conv2d(tape, x, state.extractor[conv_idx].weight, state.extractor[conv_idx].bias,
                           l.stride, l.padding);
            if (l.act == Activation::ReLU) x = ad::relu(tape, x);
            else if (l.act == Activation::Sigmoid) x = ad::sigmoid(tape, x);
            ++conv_idx;
        } else {
            x = ad::maxpool2d(tape, x, l.pool_window);
        }
    }
    return x;
}

struct ProtoMaps {
    ad::Tensor dist;  // [H_f, W_f] squared L2 distances
    ad::Tensor sim;   // [H_f, W_f] log((d+1)/(d+eps))
};

inline ProtoMaps prototype_maps(ad::Tape& tape, const ad::Tensor& features,
                                const ad::Tensor& proto_vec, double eps) {
    ProtoMaps m;
    m.dist = ad::prototype_distance_map(tape, features, proto_vec);
    m.sim = ad::similarity_from_distance(tape, m.dist, eps);
    return m;
}

inline ad::Tensor similarity_map(ad::Tape& tape, const ad::Tensor& features,
                                 const ad::Tensor& proto_vec, double eps) {
    return prototype_maps(tape, features, proto_vec, eps).sim;
}

// AVGPOOL(topk(.; k)): mean of the k highest similarity values.
inline ad::Tensor pool_topk(ad::Tape& tape, const ad::Tensor& sim_map, int k) {
    return ad::topk_mean(tape, sim_map, k);
}

// h1: margin logits from the similarity scores of the given prototype columns.
inline ad::Tensor margin_logits(ad::Tape& tape, const ModelState& state, const ad::Tensor& scores,
                                const std::vector<int>& cols) {
    return ad::matvec_cols(tape, state.h1, scores, cols);
}

struct MalignancyOutput {
    double score = 0.0;  // y_mal = w . margin_logits
    double probability = 0.0;  // sigma((y_mal - shift) / scale)
};

// h2: the concise linear malignancy model on unnormalized margin logits.
inline MalignancyOutput malignancy(const ModelState& state, const std::vector<double>& logits) {
    if (logits.size() != kNumMarginTypes)
        throw std::invalid_argument("malignancy: expected 3 margin logits");
    MalignancyOutput out;
    for (int t = 0; t < kNumMarginTypes; ++t) out.score += state.h2_weights[t] * logits[t];
    out.probability = 1.0 / (1.0 + std::exp(-(out.score - state.h2_shift) / state.h2_scale));
    return out;
}

struct ForwardResult {
    ad::Tensor features;
    std::vector<int> active_idx;        // prototype indices in play, ascending
    std::vector<ProtoMaps> maps;        // parallel to active_idx
    ad::Tensor scores;                  // [n_active] pooled similarity scores
    ad::Tensor logits;                  // [3]
    std::vector<double> margin_probs;   // softmax of logits
    MalignancyOutput mal;
};

inline ForwardResult forward(ad::Tape& tape, const ModelState& state, const ad::Tensor& image) {
    ForwardResult r;
    r.features = extract_features(tape, state, image);
    r.active_idx = state.active_prototypes();
    if (r.active_idx.empty()) throw std::invalid_argument("forward: no active prototypes");
    const int k = state.pool_k();
    std::vector<ad::Tensor> pooled;
    pooled.reserve(r.active_idx.size());
    for (int j : r.active_idx) {
        r.maps.push_back(prototype_maps(tape, r.features, state.prototypes[j].vec, state.epsilon_sim));
        pooled.push_back(pool_topk(tape, r.maps.back().sim, k));
    }
    r.scores = ad::stack_scalars(tape, pooled);
    r.logits = margin_logits(tape, state, r.scores, r.active_idx);
    r.margin_probs = ad::softmax(r.logits->data);
    r.mal = malignancy(state, r.logits->data);
    return r;
}

inline ForwardResult forward(const ModelState& state, const Image& image) {
    ad::Tape quiet(false);
    return forward(quiet, state, image_to_tensor(image));
}

inline int predicted_margin(const ForwardResult& r) {
    int best = 0;
    for (int t = 1; t < kNumMarginTypes; ++t)
        if (r.margin_probs[t] > r.margin_probs[best]) best = t;
    return best;
}

}  // namespace protocase
