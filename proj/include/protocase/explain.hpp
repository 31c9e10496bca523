#pragma once

// Explanation artifacts: per-case prototype evidence (the forward computation
// itself, reported), class activation visualizations, and prototype
// self-activation views with source crops.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "protocase/common.hpp"
#include "protocase/dataset.hpp"
#include "protocase/image.hpp"
#include "protocase/metrics.hpp"
#include "protocase/network.hpp"
#include "protocase/png_io.hpp"

namespace protocase {

// Image-resolution activation map of one prototype on one image.
inline Image activation_map(const ModelState& state, const Image& image, int prototype) {
    if (prototype < 0 || prototype >= state.num_prototypes())
        throw std::invalid_argument("activation_map: prototype index out of range");
    if (!state.prototypes[prototype].active)
        throw std::invalid_argument("activation_map: prototype " + std::to_string(prototype) +
                                    " is pruned");
    ad::Tape quiet(false);
    auto features = extract_features(quiet, state, image_to_tensor(image));
    auto sim = similarity_map(quiet, features, state.prototypes[prototype].vec, state.epsilon_sim);
    auto up = ad::bilinear_upsample(quiet, sim, image.h, image.w);
    Image out(image.h, image.w);
    out.pix = up->data;
    return out;
}

inline Image min_max_normalize(const Image& im) {
    double lo = im.pix[0], hi = im.pix[0];
    for (double v : im.pix) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Image out(im.h, im.w, 0.0);
    if (hi > lo)
        for (std::size_t i = 0; i < im.size(); ++i) out.pix[i] = (im.pix[i] - lo) / (hi - lo);
    return out;
}

// Similarity-score-weighted average of the type's prototype activation maps,
// min-max normalized to [0,1].
inline Image class_activation_visualization(const ModelState& state, const Image& image,
                                            MarginType type) {
    ad::Tape quiet(false);
    auto features = extract_features(quiet, state, image_to_tensor(image));
    const int k = state.pool_k();
    Image acc(image.h, image.w, 0.0);
    int used = 0;
    for (int j = 0; j < state.num_prototypes(); ++j) {
        const auto& p = state.prototypes[j];
        if (!p.active || p.margin != type) continue;
        auto sim = similarity_map(quiet, features, p.vec, state.epsilon_sim);
        const double score = ad::scalar_value(pool_topk(quiet, sim, k));
        auto up = ad::bilinear_upsample(quiet, sim, image.h, image.w);
        for (std::size_t i = 0; i < acc.size(); ++i) acc.pix[i] += score * up->data[i];
        ++used;
    }
    if (used == 0)
        throw std::invalid_argument(std::string("class_activation_visualization: no active ") +
                                    margin_name(type) + " prototypes");
    return min_max_normalize(acc);
}

// Activation map alpha-blended over the image as a monochrome heat ramp.
inline Image overlay(const Image& image, const Image& map, double alpha = 0.4) {
    if (image.h != map.h || image.w != map.w)
        throw std::invalid_argument("overlay: dimensions mismatch");
    const Image heat = min_max_normalize(map);
    Image out(image.h, image.w);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.pix[i] = (1.0 - alpha) * image.pix[i] + alpha * heat.pix[i];
    return out;
}

struct BoundingBox {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open [y0,y1) x [x0,x1)
};

inline BoundingBox top_region_bbox(const Image& map, double tau) {
    const Image sel = metrics::threshold_top_tau(map, tau);
    BoundingBox bb{map.h, map.w, 0, 0};
    for (int y = 0; y < map.h; ++y)
        for (int x = 0; x < map.w; ++x)
            if (sel.at(y, x) > 0.5) {
                bb.y0 = std::min(bb.y0, y);
                bb.x0 = std::min(bb.x0, x);
                bb.y1 = std::max(bb.y1, y + 1);
                bb.x1 = std::max(bb.x1, x + 1);
            }
    return bb;
}

struct PrototypeView {
    int prototype = 0;
    std::string source_id;
    int source_row = 0, source_col = 0;
    Image source_image;
    Image activation;  // image-resolution map on the source image
    Image self_overlay;
    Image crop;  // region covering the top-tau activation
    BoundingBox bbox;
};

// Self-activation of a projected prototype on its source training image.
inline PrototypeView visualize_prototype(const ModelState& state, int prototype,
                                         const Dataset& ds, double tau = 0.95) {
    if (prototype < 0 || prototype >= state.num_prototypes())
        throw std::invalid_argument("visualize_prototype: index out of range");
    const auto& p = state.prototypes[prototype];
    if (!p.active) throw std::invalid_argument("visualize_prototype: prototype is pruned");
    if (!p.has_source)
        throw std::invalid_argument("visualize_prototype: prototype has no projection source");
    const Sample* src = nullptr;
    for (const auto& s : ds.samples)
        if (s.id == p.source_id) {
            src = &s;
            break;
        }
    if (!src) throw DataError("visualize_prototype: source sample '" + p.source_id +
                              "' missing from dataset");
    PrototypeView v;
    v.prototype = prototype;
    v.source_id = p.source_id;
    v.source_row = p.source_row;
    v.source_col = p.source_col;
    v.source_image = src->image;
    v.activation = activation_map(state, src->image, prototype);
    v.self_overlay = overlay(src->image, v.activation);
    v.bbox = top_region_bbox(v.activation, tau);
    v.crop = crop(src->image, v.bbox.y0, v.bbox.x0, v.bbox.y1 - v.bbox.y0, v.bbox.x1 - v.bbox.x0);
    return v;
}

// ---------------------------------------------------------------------------
// per-case explanation
// ---------------------------------------------------------------------------

struct EvidenceRow {
    int prototype = 0;
    MarginType type = MarginType::Circumscribed;
    double similarity = 0.0;  // pooled score s_j
    double weights[kNumMarginTypes] = {0, 0, 0};
    double contribution = 0.0;  // weight toward the predicted logit times s_j
    Image activation;           // image-resolution map on the explained image
    std::string source_id;      // provenance of the projected prototype
    int source_row = 0, source_col = 0;
};

struct Explanation {
    std::string case_id;
    int true_margin = -1;  // -1 when unknown
    int predicted_margin = 0;
    std::vector<double> margin_logits;
    std::vector<double> margin_probs;
    double malignancy_score = 0.0;
    double malignancy_prob = 0.0;
    std::vector<EvidenceRow> evidence;  // predicted type first, each by s_j desc

    // Recomputes the margin logits from (s_j, weight) pairs in ascending
    // prototype order -- the same accumulation the forward pass performs, so
    // equality is exact.
    std::vector<double> reconstruct_logits() const {
        std::vector<const EvidenceRow*> rows;
        for (const auto& e : evidence) rows.push_back(&e);
        std::sort(rows.begin(), rows.end(),
                  [](const EvidenceRow* a, const EvidenceRow* b) { return a->prototype < b->prototype; });
        std::vector<double> logits(kNumMarginTypes, 0.0);
        for (int t = 0; t < kNumMarginTypes; ++t)
            for (const auto* e : rows) logits[t] += e->weights[t] * e->similarity;
        return logits;
    }
};

inline Explanation explain_case(const ModelState& state, const Sample& sample) {
    ad::Tape quiet(false);
    auto fr = forward(quiet, state, image_to_tensor(sample.image));

    Explanation ex;
    ex.case_id = sample.id;
    ex.true_margin = static_cast<int>(sample.margin);
    ex.predicted_margin = predicted_margin(fr);
    ex.margin_logits = fr.logits->data;
    ex.margin_probs = fr.margin_probs;
    ex.malignancy_score = fr.mal.score;
    ex.malignancy_prob = fr.mal.probability;

    const int m = state.num_prototypes();
    for (std::size_t t = 0; t < fr.active_idx.size(); ++t) {
        const int j = fr.active_idx[t];
        const auto& p = state.prototypes[j];
        EvidenceRow row;
        row.prototype = j;
        row.type = p.margin;
        row.similarity = fr.scores->data[t];
        for (int c = 0; c < kNumMarginTypes; ++c)
            row.weights[c] = state.h1->data[static_cast<std::size_t>(c) * m + j];
        row.contribution = row.weights[ex.predicted_margin] * row.similarity;
        auto up = ad::bilinear_upsample(quiet, fr.maps[t].sim, sample.image.h, sample.image.w);
        row.activation = Image(sample.image.h, sample.image.w);
        row.activation.pix = up->data;
        if (p.has_source) {
            row.source_id = p.source_id;
            row.source_row = p.source_row;
            row.source_col = p.source_col;
        }
        ex.evidence.push_back(std::move(row));
    }

    std::stable_sort(ex.evidence.begin(), ex.evidence.end(),
                     [&](const EvidenceRow& a, const EvidenceRow& b) {
                         const bool ap = static_cast<int>(a.type) == ex.predicted_margin;
                         const bool bp = static_cast<int>(b.type) == ex.predicted_margin;
                         if (ap != bp) return ap;
                         return a.similarity > b.similarity;
                     });
    return ex;
}

// case_<id>/summary.txt + evidence_<rank>.png + cav_<type>.png
inline std::filesystem::path write_case_report(const ModelState& state, const Sample& sample,
                                               const std::string& out_dir, int top_evidence = 3) {
    namespace fs = std::filesystem;
    const Explanation ex = explain_case(state, sample);
    const fs::path dir = fs::path(out_dir) / ("case_" + ex.case_id);
    fs::create_directories(dir);

    std::ofstream f(dir / "summary.txt");
    if (!f) throw DataError("cannot write case summary in " + dir.string());
    f << "case " << ex.case_id << "\n";
    if (ex.true_margin >= 0)
        f << "true_margin " << margin_name(static_cast<MarginType>(ex.true_margin)) << "\n";
    f << "predicted_margin " << margin_name(static_cast<MarginType>(ex.predicted_margin)) << "\n";
    char buf[96];
    for (int t = 0; t < kNumMarginTypes; ++t) {
        std::snprintf(buf, sizeof buf, "%.17g", ex.margin_probs[t]);
        f << "prob_" << margin_name(static_cast<MarginType>(t)) << " " << buf << "\n";
    }
    for (int t = 0; t < kNumMarginTypes; ++t) {
        std::snprintf(buf, sizeof buf, "%.17g", ex.margin_logits[t]);
        f << "logit_" << margin_name(static_cast<MarginType>(t)) << " " << buf << "\n";
    }
    std::snprintf(buf, sizeof buf, "%.17g", ex.malignancy_score);
    f << "malignancy_score " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", ex.malignancy_prob);
    f << "malignancy_prob " << buf << "\n";
    f << "evidence rank,prototype,type,similarity,weight,contribution,source_id,source_row,source_col\n";
    const int shown = std::min<int>(top_evidence, static_cast<int>(ex.evidence.size()));
    for (int r = 0; r < shown; ++r) {
        const auto& e = ex.evidence[r];
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", e.similarity,
                      e.weights[ex.predicted_margin], e.contribution);
        f << "evidence " << (r + 1) << "," << e.prototype << "," << margin_name(e.type) << ","
          << buf << "," << (e.source_id.empty() ? "-" : e.source_id) << "," << e.source_row << ","
          << e.source_col << "\n";
        const Image ov = overlay(sample.image, e.activation);
        png::write_file((dir / ("evidence_" + std::to_string(r + 1) + ".png")).string(),
                        png::encode_gray8(ov.h, ov.w, to_bytes(ov)));
    }
    for (int t = 0; t < kNumMarginTypes; ++t) {
        const auto type = static_cast<MarginType>(t);
        if (state.active_count_of_type(type) == 0) continue;
        const Image cav = class_activation_visualization(state, sample.image, type);
        png::write_file((dir / ("cav_" + std::string(margin_name(type)) + ".png")).string(),
                        png::encode_gray8(cav.h, cav.w, to_bytes(cav)));
    }
    return dir;
}

}  // namespace protocase
