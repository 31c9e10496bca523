#pragma once

// Four-stage training schedule:
//   warm-up   - A1 steps with the base conv layers frozen
//   Stage A1  - joint SGD on theta_f and the prototypes, heads fixed
//   Stage A2  - projection of each prototype onto its nearest same-type patch
//   Stage A3  - margin head h1 alone, monotone descent on cross-entropy
//   Stage B   - malignancy head h2 alone; afterwards Stage A is locked out
// plus prototype pruning and checkpoint persistence.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protocase/checkpoint.hpp"
#include "protocase/common.hpp"
#include "protocase/dataset.hpp"
#include "protocase/losses.hpp"
#include "protocase/network.hpp"
#include "protocase/rng.hpp"

namespace protocase {

struct TrainSchedule {
    int warmup_epochs = 10;
    int a1_epochs_per_cycle = 10;
    int a3_steps_per_cycle = 100;
    int max_cycles = 5;
    double convergence_tol = 1e-3;
    double lr_joint = 1e-2;
    double lr_h1 = 1e-2;
    double lr_b = 0.05;
    int b_max_iters = 2000;
    double b_weight_clip = 100.0;
    int batch_size = 17;
    std::uint64_t seed = 7;
    // D' batch composition: fine-annotated vs lesion-annotated slots per batch
    // (the 10:75 reading). Set ratio_batches=false for plain shuffled batches.
    bool ratio_batches = true;
    int fine_per_batch = 2;
};

struct ModelConfig {
    ExtractorConfig extractor = ExtractorConfig::desk_default();
    int input_h = 64;
    int input_w = 64;
    int prototypes_per_type = 5;
    double pool_fraction = 0.05;
    double epsilon_sim = 1e-4;
};

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

// Prototypes ~ U[0,1]^C (features are sigmoid-bounded), h1 = +1 on same-type
// connections and -1 elsewhere, h2 zeroed, conv weights variance-scaled
// normal with zero bias.
inline ModelState init_model(const ModelConfig& cfg, Rng& rng) {
    ModelState st;
    st.extractor_cfg = cfg.extractor;
    st.input_h = cfg.input_h;
    st.input_w = cfg.input_w;
    st.pool_fraction = cfg.pool_fraction;
    st.epsilon_sim = cfg.epsilon_sim;

    int in_ch = cfg.extractor.in_channels;
    for (const auto& l : cfg.extractor.layers) {
        if (l.kind != LayerSpec::Kind::Conv) continue;
        const int fan_in = in_ch * l.kernel * l.kernel;
        const double gain = l.act == Activation::ReLU ? 2.0 : 1.0;
        const double stddev = std::sqrt(gain / fan_in);
        auto w = ad::make_tensor({l.out_channels, in_ch, l.kernel, l.kernel}, true);
        for (auto& v : w->data) v = rng.normal(0.0, stddev);
        auto b = ad::make_tensor({l.out_channels}, true);
        st.extractor.push_back({w, b});
        in_ch = l.out_channels;
    }

    const auto geom = st.geometry();
    const int m = kNumMarginTypes * cfg.prototypes_per_type;
    for (int t = 0; t < kNumMarginTypes; ++t) {
        for (int i = 0; i < cfg.prototypes_per_type; ++i) {
            Prototype p;
            p.margin = static_cast<MarginType>(t);
            p.vec = ad::make_tensor({geom.channels}, true);
            for (auto& v : p.vec->data) v = rng.uniform01();
            st.prototypes.push_back(std::move(p));
        }
    }

    st.h1 = ad::make_tensor({kNumMarginTypes, m}, true);
    for (int t = 0; t < kNumMarginTypes; ++t)
        for (int j = 0; j < m; ++j)
            st.h1->data[static_cast<std::size_t>(t) * m + j] =
                static_cast<int>(st.prototypes[j].margin) == t ? 1.0 : -1.0;

    st.pool_k();  // validates k >= 1 for this geometry
    return st;
}

// ---------------------------------------------------------------------------
// training-set view
// ---------------------------------------------------------------------------

struct TrainItem {
    int dataset_index = 0;
    const Sample* sample = nullptr;
    ad::Tensor image;
    int label = 0;
    const Image* mask = nullptr;  // fine mask when present, else lesion mask
    bool has_fine = false;
};

inline std::vector<TrainItem> prepare_items(const Dataset& ds, Split split) {
    std::vector<TrainItem> items;
    for (int i : ds.indices_of(split)) {
        const auto& s = ds.samples[i];
        TrainItem it;
        it.dataset_index = i;
        it.sample = &s;
        it.image = image_to_tensor(s.image);
        it.label = static_cast<int>(s.margin);
        it.has_fine = s.fine_mask.has_value();
        it.mask = it.has_fine ? &*s.fine_mask : &s.lesion_mask;
        items.push_back(std::move(it));
    }
    return items;
}

namespace trainer_detail {

// Batches one epoch of item indices. With ratio composition, each batch holds
// `fine_per_batch` finely annotated samples (cyclic over the fine pool) and
// fills the rest from the non-fine pool; otherwise plain shuffled batches.
class BatchPlan {
public:
    BatchPlan(const std::vector<TrainItem>& items, const TrainSchedule& sched, Rng& rng) {
        std::vector<int> fine, coarse, all;
        for (int i = 0; i < static_cast<int>(items.size()); ++i) {
            all.push_back(i);
            (items[i].has_fine ? fine : coarse).push_back(i);
        }
        const int bs = std::max(1, sched.batch_size);
        if (!sched.ratio_batches || fine.empty() || coarse.empty()) {
            shuffle(all, rng);
            for (std::size_t pos = 0; pos + bs <= all.size(); pos += bs)
                batches_.emplace_back(all.begin() + pos, all.begin() + pos + bs);
            if (batches_.empty() && !all.empty()) batches_.push_back(all);
            return;
        }
        const int nf = std::min(bs - 1, std::max(1, sched.fine_per_batch));
        const int nc = bs - nf;
        shuffle(fine, rng);
        shuffle(coarse, rng);
        std::size_t fpos = 0;
        for (std::size_t pos = 0; pos + nc <= coarse.size(); pos += nc) {
            std::vector<int> b;
            for (int i = 0; i < nf; ++i) {
                if (fpos == fine.size()) {
                    shuffle(fine, rng);
                    fpos = 0;
                }
                b.push_back(fine[fpos++]);
            }
            b.insert(b.end(), coarse.begin() + pos, coarse.begin() + pos + nc);
            batches_.push_back(std::move(b));
        }
        if (batches_.empty()) batches_.push_back(all);
    }

    const std::vector<std::vector<int>>& batches() const { return batches_; }

private:
    std::vector<std::vector<int>> batches_;
};

inline void sgd_step(const ad::Tensor& t, double lr) {
    if (t->grad.empty()) return;
    for (std::size_t i = 0; i < t->numel(); ++i) t->data[i] -= lr * t->grad[i];
}

inline void zero_all(ModelState& st) {
    for (auto& l : st.extractor) {
        l.weight->zero_grad();
        l.bias->zero_grad();
    }
    for (auto& p : st.prototypes) p.vec->zero_grad();
    st.h1->zero_grad();
}

inline void reject_after_stage_b(const ModelState& st, const char* stage) {
    if (st.stage_b_done)
        throw std::logic_error(std::string(stage) +
                               ": no return to Stage A after Stage B has run");
}

}  // namespace trainer_detail

struct TraceRow {
    int cycle = 0;
    std::string stage;
    int epoch = 0;
    double total = 0.0, ce = 0.0, cluster = 0.0, sep = 0.0, fine = 0.0;
};

inline std::string trace_line(const TraceRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g", r.cycle,
                  r.stage.c_str(), r.epoch, r.total, r.ce, r.cluster, r.sep, r.fine);
    return buf;
}

// ---------------------------------------------------------------------------
// Stage A1: joint SGD over theta_f and prototypes (heads fixed)
// ---------------------------------------------------------------------------

struct StageA1Result {
    std::vector<TraceRow> trace;
    double mean_epoch_loss = 0.0;
};

inline StageA1Result stage_a1(ModelState& st, const std::vector<TrainItem>& items,
                              const LossConfig& loss_cfg, const TrainSchedule& sched, Rng& rng,
                              int epochs, bool warmup, int cycle_index) {
    trainer_detail::reject_after_stage_b(st, "stage_a1");
    if (items.empty()) throw DataError("stage_a1: empty training set");

    st.set_requires_grad_extractor(/*base=*/!warmup, /*addon=*/true);
    st.set_requires_grad_prototypes(true);
    st.h1->requires_grad = false;

    StageA1Result result;
    double loss_sum_epochs = 0.0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        trainer_detail::BatchPlan plan(items, sched, rng);
        TraceRow row;
        row.cycle = cycle_index;
        row.stage = warmup ? "warmup" : "a1";
        row.epoch = epoch;
        int n_batches = 0;
        for (const auto& batch_idx : plan.batches()) {
            std::vector<ObjectiveItem> batch;
            for (int i : batch_idx) batch.push_back({items[i].image, items[i].label, items[i].mask});
            ad::Tape tape;
            auto obj = total_objective(tape, batch, st, loss_cfg);
            const double total = ad::scalar_value(obj.total);
            if (!std::isfinite(total)) {
                std::string ids;
                for (int i : batch_idx) ids += items[i].sample->id + " ";
                throw NumericError("stage_a1: non-finite loss (total=" + std::to_string(total) +
                                   " ce=" + std::to_string(obj.ce) +
                                   " cluster=" + std::to_string(obj.cluster) +
                                   " sep=" + std::to_string(obj.sep) +
                                   " fine=" + std::to_string(obj.fine) + ") on batch: " + ids);
            }
            trainer_detail::zero_all(st);
            tape.backward(obj.total);
            for (auto& l : st.extractor) {
                trainer_detail::sgd_step(l.weight, sched.lr_joint);
                trainer_detail::sgd_step(l.bias, sched.lr_joint);
            }
            for (auto& p : st.prototypes) trainer_detail::sgd_step(p.vec, sched.lr_joint);

            row.total += total;
            row.ce += obj.ce;
            row.cluster += obj.cluster;
            row.sep += obj.sep;
            row.fine += obj.fine;
            ++n_batches;
        }
        if (n_batches > 0) {
            row.total /= n_batches;
            row.ce /= n_batches;
            row.cluster /= n_batches;
            row.sep /= n_batches;
            row.fine /= n_batches;
        }
        loss_sum_epochs += row.total;
        result.trace.push_back(std::move(row));
    }
    if (epochs > 0) result.mean_epoch_loss = loss_sum_epochs / epochs;
    st.set_requires_grad_extractor(true, true);
    st.h1->requires_grad = true;
    return result;
}

// ---------------------------------------------------------------------------
// Stage A2: prototype projection
// ---------------------------------------------------------------------------

// Replaces every active prototype with its nearest same-type training patch.
// Ties break to the lowest sample id, then row-major patch index; the winning
// patch is copied bit-exactly so the post-condition distance is exactly zero.
inline void stage_a2_project(ModelState& st, const std::vector<TrainItem>& items) {
    trainer_detail::reject_after_stage_b(st, "stage_a2_project");
    const auto geom = st.geometry();

    std::vector<int> order(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return items[a].sample->id < items[b].sample->id; });

    bool type_seen[kNumMarginTypes] = {false, false, false};
    for (const auto& it : items) type_seen[it.label] = true;
    for (const auto& p : st.prototypes)
        if (p.active && !type_seen[static_cast<int>(p.margin)])
            throw DataError(std::string("stage_a2_project: no training samples of type ") +
                            margin_name(p.margin));

    struct Best {
        double dist = 0.0;
        bool found = false;
        std::string id;
        int row = 0, col = 0;
        std::vector<double> patch;
    };
    std::vector<Best> best(st.prototypes.size());

    ad::Tape quiet(false);
    for (int oi : order) {
        const auto& it = items[oi];
        auto features = extract_features(quiet, st, it.image);
        const std::size_t plane = static_cast<std::size_t>(geom.h) * geom.w;
        for (std::size_t j = 0; j < st.prototypes.size(); ++j) {
            auto& proto = st.prototypes[j];
            if (!proto.active || static_cast<int>(proto.margin) != it.label) continue;
            for (int y = 0; y < geom.h; ++y) {
                for (int x = 0; x < geom.w; ++x) {
                    const std::size_t l = static_cast<std::size_t>(y) * geom.w + x;
                    double d = 0.0;
                    for (int c = 0; c < geom.channels; ++c) {
                        const double diff = features->data[c * plane + l] - proto.vec->data[c];
                        d += diff * diff;
                    }
                    if (!best[j].found || d < best[j].dist) {
                        best[j].found = true;
                        best[j].dist = d;
                        best[j].id = it.sample->id;
                        best[j].row = y;
                        best[j].col = x;
                        best[j].patch.resize(geom.channels);
                        for (int c = 0; c < geom.channels; ++c)
                            best[j].patch[c] = features->data[c * plane + l];
                    }
                }
            }
        }
    }

    for (std::size_t j = 0; j < st.prototypes.size(); ++j) {
        auto& proto = st.prototypes[j];
        if (!proto.active) continue;
        if (!best[j].found) throw DataError("stage_a2_project: no candidate patch for prototype");
        proto.vec->data = best[j].patch;
        proto.has_source = true;
        proto.source_id = best[j].id;
        proto.source_row = best[j].row;
        proto.source_col = best[j].col;
    }
}

// ---------------------------------------------------------------------------
// Stage A3: margin head fine-tuning (convex, monotone by step control)
// ---------------------------------------------------------------------------

namespace trainer_detail {

struct ScoredItem {
    std::vector<double> scores;  // pooled similarity per active prototype
    int label = 0;
};

// theta_f and the prototypes are fixed in A3/B, so per-image similarity
// scores are constants; cache them once.
inline std::vector<ScoredItem> cache_scores(const ModelState& st,
                                            const std::vector<TrainItem>& items) {
    std::vector<ScoredItem> out;
    out.reserve(items.size());
    ad::Tape quiet(false);
    for (const auto& it : items) {
        auto fr = forward(quiet, st, it.image);
        out.push_back({fr.scores->data, it.label});
    }
    return out;
}

// Mean cross-entropy of h1 over cached scores, plus its gradient.
inline double h1_ce_and_grad(const std::vector<double>& w, const std::vector<ScoredItem>& data,
                             const std::vector<int>& cols, int m, std::vector<double>* grad) {
    if (grad) grad->assign(w.size(), 0.0);
    double total = 0.0;
    for (const auto& item : data) {
        double logits[kNumMarginTypes];
        for (int t = 0; t < kNumMarginTypes; ++t) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols.size(); ++c)
                s += w[static_cast<std::size_t>(t) * m + cols[c]] * item.scores[c];
            logits[t] = s;
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : logits) z += std::exp(v - mx);
        total += mx + std::log(z) - logits[item.label];
        if (grad) {
            for (int t = 0; t < kNumMarginTypes; ++t) {
                const double p = std::exp(logits[t] - mx) / z;
                const double coeff = p - (t == item.label ? 1.0 : 0.0);
                for (std::size_t c = 0; c < cols.size(); ++c)
                    (*grad)[static_cast<std::size_t>(t) * m + cols[c]] += coeff * item.scores[c];
            }
        }
    }
    const double n = static_cast<double>(data.size());
    if (grad)
        for (auto& g : *grad) g /= n;
    return total / n;
}

}  // namespace trainer_detail

struct StageA3Result {
    double ce_before = 0.0;
    double ce_after = 0.0;
};

inline StageA3Result stage_a3(ModelState& st, const std::vector<TrainItem>& items,
                              const TrainSchedule& sched) {
    trainer_detail::reject_after_stage_b(st, "stage_a3");
    if (items.empty()) throw DataError("stage_a3: empty training set");

    const auto data = trainer_detail::cache_scores(st, items);
    const auto cols = st.active_prototypes();
    const int m = st.num_prototypes();

    std::vector<double> w = st.h1->data;
    std::vector<double> grad;
    StageA3Result res;
    res.ce_before = trainer_detail::h1_ce_and_grad(w, data, cols, m, nullptr);
    double ce = res.ce_before;
    for (int step = 0; step < sched.a3_steps_per_cycle; ++step) {
        trainer_detail::h1_ce_and_grad(w, data, cols, m, &grad);
        double lr = sched.lr_h1;
        bool accepted = false;
        for (int half = 0; half < 40; ++half) {
            std::vector<double> trial = w;
            for (std::size_t i = 0; i < trial.size(); ++i) trial[i] -= lr * grad[i];
            const double trial_ce = trainer_detail::h1_ce_and_grad(trial, data, cols, m, nullptr);
            if (trial_ce <= ce) {
                w = std::move(trial);
                ce = trial_ce;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if (!accepted) break;  // stationary at this resolution
    }
    st.h1->data = std::move(w);
    res.ce_after = ce;
    return res;
}

// ---------------------------------------------------------------------------
// Stage B: malignancy head (isolated logistic fit)
// ---------------------------------------------------------------------------

struct H2Row {
    double x[kNumMarginTypes] = {0, 0, 0};  // unnormalized margin logits
    int y = 0;                              // malignancy label
};

struct StageBResult {
    double weights[kNumMarginTypes] = {0, 0, 0};
    double shift = 0.0;
    double scale = 1.0;
    double loss = 0.0;
    int iters = 0;
};

// Logistic fit of Prob(mal) = sigmoid((w . x - shift) / scale) by gradient
// descent with backtracking on the mean log-loss; scale is optimized as
// log(scale) to stay positive.
inline StageBResult fit_malignancy_head(const std::vector<H2Row>& rows,
                                        const TrainSchedule& sched) {
    bool has0 = false, has1 = false;
    for (const auto& r : rows) (r.y ? has1 : has0) = true;
    if (!has0 || !has1)
        throw DataError("stage_b: malignancy labels are single-class (degenerate fit)");

    // params: w[0..2], shift, log_scale
    std::vector<double> p = {0.0, 0.0, 0.0, 0.0, 0.0};
    auto eval = [&rows](const std::vector<double>& q, std::vector<double>* grad) {
        if (grad) grad->assign(q.size(), 0.0);
        const double scale = std::exp(q[4]);
        double total = 0.0;
        for (const auto& r : rows) {
            double y_mal = 0.0;
            for (int t = 0; t < kNumMarginTypes; ++t) y_mal += q[t] * r.x[t];
            const double z = (y_mal - q[3]) / scale;
            // log-loss via the numerically safe log1p(exp(.)) forms
            const double ll = r.y ? (z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)))
                                  : (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)));
            total += ll;
            if (grad) {
                const double prob = 1.0 / (1.0 + std::exp(-z));
                const double dz = prob - r.y;
                for (int t = 0; t < kNumMarginTypes; ++t) (*grad)[t] += dz * r.x[t] / scale;
                (*grad)[3] += -dz / scale;
                (*grad)[4] += dz * -z;
            }
        }
        const double n = static_cast<double>(rows.size());
        if (grad)
            for (auto& g : *grad) g /= n;
        return total / n;
    };

    std::vector<double> grad;
    double loss = eval(p, nullptr);
    StageBResult res;
    for (int it = 0; it < sched.b_max_iters; ++it) {
        eval(p, &grad);
        double gn = 0.0;
        for (double g : grad) gn += g * g;
        if (std::sqrt(gn) < 1e-10) break;
        double lr = sched.lr_b;
        bool accepted = false;
        for (int half = 0; half < 40; ++half) {
            std::vector<double> trial = p;
            for (std::size_t i = 0; i < trial.size(); ++i) trial[i] -= lr * grad[i];
            for (int t = 0; t < kNumMarginTypes; ++t)
                trial[t] = std::clamp(trial[t], -sched.b_weight_clip, sched.b_weight_clip);
            const double trial_loss = eval(trial, nullptr);
            if (trial_loss < loss) {
                p = std::move(trial);
                loss = trial_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        res.iters = it + 1;
        if (!accepted) break;
    }

    for (int t = 0; t < kNumMarginTypes; ++t) res.weights[t] = p[t];
    res.shift = p[3];
    res.scale = std::exp(p[4]);
    res.loss = loss;
    return res;
}

// Stage B proper: freezes everything but h2, fits on the margin logits the
// trained network produces, then locks Stage A out for good.
inline StageBResult stage_b(ModelState& st, const std::vector<TrainItem>& items,
                            const TrainSchedule& sched) {
    if (items.empty()) throw DataError("stage_b: empty training set");
    std::vector<H2Row> rows;
    {
        ad::Tape quiet(false);
        for (const auto& it : items) {
            auto fr = forward(quiet, st, it.image);
            H2Row r;
            for (int t = 0; t < kNumMarginTypes; ++t) r.x[t] = fr.logits->data[t];
            r.y = it.sample->malignancy;
            rows.push_back(r);
        }
    }
    const auto fit = fit_malignancy_head(rows, sched);
    for (int t = 0; t < kNumMarginTypes; ++t) st.h2_weights[t] = fit.weights[t];
    st.h2_shift = fit.shift;
    st.h2_scale = fit.scale;
    st.stage_b_done = true;
    return fit;
}

// ---------------------------------------------------------------------------
// pruning (duplicate source / wrong sign)
// ---------------------------------------------------------------------------

struct PruneCriteria {
    bool duplicate_source = true;
    bool wrong_sign = true;
};

struct PruneReport {
    struct Entry {
        int prototype = 0;
        std::string reason;
    };
    std::vector<Entry> removed;
};

// Deactivates (a) prototypes whose projected source duplicates an earlier
// same-type prototype and (b) prototypes whose own-type h1 weight is not
// strictly the largest in their column. Rejects a pruning that would empty a
// margin type.
inline PruneReport prune(ModelState& st, const PruneCriteria& crit = {}) {
    const int m = st.num_prototypes();
    if (crit.duplicate_source)
        for (const auto& p : st.prototypes)
            if (p.active && !p.has_source)
                throw std::invalid_argument("prune: prototypes must be projected (missing source)");

    PruneReport report;
    std::vector<bool> keep(m, true);
    for (int j = 0; j < m; ++j) {
        const auto& p = st.prototypes[j];
        if (!p.active) {
            keep[j] = false;
            continue;
        }
        if (crit.duplicate_source) {
            for (int i = 0; i < j; ++i) {
                const auto& q = st.prototypes[i];
                if (q.active && keep[i] && q.margin == p.margin && q.source_id == p.source_id &&
                    q.source_row == p.source_row && q.source_col == p.source_col) {
                    keep[j] = false;
                    report.removed.push_back({j, "duplicate of prototype " + std::to_string(i) +
                                                     " (source " + p.source_id + ")"});
                    break;
                }
            }
        }
        if (keep[j] && crit.wrong_sign) {
            const int own = static_cast<int>(p.margin);
            const double own_w = st.h1->data[static_cast<std::size_t>(own) * m + j];
            bool strictly_largest = true;
            for (int t = 0; t < kNumMarginTypes; ++t) {
                if (t == own) continue;
                if (st.h1->data[static_cast<std::size_t>(t) * m + j] >= own_w) strictly_largest = false;
            }
            if (!strictly_largest) {
                keep[j] = false;
                report.removed.push_back({j, std::string("own-type weight not strictly largest (") +
                                                 margin_name(p.margin) + ")"});
            }
        }
    }

    int survivors[kNumMarginTypes] = {0, 0, 0};
    for (int j = 0; j < m; ++j)
        if (st.prototypes[j].active && keep[j]) survivors[static_cast<int>(st.prototypes[j].margin)]++;
    for (int t = 0; t < kNumMarginTypes; ++t)
        if (survivors[t] == 0)
            throw std::invalid_argument(std::string("prune: would leave zero prototypes of type ") +
                                        margin_name(static_cast<MarginType>(t)));

    for (int j = 0; j < m; ++j)
        if (st.prototypes[j].active && !keep[j]) st.prototypes[j].active = false;
    return report;
}

// ---------------------------------------------------------------------------
// full schedule
// ---------------------------------------------------------------------------

struct TrainOptions {
    ModelConfig model;
    TrainSchedule schedule;
    LossConfig loss;  // loss.k is overwritten with the model's pool k
    std::string out_dir;            // when set: last.ckpt, final.ckpt, loss_trace.txt
    std::string resume_checkpoint;  // resume from a stage-boundary checkpoint
    int stop_after_cycle = 0;       // >0: stop at that cycle boundary (interruption hook)
};

struct TrainReport {
    int cycles_run = 0;
    bool converged = false;
    bool interrupted = false;
    std::vector<TraceRow> trace;
    double final_cycle_loss = 0.0;
    double stage_b_loss = 0.0;
    double elapsed_seconds = 0.0;
};

inline std::pair<ModelState, TrainReport> train(const TrainOptions& opts, const Dataset& ds) {
    const auto t_start = std::chrono::steady_clock::now();
    auto items = prepare_items(ds, Split::Train);
    if (items.empty()) throw DataError("train: dataset has no training split");

    LossConfig loss_cfg = opts.loss;
    TrainReport report;

    ModelState st;
    Rng rng(opts.schedule.seed);
    TrainProgress progress;
    std::vector<double> loss_history;

    if (!opts.resume_checkpoint.empty()) {
        auto ck = load_checkpoint(opts.resume_checkpoint);
        st = std::move(ck.state);
        progress = ck.progress;
        rng.set_state(ck.rng_state);
        loss_history = std::move(ck.loss_history);
        if (progress.finished) throw ConfigError("train: checkpoint is already a finished run");
    } else {
        st = init_model(opts.model, rng);
    }
    loss_cfg.k = st.pool_k();

    std::ofstream trace_file;
    const bool persist = !opts.out_dir.empty();
    if (persist) {
        std::filesystem::create_directories(opts.out_dir);
        const auto trace_path = std::filesystem::path(opts.out_dir) / "loss_trace.txt";
        trace_file.open(trace_path, std::ios::app);
        if (!trace_file) throw DataError("cannot write loss trace: " + trace_path.string());
        if (opts.resume_checkpoint.empty())
            trace_file << "# cycle,stage,epoch,loss_total,ce,cluster,sep,fine\n";
    }
    auto emit = [&](const std::vector<TraceRow>& rows) {
        for (const auto& r : rows) {
            report.trace.push_back(r);
            if (persist) trace_file << trace_line(r) << "\n";
        }
        if (persist) trace_file.flush();
    };
    auto save_boundary = [&] {
        if (!persist) return;
        Checkpoint ck;
        ck.state = clone(st);
        ck.progress = progress;
        ck.rng_state = rng.state();
        ck.loss_history = loss_history;
        save_checkpoint(ck, (std::filesystem::path(opts.out_dir) / "last.ckpt").string());
    };

    if (!progress.warmup_done) {
        if (opts.schedule.warmup_epochs > 0) {
            auto res = stage_a1(st, items, loss_cfg, opts.schedule, rng, opts.schedule.warmup_epochs,
                                /*warmup=*/true, 0);
            emit(res.trace);
            for (const auto& r : res.trace) loss_history.push_back(r.total);
        }
        progress.warmup_done = true;
        save_boundary();
    }

    while (!progress.converged && progress.next_cycle <= opts.schedule.max_cycles) {
        const int cycle = progress.next_cycle;
        auto a1 = stage_a1(st, items, loss_cfg, opts.schedule, rng, opts.schedule.a1_epochs_per_cycle,
                           /*warmup=*/false, cycle);
        emit(a1.trace);
        for (const auto& r : a1.trace) loss_history.push_back(r.total);

        stage_a2_project(st, items);
        auto a3 = stage_a3(st, items, opts.schedule);
        TraceRow a3row;
        a3row.cycle = cycle;
        a3row.stage = "a3";
        a3row.epoch = 0;
        a3row.total = a3.ce_after;
        a3row.ce = a3.ce_after;
        emit({a3row});

        report.cycles_run = cycle;
        report.final_cycle_loss = a1.mean_epoch_loss;
        if (progress.has_prev_cycle_loss) {
            const double rel = std::abs(progress.prev_cycle_loss - a1.mean_epoch_loss) /
                               std::max(std::abs(progress.prev_cycle_loss), 1e-12);
            if (rel < opts.schedule.convergence_tol) progress.converged = true;
        }
        progress.prev_cycle_loss = a1.mean_epoch_loss;
        progress.has_prev_cycle_loss = true;
        progress.next_cycle = cycle + 1;
        save_boundary();
        if (opts.stop_after_cycle > 0 && cycle >= opts.stop_after_cycle) {
            report.interrupted = true;
            report.elapsed_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
            return {std::move(st), std::move(report)};
        }
    }
    report.converged = progress.converged;

    auto b = stage_b(st, items, opts.schedule);
    report.stage_b_loss = b.loss;
    progress.finished = true;
    save_boundary();
    if (persist) {
        Checkpoint ck;
        ck.state = clone(st);
        ck.progress = progress;
        ck.rng_state = rng.state();
        ck.loss_history = loss_history;
        save_checkpoint(ck, (std::filesystem::path(opts.out_dir) / "final.ckpt").string());
    }
    report.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return {std::move(st), std::move(report)};
}

}  // namespace protocase
