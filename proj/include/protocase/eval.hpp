#pragma once

// Model + dataset evaluation: margin AUROCs (per type with DeLong intervals,
// image-weighted overall with bootstrap), accuracy, Cohen's kappa, activation
// precision at lesion and fine scale, and malignancy AUROC. Also the external
// attention-map path, which scores supplied saliency maps with the same
// activation-precision machinery.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "protocase/common.hpp"
#include "protocase/dataset.hpp"
#include "protocase/explain.hpp"
#include "protocase/metrics.hpp"
#include "protocase/network.hpp"

namespace protocase {

struct MetricRow {
    std::string metric;
    double value = 0.0;
    std::optional<double> lo;
    std::optional<double> hi;
    int n = 0;
};

inline std::string metric_line(const MetricRow& r) {
    char buf[64];
    std::string out = r.metric + ",";
    std::snprintf(buf, sizeof buf, "%.6f", r.value);
    out += buf;
    out += ",";
    if (r.lo) {
        std::snprintf(buf, sizeof buf, "%.6f", *r.lo);
        out += buf;
    }
    out += ",";
    if (r.hi) {
        std::snprintf(buf, sizeof buf, "%.6f", *r.hi);
        out += buf;
    }
    out += "," + std::to_string(r.n);
    return out;
}

struct EvalOptions {
    Split split = Split::Test;
    double tau = 0.95;
    int bootstrap_resamples = 5000;
    std::uint64_t bootstrap_seed = 0;
};

namespace eval_detail {

// Deterministic index-sharded parallel loop; results land in caller-owned
// slots so the thread count never changes the outcome.
template <typename Fn>
inline void parallel_for(int n, Fn&& fn) {
    const int threads = std::min(worker_thread_count(), std::max(1, n));
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([=] {
            for (int i = t; i < n; i += threads) fn(i);
        });
    for (auto& th : pool) th.join();
}

struct CaseOutputs {
    std::vector<double> margin_probs;
    int label = 0;
    int predicted = 0;
    double malignancy_prob = 0.0;
    int malignancy_label = 0;
    // activation precision sums over same-type active prototypes (Eq. 7 pairs)
    double ap_lesion_sum = 0.0;
    int ap_lesion_count = 0;
    double ap_fine_sum = 0.0;
    int ap_fine_count = 0;
};

}  // namespace eval_detail

struct EvalResult {
    std::vector<MetricRow> rows;
    double margin_accuracy = 0.0;
    double margin_auroc_weighted = 0.0;
    double ap_lesion = 0.0;
    double ap_fine = 0.0;
    bool has_ap_fine = false;
    double malignancy_auroc = 0.0;
    double kappa = 0.0;
};

inline EvalResult evaluate(const ModelState& state, const Dataset& ds, const EvalOptions& opts = {}) {
    const auto idx = ds.indices_of(opts.split);
    if (idx.empty()) throw DataError("evaluate: split has no samples");

    std::vector<eval_detail::CaseOutputs> outs(idx.size());
    eval_detail::parallel_for(static_cast<int>(idx.size()), [&](int i) {
        const auto& sample = ds.samples[idx[static_cast<std::size_t>(i)]];
        ad::Tape quiet(false);
        auto fr = forward(quiet, state, image_to_tensor(sample.image));
        auto& o = outs[static_cast<std::size_t>(i)];
        o.margin_probs = fr.margin_probs;
        o.label = static_cast<int>(sample.margin);
        o.predicted = predicted_margin(fr);
        o.malignancy_prob = fr.mal.probability;
        o.malignancy_label = sample.malignancy;
        for (std::size_t t = 0; t < fr.active_idx.size(); ++t) {
            const auto& proto = state.prototypes[fr.active_idx[t]];
            if (static_cast<int>(proto.margin) != o.label) continue;  // Eq. 5 validity
            auto up = ad::bilinear_upsample(quiet, fr.maps[t].sim, sample.image.h, sample.image.w);
            Image map(sample.image.h, sample.image.w);
            map.pix = up->data;
            o.ap_lesion_sum += metrics::activation_precision(map, sample.lesion_mask, opts.tau);
            o.ap_lesion_count += 1;
            if (sample.fine_mask) {
                o.ap_fine_sum += metrics::activation_precision(map, *sample.fine_mask, opts.tau);
                o.ap_fine_count += 1;
            }
        }
    });

    EvalResult res;
    const int n = static_cast<int>(outs.size());

    std::vector<int> pred(outs.size()), truth(outs.size());
    std::vector<std::vector<double>> probs(outs.size());
    for (std::size_t i = 0; i < outs.size(); ++i) {
        pred[i] = outs[i].predicted;
        truth[i] = outs[i].label;
        probs[i] = outs[i].margin_probs;
    }

    res.margin_accuracy = metrics::accuracy(pred, truth);
    res.rows.push_back({"margin_accuracy", res.margin_accuracy, {}, {}, n});

    const auto wa = metrics::image_weighted_auroc(probs, truth, kNumMarginTypes);
    res.margin_auroc_weighted = wa.weighted;
    {
        auto stat = [&](const std::vector<int>& ridx) -> std::optional<double> {
            std::vector<std::vector<double>> ps;
            std::vector<int> ls;
            ps.reserve(ridx.size());
            for (int i : ridx) {
                ps.push_back(probs[static_cast<std::size_t>(i)]);
                ls.push_back(truth[static_cast<std::size_t>(i)]);
            }
            try {
                return metrics::image_weighted_auroc(ps, ls, kNumMarginTypes).weighted;
            } catch (const std::invalid_argument&) {
                return std::nullopt;  // resample lost a class
            }
        };
        const auto ci =
            metrics::bootstrap_ci(n, stat, opts.bootstrap_resamples, 0.95, opts.bootstrap_seed);
        res.rows.push_back({"margin_auroc_weighted", wa.weighted, ci.lo, ci.hi, n});
    }
    for (int t = 0; t < kNumMarginTypes; ++t) {
        metrics::ScoredLabels d;
        for (std::size_t i = 0; i < outs.size(); ++i) {
            d.scores.push_back(probs[i][t]);
            d.labels.push_back(truth[i] == t ? 1 : 0);
        }
        const auto ci = metrics::delong_ci(d);
        res.rows.push_back({std::string("margin_auroc_") + margin_name(static_cast<MarginType>(t)),
                            ci.auroc, ci.lo, ci.hi, n});
    }

    res.kappa = metrics::cohen_kappa(pred, truth);
    {
        auto stat = [&](const std::vector<int>& ridx) -> std::optional<double> {
            std::vector<int> p, g;
            for (int i : ridx) {
                p.push_back(pred[static_cast<std::size_t>(i)]);
                g.push_back(truth[static_cast<std::size_t>(i)]);
            }
            try {
                return metrics::cohen_kappa(p, g);
            } catch (const std::invalid_argument&) {
                return std::nullopt;
            }
        };
        const auto ci =
            metrics::bootstrap_ci(n, stat, opts.bootstrap_resamples, 0.95, opts.bootstrap_seed);
        res.rows.push_back({"cohen_kappa", res.kappa, ci.lo, ci.hi, n});
    }

    // Activation precision over valid (image, prototype) pairs, Eq. 7 with
    // skipped off-type pairs and the divisor adjusted accordingly.
    {
        double s = 0.0;
        int c = 0;
        for (const auto& o : outs) {
            s += o.ap_lesion_sum;
            c += o.ap_lesion_count;
        }
        if (c > 0) {
            res.ap_lesion = s / c;
            auto stat = [&](const std::vector<int>& ridx) -> std::optional<double> {
                double rs = 0.0;
                int rc = 0;
                for (int i : ridx) {
                    rs += outs[static_cast<std::size_t>(i)].ap_lesion_sum;
                    rc += outs[static_cast<std::size_t>(i)].ap_lesion_count;
                }
                if (rc == 0) return std::nullopt;
                return rs / rc;
            };
            const auto ci =
                metrics::bootstrap_ci(n, stat, opts.bootstrap_resamples, 0.95, opts.bootstrap_seed);
            res.rows.push_back({"ap_lesion", res.ap_lesion, ci.lo, ci.hi, c});
        }
        double fs = 0.0;
        int fc = 0;
        for (const auto& o : outs) {
            fs += o.ap_fine_sum;
            fc += o.ap_fine_count;
        }
        if (fc > 0) {
            res.ap_fine = fs / fc;
            res.has_ap_fine = true;
            auto stat = [&](const std::vector<int>& ridx) -> std::optional<double> {
                double rs = 0.0;
                int rc = 0;
                for (int i : ridx) {
                    rs += outs[static_cast<std::size_t>(i)].ap_fine_sum;
                    rc += outs[static_cast<std::size_t>(i)].ap_fine_count;
                }
                if (rc == 0) return std::nullopt;
                return rs / rc;
            };
            const auto ci =
                metrics::bootstrap_ci(n, stat, opts.bootstrap_resamples, 0.95, opts.bootstrap_seed);
            res.rows.push_back({"ap_fine", res.ap_fine, ci.lo, ci.hi, fc});
        }
    }

    {
        metrics::ScoredLabels d;
        for (const auto& o : outs) {
            d.scores.push_back(o.malignancy_prob);
            d.labels.push_back(o.malignancy_label);
        }
        bool has0 = false, has1 = false;
        for (int y : d.labels) (y ? has1 : has0) = true;
        if (has0 && has1) {
            const auto ci = metrics::delong_ci(d);
            res.malignancy_auroc = ci.auroc;
            res.rows.push_back({"malignancy_auroc", ci.auroc, ci.lo, ci.hi, n});
        }
    }
    return res;
}

// Activation precision for externally supplied attention maps (one grayscale
// PNG per sample id); the map replaces the prototype activation map.
inline std::vector<MetricRow> evaluate_external_maps(const Dataset& ds, Split split,
                                                     const std::string& maps_dir, double tau = 0.95) {
    namespace fs = std::filesystem;
    double lesion_sum = 0.0, fine_sum = 0.0;
    int lesion_n = 0, fine_n = 0;
    for (int i : ds.indices_of(split)) {
        const auto& s = ds.samples[i];
        const fs::path path = fs::path(maps_dir) / (s.id + ".png");
        if (!fs::exists(path)) continue;
        const auto g = png::decode_gray8(png::read_file(path.string()), path.string());
        if (g.h != s.image.h || g.w != s.image.w)
            throw DataError("attention map dimensions mismatch: " + path.string());
        const Image map = from_bytes(g.h, g.w, g.pixels);
        lesion_sum += metrics::activation_precision(map, s.lesion_mask, tau);
        lesion_n += 1;
        if (s.fine_mask) {
            fine_sum += metrics::activation_precision(map, *s.fine_mask, tau);
            fine_n += 1;
        }
    }
    if (lesion_n == 0) throw DataError("no attention maps matched split samples in " + maps_dir);
    std::vector<MetricRow> rows;
    rows.push_back({"ap_lesion_external", lesion_sum / lesion_n, {}, {}, lesion_n});
    if (fine_n > 0) rows.push_back({"ap_fine_external", fine_sum / fine_n, {}, {}, fine_n});
    return rows;
}

inline void write_metric_report(const std::vector<MetricRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write metrics report: " + path);
    f << "# metric,value,lo,hi,n\n";
    for (const auto& r : rows) f << metric_line(r) << "\n";
}

}  // namespace protocase
