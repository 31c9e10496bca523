#pragma once

// Evaluation statistics: AUROC (Mann-Whitney, ties count one half) with
// DeLong confidence intervals, image-weighted multi-class AUROC, Cohen's
// kappa, nonparametric bootstrap intervals, and the activation-precision
// interpretability metric.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "protocase/image.hpp"
#include "protocase/rng.hpp"

namespace protocase::metrics {

struct ScoredLabels {
    std::vector<double> scores;
    std::vector<int> labels;  // binary 0/1
};

namespace detail {

inline void check_binary(const ScoredLabels& d) {
    if (d.scores.size() != d.labels.size())
        throw std::invalid_argument("auroc: scores/labels length mismatch");
    bool has0 = false, has1 = false;
    for (int y : d.labels) {
        if (y == 0) has0 = true;
        else if (y == 1) has1 = true;
        else throw std::invalid_argument("auroc: labels must be 0/1");
    }
    if (!has0 || !has1)
        throw std::invalid_argument("auroc: need at least one positive and one negative");
}

// Placement counts of `s` against sorted `others`: (#strictly below, #equal).
// Counts are exact integers so the derived sums stay exact in doubles.
inline std::pair<std::size_t, std::size_t> placement(const std::vector<double>& sorted_others,
                                                     double s) {
    const auto lo = std::lower_bound(sorted_others.begin(), sorted_others.end(), s);
    const auto hi = std::upper_bound(sorted_others.begin(), sorted_others.end(), s);
    return {static_cast<std::size_t>(lo - sorted_others.begin()),
            static_cast<std::size_t>(hi - lo)};
}

}  // namespace detail

// P(score_pos > score_neg) + 0.5 P(tie): exact pairwise win fraction.
inline double auroc(const ScoredLabels& d) {
    detail::check_binary(d);
    std::vector<double> neg;
    std::vector<double> pos;
    for (std::size_t i = 0; i < d.scores.size(); ++i)
        (d.labels[i] ? pos : neg).push_back(d.scores[i]);
    std::sort(neg.begin(), neg.end());
    double total = 0.0;  // multiples of 0.5, exact
    for (double s : pos) {
        const auto [below, equal] = detail::placement(neg, s);
        total += static_cast<double>(below) + 0.5 * static_cast<double>(equal);
    }
    return total / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

struct AurocCi {
    double auroc = 0.0;
    double lo = 0.0;
    double hi = 1.0;
    bool degenerate = false;  // zero DeLong variance: collapsed to a point
};

// Inverse standard normal CDF (Beasley-Springer-Moro).
inline double normal_quantile(double p) {
    if (p <= 0.0 || p >= 1.0) throw std::invalid_argument("normal_quantile: p in (0,1) required");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double dd[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1 - plow;
    double q, r;
    if (p < plow) {
        q = std::sqrt(-2 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1);
    }
    if (p <= phigh) {
        q = p - 0.5;
        r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    }
    q = std::sqrt(-2 * std::log(1 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1);
}

// DeLong variance from per-observation placement values; the point estimate
// is computed through the identical counting path as auroc().
inline AurocCi delong_ci(const ScoredLabels& d, double level = 0.95) {
    detail::check_binary(d);
    if (level <= 0.0 || level >= 1.0) throw std::invalid_argument("delong_ci: bad level");
    std::vector<double> neg, pos;
    for (std::size_t i = 0; i < d.scores.size(); ++i)
        (d.labels[i] ? pos : neg).push_back(d.scores[i]);
    std::vector<double> neg_sorted = neg, pos_sorted = pos;
    std::sort(neg_sorted.begin(), neg_sorted.end());
    std::sort(pos_sorted.begin(), pos_sorted.end());
    const double m = static_cast<double>(pos.size());
    const double n = static_cast<double>(neg.size());

    double total = 0.0;
    std::vector<double> v10(pos.size()), v01(neg.size());
    for (std::size_t i = 0; i < pos.size(); ++i) {
        const auto [below, equal] = detail::placement(neg_sorted, pos[i]);
        const double c = static_cast<double>(below) + 0.5 * static_cast<double>(equal);
        total += c;
        v10[i] = c / n;
    }
    AurocCi res;
    res.auroc = total / (m * n);
    for (std::size_t j = 0; j < neg.size(); ++j) {
        const auto [below, equal] = detail::placement(pos_sorted, neg[j]);
        // fraction of positives strictly above this negative, ties half
        const double above = m - static_cast<double>(below) - static_cast<double>(equal);
        v01[j] = (above + 0.5 * static_cast<double>(equal)) / m;
    }

    double s10 = 0.0, s01 = 0.0;
    for (double v : v10) s10 += (v - res.auroc) * (v - res.auroc);
    for (double v : v01) s01 += (v - res.auroc) * (v - res.auroc);
    const double var = (pos.size() > 1 && neg.size() > 1)
                           ? s10 / (m - 1) / m + s01 / (n - 1) / n
                           : 0.0;
    if (var <= 0.0) {
        res.lo = res.hi = res.auroc;
        res.degenerate = true;
        return res;
    }
    const double z = normal_quantile(0.5 + level / 2.0);
    const double se = std::sqrt(var);
    res.lo = std::max(0.0, res.auroc - z * se);
    res.hi = std::min(1.0, res.auroc + z * se);
    return res;
}

// kappa = (p_o - p_e) / (1 - p_e) over an arbitrary shared label alphabet.
inline double cohen_kappa(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw std::invalid_argument("cohen_kappa: label vectors must be equal nonempty length");
    int maxl = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || truth[i] < 0) throw std::invalid_argument("cohen_kappa: negative label");
        maxl = std::max({maxl, pred[i], truth[i]});
    }
    const int k = maxl + 1;
    std::vector<double> row(k, 0.0), col(k, 0.0);
    double agree = 0.0;
    const double n = static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        row[pred[i]] += 1.0;
        col[truth[i]] += 1.0;
        if (pred[i] == truth[i]) agree += 1.0;
    }
    const double p_o = agree / n;
    double p_e = 0.0;
    for (int t = 0; t < k; ++t) p_e += (row[t] / n) * (col[t] / n);
    if (p_e >= 1.0)
        throw std::invalid_argument("cohen_kappa: expected agreement is 1 (single shared label)");
    return (p_o - p_e) / (1.0 - p_e);
}

struct BootstrapCi {
    double lo = 0.0;
    double hi = 0.0;
    int n_valid = 0;  // resamples where the statistic was defined
};

// Percentile bootstrap: resamples indices 0..n-1 with replacement at full
// sample size. Each resample r draws from its own splitmix-derived stream so
// the result is reproducible and independent of any sharding.
inline BootstrapCi bootstrap_ci(int n, const std::function<std::optional<double>(const std::vector<int>&)>& stat,
                                int n_boot = 5000, double level = 0.95, std::uint64_t seed = 0) {
    if (n <= 0 || n_boot <= 0) throw std::invalid_argument("bootstrap_ci: empty input");
    std::vector<double> stats;
    stats.reserve(static_cast<std::size_t>(n_boot));
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int r = 0; r < n_boot; ++r) {
        Rng rng(seed + (static_cast<std::uint64_t>(r) + 1) * 0x9e3779b97f4a7c15ull);
        for (auto& v : idx) v = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
        if (auto s = stat(idx)) stats.push_back(*s);
    }
    if (stats.empty()) throw std::invalid_argument("bootstrap_ci: statistic undefined on all resamples");
    std::sort(stats.begin(), stats.end());
    const double alpha = 1.0 - level;
    const std::size_t k = stats.size();
    const auto lo_i = static_cast<std::size_t>(std::floor(alpha / 2.0 * (k - 1)));
    const auto hi_i = static_cast<std::size_t>(std::ceil((1.0 - alpha / 2.0) * (k - 1)));
    return {stats[lo_i], stats[hi_i], static_cast<int>(k)};
}

// ---------------------------------------------------------------------------
// activation precision
// ---------------------------------------------------------------------------

// T_tau: the ceil((1-tau) * H * W) largest entries become 1, the rest 0.
// Ties at the cut resolve by row-major index so the selected count is exact.
inline Image threshold_top_tau(const Image& map, double tau) {
    if (tau <= 0.0 || tau >= 1.0) throw std::invalid_argument("threshold_top_tau: tau in (0,1)");
    const std::size_t total = map.size();
    // the 1e-9 guard keeps exact products like 0.05*400 from ceiling to 21
    const auto count = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::ceil((1.0 - tau) * static_cast<double>(total) - 1e-9)));
    std::vector<std::size_t> idx(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (map.pix[a] != map.pix[b]) return map.pix[a] > map.pix[b];
                          return a < b;
                      });
    Image out(map.h, map.w, 0.0);
    for (std::size_t i = 0; i < count; ++i) out.pix[idx[i]] = 1.0;
    return out;
}

// AP = sum[(1 - m) . T_tau(map)] / sum[T_tau(map)]; mask convention
// 0 = relevant. The map must already be at mask resolution.
inline double activation_precision(const Image& map, const Image& mask, double tau = 0.95) {
    if (map.h != mask.h || map.w != mask.w)
        throw std::invalid_argument("activation_precision: map/mask dimensions mismatch");
    const Image sel = threshold_top_tau(map, tau);
    double hit = 0.0, total = 0.0;
    for (std::size_t i = 0; i < sel.size(); ++i) {
        if (sel.pix[i] > 0.5) {
            total += 1.0;
            if (mask.pix[i] < 0.5) hit += 1.0;
        }
    }
    return hit / total;
}

// ---------------------------------------------------------------------------
// multi-class helpers
// ---------------------------------------------------------------------------

struct WeightedAuroc {
    double weighted = 0.0;
    std::vector<double> per_class;
    std::vector<int> class_counts;
};

// One-vs-all AUROC per class, combined by image count (image-weighted mean).
inline WeightedAuroc image_weighted_auroc(const std::vector<std::vector<double>>& class_scores,
                                          const std::vector<int>& labels, int n_classes) {
    WeightedAuroc out;
    out.per_class.resize(n_classes, 0.0);
    out.class_counts.resize(n_classes, 0);
    for (int y : labels) {
        if (y < 0 || y >= n_classes) throw std::invalid_argument("weighted auroc: bad label");
        out.class_counts[y]++;
    }
    double wsum = 0.0;
    for (int t = 0; t < n_classes; ++t) {
        if (out.class_counts[t] == 0 || out.class_counts[t] == static_cast<int>(labels.size()))
            throw std::invalid_argument("weighted auroc: class " + std::to_string(t) +
                                        " is degenerate in this split");
        ScoredLabels d;
        d.scores.reserve(labels.size());
        d.labels.reserve(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            d.scores.push_back(class_scores[i][t]);
            d.labels.push_back(labels[i] == t ? 1 : 0);
        }
        out.per_class[t] = auroc(d);
        out.weighted += out.class_counts[t] * out.per_class[t];
        wsum += out.class_counts[t];
    }
    out.weighted /= wsum;
    return out;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw std::invalid_argument("accuracy: length mismatch");
    double agree = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == truth[i]) agree += 1.0;
    return agree / static_cast<double>(pred.size());
}

}  // namespace protocase::metrics
