#pragma once

// Independent brute-force reference implementations, test tree only. Each is
// straight-line or nested-loop logic sharing no numerical kernels with the
// library; instances are capped small so exhaustive enumeration stays exact.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracles {

// Mean of the k largest map entries via full sort (value desc, index asc).
inline double topk(const std::vector<double>& map, int k) {
    if (map.size() > 4096) throw std::invalid_argument("oracle_topk: oversized instance");
    std::vector<std::size_t> idx(map.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (map[a] != map[b]) return map[a] > map[b];
        return a < b;
    });
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += map[idx[static_cast<std::size_t>(i)]];
    return s / k;
}

// Mean of the k smallest map entries via full sort (value asc, index asc).
inline double mink(const std::vector<double>& map, int k) {
    std::vector<std::size_t> idx(map.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (map[a] != map[b]) return map[a] < map[b];
        return a < b;
    });
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += map[idx[static_cast<std::size_t>(i)]];
    return s / k;
}

// Squared distances between every patch (column-of-channel layout [C][P])
// and a prototype; channel accumulation ascending.
inline std::vector<double> patch_distances(const std::vector<std::vector<double>>& patches_by_channel,
                                           const std::vector<double>& proto) {
    const std::size_t n_patch = patches_by_channel[0].size();
    std::vector<double> d(n_patch, 0.0);
    for (std::size_t c = 0; c < proto.size(); ++c)
        for (std::size_t l = 0; l < n_patch; ++l) {
            const double diff = patches_by_channel[c][l] - proto[c];
            d[l] += diff * diff;
        }
    return d;
}

struct ClusterSepInstance {
    // features[i] is one image's patch grid by channel: [C][n_patches]
    std::vector<std::vector<std::vector<double>>> features;
    std::vector<int> labels;
    std::vector<std::vector<double>> prototypes;
    std::vector<int> proto_labels;
    int k = 1;
};

// Eq.-style cluster and separation cost by exhaustive enumeration.
inline std::pair<double, double> cluster_sep(const ClusterSepInstance& in) {
    const std::size_t n = in.features.size();
    if (n * in.prototypes.size() > 1000)
        throw std::invalid_argument("oracle_cluster_sep: oversized instance");
    double cluster_sum = 0.0, sep_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double best_same = 0.0, best_off = 0.0;
        bool seen_same = false, seen_off = false;
        for (std::size_t j = 0; j < in.prototypes.size(); ++j) {
            const double v = mink(patch_distances(in.features[i], in.prototypes[j]), in.k);
            if (in.proto_labels[j] == in.labels[i]) {
                if (!seen_same || v < best_same) best_same = v;
                seen_same = true;
            } else {
                if (!seen_off || v < best_off) best_off = v;
                seen_off = true;
            }
        }
        if (!seen_same || !seen_off) throw std::invalid_argument("oracle: missing prototype class");
        cluster_sum += best_same;
        sep_sum += best_off;
    }
    const double nn = static_cast<double>(n);
    return {cluster_sum / nn, -(sep_sum / nn)};
}

// k=1 specialization written as plain min-of-min nested loops.
inline std::pair<double, double> cluster_sep_minmin(const ClusterSepInstance& in) {
    double cluster_sum = 0.0, sep_sum = 0.0;
    for (std::size_t i = 0; i < in.features.size(); ++i) {
        double best_same = 1e300, best_off = 1e300;
        for (std::size_t j = 0; j < in.prototypes.size(); ++j) {
            const auto d = patch_distances(in.features[i], in.prototypes[j]);
            double dmin = d[0];
            for (double v : d) dmin = std::min(dmin, v);
            if (in.proto_labels[j] == in.labels[i]) best_same = std::min(best_same, dmin);
            else best_off = std::min(best_off, dmin);
        }
        cluster_sum += best_same;
        sep_sum += best_off;
    }
    const double nn = static_cast<double>(in.features.size());
    return {cluster_sum / nn, -(sep_sum / nn)};
}

// Pairwise AUROC: wins + half-ties over all positive/negative pairs.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double total = 0.0;
    std::size_t m = 0, n = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        ++m;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j]) total += 1.0;
            else if (scores[i] == scores[j]) total += 0.5;
        }
    }
    for (int l : labels) n += (l == 0) ? 1 : 0;
    return total / (static_cast<double>(m) * static_cast<double>(n));
}

// Corner-aligned bilinear upsampling, written out directly.
inline std::vector<double> upsample(const std::vector<double>& in, int h, int w, int oh, int ow) {
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    const double sy = oh > 1 ? static_cast<double>(h - 1) / (oh - 1) : 0.0;
    const double sx = ow > 1 ? static_cast<double>(w - 1) / (ow - 1) : 0.0;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const double fy = y * sy, fx = x * sx;
            const int y0 = std::min(static_cast<int>(fy), h - 1), x0 = std::min(static_cast<int>(fx), w - 1);
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double wy = fy - y0, wx = fx - x0;
            out[static_cast<std::size_t>(y) * ow + x] =
                (1 - wy) * ((1 - wx) * in[y0 * w + x0] + wx * in[y0 * w + x1]) +
                wy * ((1 - wx) * in[y1 * w + x0] + wx * in[y1 * w + x1]);
        }
    return out;
}

struct FineInstance {
    std::vector<std::vector<std::vector<double>>> features;  // [i][C][n_patches]
    std::vector<int> labels;
    std::vector<std::vector<double>> masks;  // image-resolution, 0=relevant
    std::vector<std::vector<double>> prototypes;
    std::vector<int> proto_labels;
    int feat_h = 0, feat_w = 0, out_h = 0, out_w = 0;
    double eps = 1e-4;
};

// Eq.-style fine-annotation loss: same-type masked-upsampled norms plus
// off-type raw-map norms, summed over the instance.
inline double fine_loss(const FineInstance& in) {
    double total = 0.0;
    for (std::size_t i = 0; i < in.features.size(); ++i) {
        for (int pass = 0; pass < 2; ++pass) {  // same-type first, then off-type
            for (std::size_t j = 0; j < in.prototypes.size(); ++j) {
                const bool same = in.proto_labels[j] == in.labels[i];
                if (same != (pass == 0)) continue;
                const auto d = patch_distances(in.features[i], in.prototypes[j]);
                std::vector<double> sim(d.size());
                for (std::size_t l = 0; l < d.size(); ++l)
                    sim[l] = std::log((d[l] + 1.0) / (d[l] + in.eps));
                double ss = 0.0;
                if (same) {
                    const auto up = upsample(sim, in.feat_h, in.feat_w, in.out_h, in.out_w);
                    for (std::size_t l = 0; l < up.size(); ++l) {
                        const double v = in.masks[i][l] * up[l];
                        ss += v * v;
                    }
                } else {
                    for (double v : sim) ss += v * v;
                }
                total += std::sqrt(ss);
            }
        }
    }
    return total;
}

// Central finite differences over a parameter vector accessed by callbacks.
inline std::vector<double> fd_gradient(const std::function<double()>& eval,
                                       const std::function<double&(std::size_t)>& param,
                                       std::size_t count, double eps) {
    std::vector<double> g(count);
    for (std::size_t i = 0; i < count; ++i) {
        double& p = param(i);
        const double saved = p;
        p = saved + eps;
        const double fp = eval();
        p = saved - eps;
        const double fm = eval();
        p = saved;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

}  // namespace oracles
