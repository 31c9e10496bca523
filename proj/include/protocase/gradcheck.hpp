#pragma once

// Central finite-difference gradient verification.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "protocase/tensor.hpp"

namespace protocase::ad {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool passed() const { return max_rel_err < tolerance; }
};

// Compares tape gradients of `build_loss` against central differences
// (f(p+eps)-f(p-eps))/(2 eps) for every entry of every named parameter.
// Relative error is |a-n| / max(|a|,|n|,1e-8). `build_loss` must rebuild the
// objective on the given tape each call and be deterministic.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& build_loss,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double eps, double tolerance) {
    if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

    for (const auto& [name, p] : params) p->zero_grad();
    Tape tape;
    Tensor loss = build_loss(tape);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }

    auto eval = [&build_loss]() {
        Tape quiet(false);
        return scalar_value(build_loss(quiet));
    };

    GradCheckReport report;
    report.tolerance = tolerance;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& p = params[pi].second;
        GradCheckEntry entry;
        entry.name = params[pi].first;
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double saved = p->data[i];
            p->data[i] = saved + eps;
            const double fp = eval();
            p->data[i] = saved - eps;
            const double fm = eval();
            p->data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            if (rel >= entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace protocase::ad
