#pragma once

#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dpgan/nn.hpp"

namespace dpgan {

struct GradcheckOptions {
    double step = 1e-5;      // central-difference half step
    double rel_tol = 1e-4;
    double abs_floor = 1e-7;  // |analytic - numeric| below this always passes
    int max_probes = 48;      // coordinates probed per input tensor
};

struct GradcheckInputReport {
    std::string name;
    double max_rel = 0.0;
    double max_abs = 0.0;
    std::int64_t probes = 0;
};

struct GradcheckReport {
    std::string name;
    bool pass = true;
    double max_rel = 0.0;
    std::vector<GradcheckInputReport> inputs;
};

// One differentiation check: `fn` builds the computation on the given tape
// from the supplied input leaves; module parameters listed in `params` are
// bound by `fn` itself and perturbed in place for the numeric side.
struct GradcheckCase {
    std::string name;
    std::vector<std::pair<std::string, Tensor>> inputs;
    std::vector<std::pair<std::string, Parameter*>> params;
    std::function<Tensor(Tape&, const std::vector<Tensor>&)> fn;
};

// Compares reverse-mode gradients against central finite differences of a
// fixed random scalar projection of the output. The numeric side never calls
// backward, so it is an independent oracle for the tape.
inline GradcheckReport gradcheck(GradcheckCase& cs, std::uint64_t seed,
                                 GradcheckOptions opt = {}) {
    Rng rng(mix64(seed, 0x67726164u));

    auto run = [&](Tape& tape) {
        std::vector<Tensor> leaves;
        leaves.reserve(cs.inputs.size());
        for (auto& [name, t] : cs.inputs) leaves.push_back(tape.leaf(t));
        return cs.fn(tape, leaves);
    };

    // Fixed projection with coefficients bounded away from zero, so every
    // output coordinate influences the probed scalar.
    Tensor projection;
    {
        Tape tape;
        Tensor y = run(tape);
        projection = Tensor::zeros(y.shape);
        for (double& v : projection.data)
            v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + rng.uniform());
    }

    auto loss_value = [&]() {
        Tape tape;
        Tensor y = run(tape);
        return sum(mul(y, projection)).scalar();
    };

    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        std::vector<Tensor> leaves;
        for (auto& [name, t] : cs.inputs) leaves.push_back(tape.leaf(t));
        Tensor y = cs.fn(tape, leaves);
        Tensor loss = sum(mul(y, projection));
        tape.backward(loss);
        for (const Tensor& leaf : leaves) analytic.push_back(tape.grad(leaf));
        for (auto& [name, p] : cs.params) analytic.push_back(p->grad(tape));
    }

    GradcheckReport report;
    report.name = cs.name;

    auto probe_tensor = [&](const std::string& name, std::vector<double>& data,
                            const std::vector<double>& grad) {
        GradcheckInputReport ir;
        ir.name = name;
        const std::int64_t n = static_cast<std::int64_t>(data.size());
        std::vector<std::int64_t> coords;
        if (n <= opt.max_probes) {
            coords.resize(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            std::set<std::int64_t> chosen;
            while (static_cast<int>(chosen.size()) < opt.max_probes)
                chosen.insert(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
            coords.assign(chosen.begin(), chosen.end());
        }
        for (std::int64_t c : coords) {
            const double saved = data[static_cast<size_t>(c)];
            data[static_cast<size_t>(c)] = saved + opt.step;
            const double fp = loss_value();
            data[static_cast<size_t>(c)] = saved - opt.step;
            const double fm = loss_value();
            data[static_cast<size_t>(c)] = saved;
            const double numeric = (fp - fm) / (2.0 * opt.step);
            const double a = grad[static_cast<size_t>(c)];
            const double diff = std::abs(a - numeric);
            ir.max_abs = std::max(ir.max_abs, diff);
            if (diff > opt.abs_floor) {
                const double denom = std::max(std::abs(a), std::abs(numeric));
                ir.max_rel = std::max(ir.max_rel, diff / denom);
            }
            ir.probes += 1;
        }
        report.max_rel = std::max(report.max_rel, ir.max_rel);
        report.inputs.push_back(std::move(ir));
    };

    size_t gi = 0;
    for (auto& [name, t] : cs.inputs) probe_tensor(name, t.data, analytic[gi++]);
    for (auto& [name, p] : cs.params) probe_tensor(name, p->value.data, analytic[gi++]);

    report.pass = report.max_rel <= opt.rel_tol;
    return report;
}

}  // namespace dpgan
