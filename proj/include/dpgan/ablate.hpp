#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "dpgan/config.hpp"
#include "dpgan/rf_probe.hpp"

namespace dpgan {

// Mean oracle-segmenter agreement between generated images and their input
// layouts over a dataset.
inline SegMetrics evaluate_generator(Generator& g, const Dataset& data) {
    double acc = 0.0, miou = 0.0;
    for (int i = 0; i < data.count(); ++i) {
        Tape tape;
        const Tensor onehot = one_hot_encode(data.layouts[static_cast<size_t>(i)], data.classes);
        const Tensor img = g.forward(tape, onehot, /*trainable=*/false);
        const SegMetrics m =
            metrics(oracle_segment(img, data.styles), data.layouts[static_cast<size_t>(i)]);
        acc += m.accuracy;
        miou += m.miou;
    }
    SegMetrics out;
    out.accuracy = acc / data.count();
    out.miou = miou / data.count();
    return out;
}

struct AblationRow {
    std::string variant;
    std::int64_t parameters = 0;
    double rf_coverage = 0.0;
    double accuracy_untrained = 0.0;
    double accuracy = 0.0;
    double miou = 0.0;
    double loss_total = 0.0;
    double loss_gan_d = 0.0;
    int steps = 0;
};

// Trains one variant from the shared base config and measures the desk-scale
// analogs: final losses, oracle metrics, parameter count, RF coverage.
inline AblationRow run_ablation_variant(RunConfig base, Ablation variant, const Dataset& data,
                                        int steps) {
    base.ablation = variant;
    base.train.steps = steps;
    base.generator.classes = data.classes;
    base.resolve();
    TrainState state = state_from_config(base);

    AblationRow row;
    row.variant = to_string(variant);
    row.steps = steps;
    row.parameters = state.g.parameter_count();
    row.accuracy_untrained = evaluate_generator(state.g, data).accuracy;

    StepMetrics last;
    for (int i = 0; i < steps; ++i) last = train_step(state, data);
    row.loss_total = last.total;
    row.loss_gan_d = last.loss_gan_d;

    const SegMetrics m = evaluate_generator(state.g, data);
    row.accuracy = m.accuracy;
    row.miou = m.miou;
    row.rf_coverage = probe_receptive_field(state.g, data.size).coverage;
    return row;
}

inline std::vector<AblationRow> run_ablation(const RunConfig& base,
                                             const std::vector<Ablation>& variants,
                                             const Dataset& data, int steps) {
    std::vector<AblationRow> rows;
    rows.reserve(variants.size());
    for (Ablation v : variants) rows.push_back(run_ablation_variant(base, v, data, steps));
    return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::string out =
        "variant   params  rf_cov  acc0    acc     miou    loss_g   loss_d  steps\n";
    char line[160];
    for (const AblationRow& r : rows) {
        std::snprintf(line, sizeof(line), "%-8s %8lld  %.4f  %.4f  %.4f  %.4f  %8.4f %8.4f  %d\n",
                      r.variant.c_str(), static_cast<long long>(r.parameters), r.rf_coverage,
                      r.accuracy_untrained, r.accuracy, r.miou, r.loss_total, r.loss_gan_d,
                      r.steps);
        out += line;
    }
    return out;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const AblationRow& r : rows)
        arr.push_back({{"variant", r.variant},
                       {"parameters", r.parameters},
                       {"rf_coverage", r.rf_coverage},
                       {"accuracy_untrained", r.accuracy_untrained},
                       {"accuracy", r.accuracy},
                       {"miou", r.miou},
                       {"loss_total", r.loss_total},
                       {"loss_gan_d", r.loss_gan_d},
                       {"steps", r.steps}});
    return arr;
}

}  // namespace dpgan
