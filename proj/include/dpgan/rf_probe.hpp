#pragma once

#include <string>
#include <vector>

#include "dpgan/gan.hpp"

namespace dpgan {

// Gradient-footprint receptive-field report for one generator variant. The
// probe differentiates channel 0 of the center pixel of the head's pre-image
// feature (the stage the pooling modules feed) with respect to the one-hot
// layout; a position belongs to the footprint when any class channel carries
// |gradient| above the threshold.
struct RfResult {
    std::string variant;
    int size = 0;
    int probe_row = 0, probe_col = 0;
    double coverage = 0.0;
    int bbox_r0 = -1, bbox_r1 = -1, bbox_c0 = -1, bbox_c1 = -1;  // inclusive
    std::vector<std::uint8_t> mask;                              // H x W, row-major

    int bbox_height() const { return bbox_r0 < 0 ? 0 : bbox_r1 - bbox_r0 + 1; }
    int bbox_width() const { return bbox_c0 < 0 ? 0 : bbox_c1 - bbox_c0 + 1; }
};

inline RfResult probe_receptive_field(Generator& g, int size, std::uint64_t layout_seed = 424242,
                                      double threshold = 1e-12) {
    const LayoutMap layout = generate_layout(layout_seed, size, g.cfg.classes);
    Tape tape;
    Tensor onehot = tape.leaf(one_hot_encode(layout, g.cfg.classes));
    // Frozen normalization statistics: the probed Jacobian reflects the
    // conv/pooling connectivity rather than the norm layers' global coupling.
    Tensor feature = g.dpm_feature(tape, onehot, /*trainable=*/false, /*frozen_norm_stats=*/true);

    RfResult r;
    r.variant = to_string(g.cfg.ablation);
    r.size = size;
    r.probe_row = feature.shape.h / 2;
    r.probe_col = feature.shape.w / 2;

    Tensor picker = Tensor::zeros(feature.shape);
    picker.at(0, 0, r.probe_row, r.probe_col) = 1.0;
    tape.backward(sum(mul(feature, picker)));

    const std::vector<double> grad = tape.grad(onehot);
    const int k = g.cfg.classes, h = size, w = size;
    r.mask.assign(static_cast<size_t>(h) * w, 0);
    std::int64_t hits = 0;
    for (int row = 0; row < h; ++row) {
        for (int col = 0; col < w; ++col) {
            bool on = false;
            for (int c = 0; c < k && !on; ++c)
                on = std::abs(grad[static_cast<size_t>((c * h + row)) * w + col]) > threshold;
            if (!on) continue;
            r.mask[static_cast<size_t>(row) * w + col] = 1;
            ++hits;
            r.bbox_r0 = r.bbox_r0 < 0 ? row : r.bbox_r0;
            r.bbox_r1 = row;
            r.bbox_c0 = r.bbox_c0 < 0 ? col : std::min(r.bbox_c0, col);
            r.bbox_c1 = std::max(r.bbox_c1, col);
        }
    }
    r.coverage = static_cast<double>(hits) / static_cast<double>(h * w);
    return r;
}

// Footprint containment: every position lit in `a` is lit in `b`.
inline bool footprint_subset(const RfResult& a, const RfResult& b) {
    if (a.mask.size() != b.mask.size()) return false;
    for (size_t i = 0; i < a.mask.size(); ++i)
        if (a.mask[i] && !b.mask[i]) return false;
    return true;
}

}  // namespace dpgan
