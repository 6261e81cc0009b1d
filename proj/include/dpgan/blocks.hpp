#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dpgan/nn.hpp"

namespace dpgan {

// Resize to (th, tw): bilinear upsampling where the target enlarges, area
// pooling where it shrinks. Pooled pyramid levels can be larger than the
// feature map at desk scale, so the restore step must go both ways.
inline Tensor resize_spatial(const Tensor& x, int th, int tw) {
    Tensor cur = x;
    const int mh = std::min(th, cur.shape.h), mw = std::min(tw, cur.shape.w);
    if (mh != cur.shape.h || mw != cur.shape.w) cur = adaptive_avg_pool2d(cur, mh, mw);
    if (th != cur.shape.h || tw != cur.shape.w) cur = upsample_bilinear(cur, th, tw);
    return cur;
}

// ---------------------------------------------------------------------------
// Square-shape pooling: n square pyramid levels, each pooled to (t_i, t_i),
// reduced with a 1x1 conv, resized back and concatenated with the input.
// Output channels: n * level_channels + C; for the standard pyramid
// (level_channels = C/4) that is (n/4 + 1) * C.
// ---------------------------------------------------------------------------
struct Spm {
    int in_channels = 0;
    int level_channels = 0;
    std::vector<int> targets;
    std::vector<Conv2d> reducers;

    static Spm pyramid(Rng& rng, int channels, std::vector<int> level_targets = {1, 2, 3, 6}) {
        check(channels % 4 == 0,
              "spm: channels must be divisible by 4, got " + std::to_string(channels));
        return with_level_channels(rng, channels, std::move(level_targets), channels / 4);
    }

    // Relaxed constructor for the RPM-internal pyramid, whose input width
    // C/4 may itself not be divisible by 4.
    static Spm with_level_channels(Rng& rng, int channels, std::vector<int> level_targets,
                                   int level_channels) {
        check(channels >= 1 && level_channels >= 1 && !level_targets.empty(),
              "spm: bad configuration");
        for (int t : level_targets) check(t >= 1, "spm: level target must be positive");
        Spm spm;
        spm.in_channels = channels;
        spm.level_channels = level_channels;
        spm.targets = std::move(level_targets);
        for (size_t i = 0; i < spm.targets.size(); ++i)
            spm.reducers.push_back(Conv2d::make(rng, channels, level_channels, 1, 1, 1, 0, 0, 1.0));
        return spm;
    }

    int out_channels() const {
        return static_cast<int>(targets.size()) * level_channels + in_channels;
    }

    Tensor forward(Tape& tape, const Tensor& f, bool trainable) {
        check(f.shape.c == in_channels, "spm: expected " + std::to_string(in_channels) +
                                            " channels, got " + std::to_string(f.shape.c));
        std::vector<Tensor> parts;
        parts.reserve(targets.size() + 1);
        for (size_t i = 0; i < targets.size(); ++i) {
            Tensor pooled = adaptive_avg_pool2d(f, targets[i], targets[i]);
            Tensor reduced = reducers[i].forward(tape, pooled, trainable);
            parts.push_back(resize_spatial(reduced, f.shape.h, f.shape.w));
        }
        parts.push_back(f);
        return concat_channels(parts);
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        for (size_t i = 0; i < reducers.size(); ++i)
            reducers[i].visit(prefix + ".level" + std::to_string(i), fn);
    }
};

// ---------------------------------------------------------------------------
// Strip pooling: pool to a 1-wide strip, run a 1-D conv along it, expand back.
// Horizontal: (1, W) strip + 1x3 conv; vertical: (H, 1) strip + 3x1 conv.
// ---------------------------------------------------------------------------
struct StripPool {
    bool horizontal = true;
    Conv2d conv;

    static StripPool make(Rng& rng, int channels, bool horizontal) {
        StripPool s;
        s.horizontal = horizontal;
        s.conv = horizontal ? Conv2d::make(rng, channels, channels, 1, 3, 1, 0, 1, 1.0)
                            : Conv2d::make(rng, channels, channels, 3, 1, 1, 1, 0, 1.0);
        return s;
    }

    Tensor forward(Tape& tape, const Tensor& x, bool trainable) {
        Tensor strip = horizontal ? adaptive_avg_pool2d(x, 1, x.shape.w)
                                  : adaptive_avg_pool2d(x, x.shape.h, 1);
        Tensor mixed = conv.forward(tape, strip, trainable);
        return upsample_bilinear(mixed, x.shape.h, x.shape.w);
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) { conv.visit(prefix, fn); }
};

// ---------------------------------------------------------------------------
// Rectangle-shape pooling module. Two 1x1 entry convs split the input into a
// strip path (HRPM + VRPM, summed) and a local path (3x3 conv + internal
// pyramid, summed, then 1x1). The paths are concatenated, mapped back to C
// channels, and joined with the input: RPM-I adds, RPM-II concatenates.
// ---------------------------------------------------------------------------
enum class RpmVariant { AddResidual, ConcatResidual };  // RPM-I / RPM-II

struct Rpm {
    RpmVariant variant = RpmVariant::AddResidual;
    int channels = 0;
    Conv2d entry_strip, entry_local;
    StripPool hpool, vpool;
    Conv2d local;
    Spm inner_spm;
    Conv2d fuse_local, fuse_joint;

    static Rpm make(Rng& rng, int channels, RpmVariant variant,
                    std::vector<int> inner_targets = {12, 20}) {
        check(channels % 4 == 0,
              "rpm: channels must be divisible by 4, got " + std::to_string(channels));
        Rpm r;
        r.variant = variant;
        r.channels = channels;
        const int quarter = channels / 4;
        r.entry_strip = Conv2d::make(rng, channels, quarter, 1, 1, 1, 0, 0, 1.0);
        r.entry_local = Conv2d::make(rng, channels, quarter, 1, 1, 1, 0, 0, 1.0);
        r.hpool = StripPool::make(rng, quarter, true);
        r.vpool = StripPool::make(rng, quarter, false);
        r.inner_spm = Spm::with_level_channels(rng, quarter, std::move(inner_targets),
                                               std::max(1, quarter / 4));
        r.local = Conv2d::make(rng, quarter, r.inner_spm.out_channels(), 3, 3, 1, 1, 1, 1.0);
        r.fuse_local = Conv2d::make(rng, r.inner_spm.out_channels(), quarter, 1, 1, 1, 0, 0, 1.0);
        r.fuse_joint = Conv2d::make(rng, 2 * quarter, channels, 1, 1, 1, 0, 0, 1.0);
        return r;
    }

    int out_channels() const {
        return variant == RpmVariant::AddResidual ? channels : 2 * channels;
    }

    Tensor forward(Tape& tape, const Tensor& f, bool trainable) {
        check(f.shape.c == channels, "rpm: expected " + std::to_string(channels) +
                                         " channels, got " + std::to_string(f.shape.c));
        Tensor s1 = entry_strip.forward(tape, f, trainable);
        Tensor strips = add(hpool.forward(tape, s1, trainable), vpool.forward(tape, s1, trainable));

        Tensor s2 = entry_local.forward(tape, f, trainable);
        Tensor local_mix =
            add(local.forward(tape, s2, trainable), inner_spm.forward(tape, s2, trainable));
        Tensor local_out = fuse_local.forward(tape, local_mix, trainable);

        Tensor joint = fuse_joint.forward(tape, concat_channels({local_out, strips}), trainable);
        return variant == RpmVariant::AddResidual ? add(joint, f)
                                                  : concat_channels({joint, f});
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        entry_strip.visit(prefix + ".entry_strip", fn);
        entry_local.visit(prefix + ".entry_local", fn);
        hpool.visit(prefix + ".hrpm", fn);
        vpool.visit(prefix + ".vrpm", fn);
        local.visit(prefix + ".local", fn);
        inner_spm.visit(prefix + ".spm", fn);
        fuse_local.visit(prefix + ".fuse_local", fn);
        fuse_joint.visit(prefix + ".fuse_joint", fn);
    }
};

// ---------------------------------------------------------------------------
// The seven strategies for combining the pyramid and strip branches.
// F-I/F-II fuse at image level (their branch convs produce the pre-tanh
// image); F-III..F-V fuse features from parallel branches; F-VI/F-VII cascade
// the blocks and convert with a final conv.
// ---------------------------------------------------------------------------
enum class FusionStrategy { FI, FII, FIII, FIV, FV, FVI, FVII };

inline const char* to_string(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::FI: return "F-I";
        case FusionStrategy::FII: return "F-II";
        case FusionStrategy::FIII: return "F-III";
        case FusionStrategy::FIV: return "F-IV";
        case FusionStrategy::FV: return "F-V";
        case FusionStrategy::FVI: return "F-VI";
        case FusionStrategy::FVII: return "F-VII";
    }
    return "?";
}

struct DpmFusion {
    FusionStrategy strategy = FusionStrategy::FVII;
    int in_channels = 0;
    int image_channels = 3;

    Spm spm;
    std::vector<Rpm> rpms;  // two blocks; F-III uses RPM-II then RPM-I
    std::optional<Conv2d> to_image_s, to_image_r;  // F-I, F-II
    std::optional<Conv2d> attention;               // F-I mask decoder (2 channels)
    std::optional<Conv2d> project;                 // F-III/F-IV channel projection
    std::optional<Conv2d> final_conv;              // F-III..F-VII to-image conv

    static DpmFusion make(Rng& rng, FusionStrategy strategy, int channels,
                          int image_channels = 3) {
        DpmFusion d;
        d.strategy = strategy;
        d.in_channels = channels;
        d.image_channels = image_channels;
        const int c2 = 2 * channels;

        if (strategy == FusionStrategy::FVI) {
            d.rpms.push_back(Rpm::make(rng, channels, RpmVariant::ConcatResidual));
            d.rpms.push_back(Rpm::make(rng, c2, RpmVariant::ConcatResidual));
            d.spm = Spm::pyramid(rng, 4 * channels);
            d.final_conv = Conv2d::make(rng, d.spm.out_channels(), image_channels, 3, 3, 1, 1, 1, 0.1);
            return d;
        }
        if (strategy == FusionStrategy::FVII) {
            d.spm = Spm::pyramid(rng, channels);
            d.rpms.push_back(Rpm::make(rng, c2, RpmVariant::ConcatResidual));
            d.rpms.push_back(Rpm::make(rng, 2 * c2, RpmVariant::ConcatResidual));
            d.final_conv = Conv2d::make(rng, d.rpms[1].out_channels(), image_channels, 3, 3, 1, 1, 1, 0.1);
            return d;
        }

        // Parallel strategies: both branches read the backbone feature.
        d.spm = Spm::pyramid(rng, channels);
        d.rpms.push_back(Rpm::make(rng, channels, RpmVariant::ConcatResidual));
        const RpmVariant second = strategy == FusionStrategy::FIII ? RpmVariant::AddResidual
                                                                   : RpmVariant::ConcatResidual;
        d.rpms.push_back(Rpm::make(rng, c2, second));
        const int spm_c = d.spm.out_channels();          // 2C
        const int rpm_c = d.rpms[1].out_channels();      // 2C (F-III) or 4C

        switch (strategy) {
            case FusionStrategy::FI:
                d.to_image_s = Conv2d::make(rng, spm_c, image_channels, 3, 3, 1, 1, 1, 0.1);
                d.to_image_r = Conv2d::make(rng, rpm_c, image_channels, 3, 3, 1, 1, 1, 0.1);
                d.attention = Conv2d::make(rng, spm_c + rpm_c, 2, 3, 3, 1, 1, 1, 1.0);
                break;
            case FusionStrategy::FII:
                d.to_image_s = Conv2d::make(rng, spm_c, image_channels, 3, 3, 1, 1, 1, 0.1);
                d.to_image_r = Conv2d::make(rng, rpm_c, image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            case FusionStrategy::FIII:
            case FusionStrategy::FIV:
                d.project = Conv2d::make(rng, rpm_c, spm_c, 1, 1, 1, 0, 0, 1.0);
                d.final_conv = Conv2d::make(rng, spm_c, image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            case FusionStrategy::FV:
                d.final_conv = Conv2d::make(rng, spm_c + rpm_c, image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            default:
                break;
        }
        return d;
    }

    // Channel width of the fused tensor entering the last conversion step
    // (for F-I/F-II that tensor already is the image).
    int feature_channels() const {
        switch (strategy) {
            case FusionStrategy::FI:
            case FusionStrategy::FII: return image_channels;
            case FusionStrategy::FIII:
            case FusionStrategy::FIV: return spm.out_channels();
            case FusionStrategy::FV: return spm.out_channels() + rpms[1].out_channels();
            case FusionStrategy::FVI: return spm.out_channels();
            case FusionStrategy::FVII: return rpms[1].out_channels();
        }
        return 0;
    }

    Tensor rpm_branch(Tape& tape, const Tensor& f, bool trainable) {
        Tensor cur = f;
        for (Rpm& r : rpms) cur = r.forward(tape, cur, trainable);
        return cur;
    }

    // The fused pre-image tensor: the strategy's combined feature, or the
    // fused image itself for the image-level strategies.
    Tensor fused_feature(Tape& tape, const Tensor& f, bool trainable) {
        switch (strategy) {
            case FusionStrategy::FI: {
                Tensor fs = spm.forward(tape, f, trainable);
                Tensor fr = rpm_branch(tape, f, trainable);
                Tensor img_s = to_image_s->forward(tape, fs, trainable);
                Tensor img_r = to_image_r->forward(tape, fr, trainable);
                Tensor masks = softmax_channels(
                    attention->forward(tape, concat_channels({fs, fr}), trainable));
                Tensor a1 = slice_channels(masks, 0, 1);
                Tensor a2 = slice_channels(masks, 1, 1);
                std::vector<Tensor> r1(static_cast<size_t>(image_channels), a1);
                std::vector<Tensor> r2(static_cast<size_t>(image_channels), a2);
                return add(mul(img_s, concat_channels(r1)), mul(img_r, concat_channels(r2)));
            }
            case FusionStrategy::FII: {
                Tensor img_s = to_image_s->forward(tape, spm.forward(tape, f, trainable), trainable);
                Tensor img_r = to_image_r->forward(tape, rpm_branch(tape, f, trainable), trainable);
                return scale(add(img_s, img_r), 0.5);
            }
            case FusionStrategy::FIII:
            case FusionStrategy::FIV: {
                Tensor fs = spm.forward(tape, f, trainable);
                Tensor fr = rpm_branch(tape, f, trainable);
                return add(fs, project->forward(tape, fr, trainable));
            }
            case FusionStrategy::FV: {
                Tensor fs = spm.forward(tape, f, trainable);
                Tensor fr = rpm_branch(tape, f, trainable);
                return concat_channels({fs, fr});
            }
            case FusionStrategy::FVI:
                return spm.forward(tape, rpm_branch(tape, f, trainable), trainable);
            case FusionStrategy::FVII:
                return rpm_branch(tape, spm.forward(tape, f, trainable), trainable);
        }
        throw ContractError("unknown fusion strategy");
    }

    // Pre-tanh image.
    Tensor forward(Tape& tape, const Tensor& f, bool trainable) {
        Tensor fused = fused_feature(tape, f, trainable);
        if (strategy == FusionStrategy::FI || strategy == FusionStrategy::FII) return fused;
        return final_conv->forward(tape, fused, trainable);
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        spm.visit(prefix + ".spm", fn);
        for (size_t i = 0; i < rpms.size(); ++i)
            rpms[i].visit(prefix + ".rpm" + std::to_string(i), fn);
        if (to_image_s) to_image_s->visit(prefix + ".to_image_s", fn);
        if (to_image_r) to_image_r->visit(prefix + ".to_image_r", fn);
        if (attention) attention->visit(prefix + ".attention", fn);
        if (project) project->visit(prefix + ".project", fn);
        if (final_conv) final_conv->visit(prefix + ".final", fn);
    }
};

}  // namespace dpgan
