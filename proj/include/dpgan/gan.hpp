#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dpgan/blocks.hpp"
#include "dpgan/synth.hpp"

namespace dpgan {

// ---------------------------------------------------------------------------
// Ablation variants. B1 is the plain backbone; B2 adds the square pyramid;
// B3-B6 add strip-pooling stacks; B7-B13 are the full double-pooling heads
// with fusion strategies F-I..F-VII.
// ---------------------------------------------------------------------------
enum class Ablation {
    B1 = 1, B2, B3, B4, B5, B6, B7, B8, B9, B10, B11, B12, B13,
};

inline std::string to_string(Ablation a) { return "B" + std::to_string(static_cast<int>(a)); }

inline Ablation ablation_from_string(const std::string& s) {
    for (int i = 1; i <= 13; ++i)
        if (s == "B" + std::to_string(i)) return static_cast<Ablation>(i);
    throw ContractError("unknown ablation variant: " + s + " (expected B1..B13)");
}

inline bool has_fusion(Ablation a) { return static_cast<int>(a) >= 7; }

inline FusionStrategy fusion_of(Ablation a) {
    check(has_fusion(a), "ablation " + to_string(a) + " has no fusion strategy");
    return static_cast<FusionStrategy>(static_cast<int>(a) - 7);
}

struct GeneratorConfig {
    int classes = 5;
    int width = 16;  // backbone channels, divisible by 4
    int depth = 4;   // stride-1 conv stages
    int image_channels = 3;
    Ablation ablation = Ablation::B13;
    std::vector<int> spm_levels = {1, 2, 3, 6};
};

// Backbone (stride-1 conv / instance-norm / leaky-relu stack) followed by the
// variant head and a tanh to [-1, 1].
struct Generator {
    GeneratorConfig cfg;
    std::vector<Conv2d> backbone_convs;
    std::vector<InstanceNorm> backbone_norms;
    std::optional<Spm> spm;            // B2
    std::vector<Rpm> rpm_stack;        // B3..B6
    std::optional<DpmFusion> fusion;   // B7..B13
    std::optional<Conv2d> to_image;    // B1..B6

    static Generator make(Rng& rng, GeneratorConfig cfg) {
        check(cfg.width % 4 == 0, "generator: width must be divisible by 4");
        check(cfg.depth >= 1 && cfg.classes >= 1, "generator: bad depth or class count");
        Generator g;
        g.cfg = cfg;
        for (int i = 0; i < cfg.depth; ++i) {
            const int cin = i == 0 ? cfg.classes : cfg.width;
            g.backbone_convs.push_back(Conv2d::make(rng, cin, cfg.width, 3, 3, 1, 1, 1));
            g.backbone_norms.push_back(InstanceNorm::make(cfg.width));
        }
        const int c = cfg.width;
        switch (cfg.ablation) {
            case Ablation::B1:
                g.to_image = Conv2d::make(rng, c, cfg.image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            case Ablation::B2:
                g.spm = Spm::pyramid(rng, c, cfg.spm_levels);
                g.to_image =
                    Conv2d::make(rng, g.spm->out_channels(), cfg.image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            case Ablation::B3:
                g.rpm_stack.push_back(Rpm::make(rng, c, RpmVariant::AddResidual));
                g.to_image = Conv2d::make(rng, c, cfg.image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            case Ablation::B4:
                g.rpm_stack.push_back(Rpm::make(rng, c, RpmVariant::ConcatResidual));
                g.to_image = Conv2d::make(rng, 2 * c, cfg.image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            case Ablation::B5:
                g.rpm_stack.push_back(Rpm::make(rng, c, RpmVariant::AddResidual));
                g.rpm_stack.push_back(Rpm::make(rng, c, RpmVariant::AddResidual));
                g.to_image = Conv2d::make(rng, c, cfg.image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            case Ablation::B6:
                g.rpm_stack.push_back(Rpm::make(rng, c, RpmVariant::ConcatResidual));
                g.rpm_stack.push_back(Rpm::make(rng, 2 * c, RpmVariant::ConcatResidual));
                g.to_image = Conv2d::make(rng, 4 * c, cfg.image_channels, 3, 3, 1, 1, 1, 0.1);
                break;
            default:
                g.fusion = DpmFusion::make(rng, fusion_of(cfg.ablation), c, cfg.image_channels);
                break;
        }
        return g;
    }

    Tensor backbone(Tape& tape, const Tensor& onehot, bool trainable,
                    bool frozen_norm_stats = false) {
        check(onehot.shape.c == cfg.classes,
              "generator: layout one-hot has " + std::to_string(onehot.shape.c) +
                  " channels, expected K = " + std::to_string(cfg.classes));
        Tensor f = onehot;
        for (size_t i = 0; i < backbone_convs.size(); ++i) {
            f = backbone_convs[i].forward(tape, f, trainable);
            f = backbone_norms[i].forward(tape, f, trainable, frozen_norm_stats);
            f = leaky_relu(f, 0.2);
        }
        return f;
    }

    // The feature the head produces right before the to-image conversion (the
    // fused image itself for the image-level fusions). This is the stage the
    // receptive-field probe differentiates.
    Tensor dpm_feature(Tape& tape, const Tensor& onehot, bool trainable,
                       bool frozen_norm_stats = false) {
        Tensor f = backbone(tape, onehot, trainable, frozen_norm_stats);
        if (fusion) return fusion->fused_feature(tape, f, trainable);
        if (spm) return spm->forward(tape, f, trainable);
        for (Rpm& r : rpm_stack) f = r.forward(tape, f, trainable);
        return f;
    }

    // Pre-tanh image.
    Tensor image_logits(Tape& tape, const Tensor& onehot, bool trainable) {
        Tensor f = backbone(tape, onehot, trainable);
        if (fusion) return fusion->forward(tape, f, trainable);
        if (spm) return to_image->forward(tape, spm->forward(tape, f, trainable), trainable);
        for (Rpm& r : rpm_stack) f = r.forward(tape, f, trainable);
        return to_image->forward(tape, f, trainable);
    }

    Tensor forward(Tape& tape, const Tensor& onehot, bool trainable) {
        return dpgan::tanh(image_logits(tape, onehot, trainable));
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        for (size_t i = 0; i < backbone_convs.size(); ++i) {
            backbone_convs[i].visit(prefix + ".backbone" + std::to_string(i), fn);
            backbone_norms[i].visit(prefix + ".backbone" + std::to_string(i) + ".norm", fn);
        }
        if (spm) spm->visit(prefix + ".spm", fn);
        for (size_t i = 0; i < rpm_stack.size(); ++i)
            rpm_stack[i].visit(prefix + ".rpm" + std::to_string(i), fn);
        if (fusion) fusion->visit(prefix + ".dpm", fn);
        if (to_image) to_image->visit(prefix + ".to_image", fn);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        visit("g", [&](const std::string&, Parameter& p) { out.push_back(&p); });
        return out;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        visit("g", [&](const std::string&, Parameter& p) { n += p.value.shape.numel(); });
        return n;
    }
};

// ---------------------------------------------------------------------------
// Multi-scale patch discriminator. Each scale sees a 2x coarser area-averaged
// copy of (image ++ one-hot layout) and emits a 1-channel patch map plus its
// three intermediate activations for feature matching.
// ---------------------------------------------------------------------------
struct DiscriminatorConfig {
    int scales = 2;
    int classes = 5;
    int image_channels = 3;
    std::array<int, 3> widths = {32, 64, 128};
};

struct ScaleOutput {
    Tensor patch;
    std::vector<Tensor> features;
};

struct Discriminator {
    DiscriminatorConfig cfg;
    struct Stage {
        Conv2d c1, c2, c3, out;
    };
    std::vector<Stage> stages;

    static Discriminator make(Rng& rng, DiscriminatorConfig cfg) {
        check(cfg.scales >= 1, "discriminator: needs at least one scale");
        Discriminator d;
        d.cfg = cfg;
        const int cin = cfg.image_channels + cfg.classes;
        for (int s = 0; s < cfg.scales; ++s) {
            Stage st;
            st.c1 = Conv2d::make(rng, cin, cfg.widths[0], 4, 4, 2, 1, 1);
            st.c2 = Conv2d::make(rng, cfg.widths[0], cfg.widths[1], 4, 4, 2, 1, 1);
            st.c3 = Conv2d::make(rng, cfg.widths[1], cfg.widths[2], 4, 4, 2, 1, 1);
            st.out = Conv2d::make(rng, cfg.widths[2], 1, 3, 3, 1, 1, 1);
            d.stages.push_back(std::move(st));
        }
        return d;
    }

    std::vector<ScaleOutput> forward(Tape& tape, const Tensor& image, const Tensor& onehot,
                                     bool trainable) {
        check(image.shape.h == onehot.shape.h && image.shape.w == onehot.shape.w &&
                  image.shape.n == onehot.shape.n,
              "discriminator: image and layout disagree spatially");
        Tensor x = concat_channels({image, onehot});
        std::vector<ScaleOutput> outs;
        for (int s = 0; s < cfg.scales; ++s) {
            if (s > 0) {
                check(x.shape.h % 2 == 0 && x.shape.w % 2 == 0,
                      "discriminator: input not divisible for scale " + std::to_string(s));
                x = adaptive_avg_pool2d(x, x.shape.h / 2, x.shape.w / 2);
            }
            ScaleOutput o;
            Tensor f = leaky_relu(stages[static_cast<size_t>(s)].c1.forward(tape, x, trainable), 0.2);
            o.features.push_back(f);
            f = leaky_relu(stages[static_cast<size_t>(s)].c2.forward(tape, f, trainable), 0.2);
            o.features.push_back(f);
            f = leaky_relu(stages[static_cast<size_t>(s)].c3.forward(tape, f, trainable), 0.2);
            o.features.push_back(f);
            o.patch = stages[static_cast<size_t>(s)].out.forward(tape, f, trainable);
            outs.push_back(std::move(o));
        }
        return outs;
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        for (size_t s = 0; s < stages.size(); ++s) {
            const std::string p = prefix + ".scale" + std::to_string(s);
            stages[s].c1.visit(p + ".c1", fn);
            stages[s].c2.visit(p + ".c2", fn);
            stages[s].c3.visit(p + ".c3", fn);
            stages[s].out.visit(p + ".out", fn);
        }
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        visit("d", [&](const std::string&, Parameter& p) { out.push_back(&p); });
        return out;
    }
};

// Frozen random-feature network standing in for a pretrained perceptual net:
// three strided convs, tap after each activation, weights fixed at creation.
struct PerceptualNet {
    std::array<Conv2d, 3> convs;

    static PerceptualNet make(Rng& rng, int image_channels = 3) {
        PerceptualNet p;
        p.convs[0] = Conv2d::make(rng, image_channels, 8, 4, 4, 2, 1, 1);
        p.convs[1] = Conv2d::make(rng, 8, 16, 4, 4, 2, 1, 1);
        p.convs[2] = Conv2d::make(rng, 16, 32, 4, 4, 2, 1, 1);
        return p;
    }

    std::vector<Tensor> taps(Tape& tape, const Tensor& image) {
        std::vector<Tensor> out;
        Tensor f = image;
        for (Conv2d& conv : convs) {
            f = leaky_relu(conv.forward(tape, f, /*trainable=*/false), 0.2);
            out.push_back(f);
        }
        return out;
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        for (size_t i = 0; i < convs.size(); ++i)
            convs[i].visit(prefix + ".conv" + std::to_string(i), fn);
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------
struct LossWeights {
    double gan = 1.0;
    double feature_matching = 10.0;
    double perceptual = 10.0;
};

// D side: mean over scales of relu(1 - D(real)) + relu(1 + D(fake)), each
// averaged over the patch map.
inline Tensor hinge_d_loss(const std::vector<ScaleOutput>& real,
                           const std::vector<ScaleOutput>& fake) {
    check(!real.empty() && real.size() == fake.size(), "hinge_d_loss: scale mismatch");
    Tensor acc;
    for (size_t s = 0; s < real.size(); ++s) {
        Tensor term = add(mean(relu(affine(real[s].patch, -1.0, 1.0))),
                          mean(relu(affine(fake[s].patch, 1.0, 1.0))));
        acc = s == 0 ? term : add(acc, term);
    }
    return scale(acc, 1.0 / static_cast<double>(real.size()));
}

// G side: -mean over scales of mean(D(fake)).
inline Tensor hinge_g_loss(const std::vector<ScaleOutput>& fake) {
    check(!fake.empty(), "hinge_g_loss: no scales");
    Tensor acc;
    for (size_t s = 0; s < fake.size(); ++s) {
        Tensor term = mean(fake[s].patch);
        acc = s == 0 ? term : add(acc, term);
    }
    return scale(acc, -1.0 / static_cast<double>(fake.size()));
}

// Mean over scales and layers of normalized L1 between activations. The real
// side must be detached (computed with frozen parameters from constant
// inputs) so gradients only reach the generator.
inline Tensor feature_matching_loss(const std::vector<ScaleOutput>& real,
                                    const std::vector<ScaleOutput>& fake) {
    check(real.size() == fake.size() && !real.empty(), "feature_matching: scale count mismatch");
    Tensor acc;
    int terms = 0;
    for (size_t s = 0; s < real.size(); ++s) {
        check(real[s].features.size() == fake[s].features.size(),
              "feature_matching: layer structure mismatch");
        for (size_t l = 0; l < real[s].features.size(); ++l) {
            const Tensor& rf = real[s].features[l];
            const Tensor& ff = fake[s].features[l];
            Tensor term = scale(l1_distance(ff, rf), 1.0 / static_cast<double>(rf.shape.numel()));
            acc = terms == 0 ? term : add(acc, term);
            ++terms;
        }
    }
    return scale(acc, 1.0 / static_cast<double>(terms));
}

inline Tensor perceptual_loss(PerceptualNet& net, Tape& tape, const Tensor& real,
                              const Tensor& fake) {
    std::vector<Tensor> rt = net.taps(tape, real.detach());
    std::vector<Tensor> ft = net.taps(tape, fake);
    Tensor acc;
    for (size_t i = 0; i < rt.size(); ++i) {
        Tensor term =
            scale(l1_distance(ft[i], rt[i]), 1.0 / static_cast<double>(rt[i].shape.numel()));
        acc = i == 0 ? term : add(acc, term);
    }
    return scale(acc, 1.0 / static_cast<double>(rt.size()));
}

inline Tensor pixel_l1_loss(const Tensor& fake, const Tensor& real) {
    return scale(l1_distance(fake, real.detach()), 1.0 / static_cast<double>(real.shape.numel()));
}

inline Tensor total_generator_loss(const LossWeights& w, const Tensor& adversarial,
                                   const Tensor& feature_match, const Tensor& perceptual) {
    return add(add(scale(adversarial, w.gan), scale(feature_match, w.feature_matching)),
               scale(perceptual, w.perceptual));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------
enum class TrainMode { Gan, Reconstruction };

struct TrainConfig {
    TrainMode mode = TrainMode::Gan;
    double lr_g = 1e-4;
    double lr_d = 4e-4;
    double beta1 = 0.0;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch = 4;
    int steps = 200;
    std::uint64_t seed = 1;
};

struct StepMetrics {
    std::int64_t step = 0;
    double loss_gan_d = 0.0;
    double loss_gan_g = 0.0;
    double loss_fm = 0.0;  // pixel-L1 in reconstruction mode
    double loss_p = 0.0;
    double total = 0.0;
};

// Deterministic batch sampling: a pure function of (seed, step, slot), so a
// resumed run replays the exact same batches.
inline std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int batch, int count) {
    check(count >= 1 && batch >= 1, "batch_indices: empty dataset or batch");
    std::vector<int> out(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i)
        out[static_cast<size_t>(i)] = static_cast<int>(
            mix64(mix64(seed, 0xb47c4e5du), static_cast<std::uint64_t>(step) * 131071u +
                                                static_cast<std::uint64_t>(i)) %
            static_cast<std::uint64_t>(count));
    return out;
}

// Stacks single-sample constant tensors along N.
inline Tensor stack_batch(const std::vector<Tensor>& samples) {
    check(!samples.empty(), "stack_batch: empty batch");
    const Shape s0 = samples[0].shape;
    check(s0.n == 1, "stack_batch: samples must have N = 1");
    Tensor out = Tensor::zeros({static_cast<int>(samples.size()), s0.c, s0.h, s0.w});
    const std::int64_t chunk = s0.numel();
    for (size_t i = 0; i < samples.size(); ++i) {
        check(samples[i].shape == s0, "stack_batch: inconsistent sample shapes");
        std::copy_n(samples[i].data.begin(), chunk, out.data.begin() + static_cast<std::int64_t>(i) * chunk);
    }
    return out;
}

struct TrainState {
    GeneratorConfig gcfg;
    DiscriminatorConfig dcfg;
    LossWeights weights;
    TrainConfig tcfg;
    Generator g;
    Discriminator d;
    PerceptualNet perceptual;
    Rng rng;  // session RNG; consumed by initialization, checkpointed afterwards
    std::int64_t step = 0;

    static TrainState create(const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg,
                             const LossWeights& weights, const TrainConfig& tcfg) {
        Rng rng(tcfg.seed);
        Generator g = Generator::make(rng, gcfg);
        Discriminator d = Discriminator::make(rng, dcfg);
        PerceptualNet p = PerceptualNet::make(rng, gcfg.image_channels);
        return TrainState{gcfg, dcfg, weights, tcfg, std::move(g), std::move(d), std::move(p),
                          std::move(rng), 0};
    }

    void visit(const ParamVisitor& fn) {
        g.visit("g", fn);
        d.visit("d", fn);
        perceptual.visit("p", fn);
    }
};

// One optimization step: a discriminator update (hinge loss) followed by a
// generator update (weighted hinge + feature matching + perceptual). In
// reconstruction mode the discriminator is skipped and the generator
// minimizes lambda_f * pixel-L1 + lambda_p * perceptual.
inline StepMetrics train_step(TrainState& s, const Dataset& data) {
    const std::vector<int> idx =
        batch_indices(s.tcfg.seed, s.step, s.tcfg.batch, data.count());
    std::vector<Tensor> reals, onehots;
    for (int i : idx) {
        reals.push_back(data.truths[static_cast<size_t>(i)]);
        onehots.push_back(one_hot_encode(data.layouts[static_cast<size_t>(i)], data.classes));
    }
    const Tensor real = stack_batch(reals);
    const Tensor onehot = stack_batch(onehots);

    StepMetrics m;
    m.step = s.step;

    if (s.tcfg.mode == TrainMode::Gan) {
        // Discriminator update: the generator runs frozen, so its forward is
        // tape-free and the fake batch enters the D tape as a constant.
        Tape dt;
        const Tensor fake = s.g.forward(dt, onehot, /*trainable=*/false);
        auto real_out = s.d.forward(dt, real, onehot, /*trainable=*/true);
        auto fake_out = s.d.forward(dt, fake, onehot, /*trainable=*/true);
        Tensor d_loss = hinge_d_loss(real_out, fake_out);
        dt.backward(d_loss);
        Adam{s.tcfg.lr_d, s.tcfg.beta1, s.tcfg.beta2, s.tcfg.eps}.step(dt, s.d.parameters());
        m.loss_gan_d = d_loss.scalar();
    }

    {
        Tape gt;
        const Tensor fake = s.g.forward(gt, onehot, /*trainable=*/true);
        Tensor g_loss;
        if (s.tcfg.mode == TrainMode::Gan) {
            auto fake_out = s.d.forward(gt, fake, onehot, /*trainable=*/false);
            auto real_out = s.d.forward(gt, real, onehot, /*trainable=*/false);  // detached
            Tensor adv = hinge_g_loss(fake_out);
            Tensor fm = feature_matching_loss(real_out, fake_out);
            Tensor perc = perceptual_loss(s.perceptual, gt, real, fake);
            g_loss = total_generator_loss(s.weights, adv, fm, perc);
            m.loss_gan_g = adv.scalar();
            m.loss_fm = fm.scalar();
            m.loss_p = perc.scalar();
        } else {
            Tensor pix = pixel_l1_loss(fake, real);
            Tensor perc = perceptual_loss(s.perceptual, gt, real, fake);
            g_loss = add(scale(pix, s.weights.feature_matching),
                         scale(perc, s.weights.perceptual));
            m.loss_fm = pix.scalar();
            m.loss_p = perc.scalar();
        }
        m.total = g_loss.scalar();
        if (!std::isfinite(m.total) || !std::isfinite(m.loss_gan_d))
            throw NumericError("train_step: non-finite loss at step " + std::to_string(s.step));
        gt.backward(g_loss);
        Adam{s.tcfg.lr_g, s.tcfg.beta1, s.tcfg.beta2, s.tcfg.eps}.step(gt, s.g.parameters());
    }

    s.step += 1;
    return m;
}

// ---------------------------------------------------------------------------
// Checkpointing: parameters, Adam moments and step counters, the session RNG
// and the trainer step, all via the bit-exact tensor container.
// ---------------------------------------------------------------------------

inline Container checkpoint_container(TrainState& s, const std::string& config_echo) {
    Container c;
    c.meta.emplace_back("kind", "checkpoint");
    c.meta.emplace_back("step", std::to_string(s.step));
    c.meta.emplace_back("rng", s.rng.state());
    if (!config_echo.empty()) c.meta.emplace_back("config", config_echo);
    s.visit([&](const std::string& name, Parameter& p) {
        c.entries.emplace_back(name, p.value);
        c.entries.emplace_back(name + ".adam_m", Tensor(p.value.shape, p.m));
        c.entries.emplace_back(name + ".adam_v", Tensor(p.value.shape, p.v));
        c.entries.emplace_back(name + ".adam_t",
                               Tensor(Shape{1, 1, 1, 1}, {static_cast<double>(p.t)}));
    });
    return c;
}

inline void checkpoint_save(TrainState& s, const std::string& path,
                            const std::string& config_echo = "") {
    save_container(path, checkpoint_container(s, config_echo));
}

// Restores parameters and trainer position into an already-constructed state
// (shapes must match the checkpoint exactly).
inline void checkpoint_restore(TrainState& s, const Container& c) {
    const std::string* step = c.find_meta("step");
    const std::string* rng = c.find_meta("rng");
    if (step == nullptr || rng == nullptr) throw IoError("checkpoint: missing step/rng metadata");
    s.visit([&](const std::string& name, Parameter& p) {
        const Tensor* value = c.find(name);
        const Tensor* am = c.find(name + ".adam_m");
        const Tensor* av = c.find(name + ".adam_v");
        const Tensor* at = c.find(name + ".adam_t");
        if (value == nullptr || am == nullptr || av == nullptr || at == nullptr)
            throw IoError("checkpoint: missing tensor " + name);
        if (value->shape != p.value.shape)
            throw IoError("checkpoint: shape mismatch for " + name + " (" + value->shape.str() +
                          " vs " + p.value.shape.str() + ")");
        p.value = *value;
        p.m = am->data;
        p.v = av->data;
        p.t = static_cast<std::int64_t>(at->data[0]);
    });
    s.step = std::stoll(*step);
    s.rng.restore(*rng);
}

inline const std::string* checkpoint_config(const Container& c) { return c.find_meta("config"); }

}  // namespace dpgan
