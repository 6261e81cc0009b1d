// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Returns nonzero if any fails.
//
//   ./acceptance          run all criteria
//   ./acceptance 1 4 8    run a subset by number

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "dpgan/ablate.hpp"
#include "dpgan/config.hpp"
#include "dpgan/gradcheck_suite.hpp"
#include "dpgan/rf_probe.hpp"

using namespace dpgan;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Result {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite: every op and composite block passes central finite
//    differences (h = 1e-5) with max rel error <= 1e-4 (abs floor 1e-7),
//    seeded inputs up to 8x8, inside two minutes.
// ---------------------------------------------------------------------------
Result c1_gradient_suite() {
    const auto t0 = Clock::now();
    GradcheckOptions opt;  // h = 1e-5, rel 1e-4, floor 1e-7
    auto suite = standard_gradcheck_suite();
    double worst = 0.0;
    std::string failed;
    for (auto& cs : suite) {
        const GradcheckReport r = cs.run(20260809, opt);
        worst = std::max(worst, r.max_rel);
        if (!r.pass) failed += " " + r.name;
    }
    const double elapsed = seconds_since(t0);
    Result res;
    res.pass = failed.empty() && elapsed < 120.0;
    res.detail = fmt("%zu cases, max rel %.2e, %.1f s%s%s", suite.size(), worst, elapsed,
                     failed.empty() ? "" : ", failed:", failed.c_str());
    return res;
}

// ---------------------------------------------------------------------------
// 2. Pooling oracle: adaptive pooling equals the brute-force window-mean
//    oracle to 1e-12 for all H, W in [1, 12] and targets {1, 2, 3, 6, 12, 20}.
// ---------------------------------------------------------------------------
double window_mean(const Tensor& x, int c, int i, int j, int th, int tw) {
    const int H = x.shape.h, W = x.shape.w;
    const int r0 = (i * H) / th, r1 = ((i + 1) * H + th - 1) / th;
    const int c0 = (j * W) / tw, c1 = ((j + 1) * W + tw - 1) / tw;
    double acc = 0.0;
    for (int r = r0; r < r1; ++r)
        for (int q = c0; q < c1; ++q) acc += x.at(0, c, r, q);
    return acc / ((r1 - r0) * (c1 - c0));
}

Result c2_pooling_oracle() {
    Rng rng(2);
    double worst = 0.0;
    std::int64_t cells = 0;
    for (int H = 1; H <= 12; ++H)
        for (int W = 1; W <= 12; ++W) {
            Tensor x = Tensor::zeros({1, 2, H, W});
            for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
            for (int th : {1, 2, 3, 6, 12, 20})
                for (int tw : {1, 2, 3, 6, 12, 20}) {
                    const Tensor y = adaptive_avg_pool2d(x, th, tw);
                    for (int c = 0; c < 2; ++c)
                        for (int i = 0; i < th; ++i)
                            for (int j = 0; j < tw; ++j) {
                                worst = std::max(worst, std::abs(y.at(0, c, i, j) -
                                                                 window_mean(x, c, i, j, th, tw)));
                                ++cells;
                            }
                }
        }
    Result res;
    res.pass = worst <= 1e-12;
    res.detail = fmt("%lld cells, max |diff| %.2e", static_cast<long long>(cells), worst);
    return res;
}

// ---------------------------------------------------------------------------
// 3. Shape laws: SPM multiplies channels by (n/4 + 1); RPM-I preserves C;
//    RPM-II doubles; all 13 ablation wirings run forward/backward at 64x64,
//    C = 16, K = 5 without error.
// ---------------------------------------------------------------------------
Result c3_shape_laws() {
    Rng rng(3);
    for (int c : {4, 8, 16}) {
        Spm spm = Spm::pyramid(rng, c);  // n = 4
        if (spm.out_channels() != 2 * c) return {false, fmt("SPM channel law broken at C=%d", c)};
        Tape t;
        Tensor f = Tensor::full({1, c, 9, 7}, 0.3);
        if (spm.forward(t, f, true).shape.c != 2 * c)
            return {false, fmt("SPM forward width at C=%d", c)};
        Rpm r1 = Rpm::make(rng, c, RpmVariant::AddResidual);
        Rpm r2 = Rpm::make(rng, c, RpmVariant::ConcatResidual);
        if (r1.forward(t, f, true).shape.c != c) return {false, fmt("RPM-I width at C=%d", c)};
        if (r2.forward(t, f, true).shape.c != 2 * c) return {false, fmt("RPM-II width at C=%d", c)};
    }

    const LayoutMap layout = generate_layout(33, 64, 5);
    const Tensor onehot = one_hot_encode(layout, 5);
    for (int v = 1; v <= 13; ++v) {
        GeneratorConfig cfg;  // width 16, classes 5
        cfg.ablation = static_cast<Ablation>(v);
        Rng grng(100 + v);
        Generator g = Generator::make(grng, cfg);
        try {
            Tape tape;
            Tensor img = g.forward(tape, onehot, true);
            if (img.shape != Shape{1, 3, 64, 64})
                return {false, to_string(cfg.ablation) + " wrong image shape " + img.shape.str()};
            tape.backward(mean(img));
            for (Parameter* p : g.parameters())
                for (double gv : p->grad(tape))
                    if (!std::isfinite(gv))
                        return {false, to_string(cfg.ablation) + " non-finite gradient"};
        } catch (const std::exception& e) {
            return {false, to_string(cfg.ablation) + ": " + e.what()};
        }
    }
    return {true, "SPM/RPM channel laws for C in {4,8,16}; 13 wirings fwd/bwd at 64x64 C=16 K=5"};
}

// ---------------------------------------------------------------------------
// 4. Receptive field: the conv-only baseline footprint stays inside 9x9;
//    every variant with SPM or the full DPM covers >= 99% of the input from
//    one probe pixel; under 30 s per variant at 64x64.
// ---------------------------------------------------------------------------
Result c4_receptive_field() {
    GeneratorConfig base;  // width 16, K 5
    auto probe = [&](Ablation a, double& secs) {
        GeneratorConfig cfg = base;
        cfg.ablation = a;
        Rng rng(404);
        Generator g = Generator::make(rng, cfg);
        const auto t0 = Clock::now();
        const RfResult r = probe_receptive_field(g, 64);
        secs = seconds_since(t0);
        return r;
    };

    double secs = 0.0, max_secs = 0.0;
    const RfResult b1 = probe(Ablation::B1, secs);
    max_secs = secs;
    if (b1.bbox_height() > 9 || b1.bbox_width() > 9)
        return {false, fmt("B1 footprint %dx%d exceeds 9x9", b1.bbox_height(), b1.bbox_width())};

    std::string covs = fmt("B1 bbox %dx%d cov %.4f;", b1.bbox_height(), b1.bbox_width(), b1.coverage);
    double b13_cov = 0.0;
    for (int v : {2, 7, 8, 9, 10, 11, 12, 13}) {
        const RfResult r = probe(static_cast<Ablation>(v), secs);
        max_secs = std::max(max_secs, secs);
        covs += fmt(" %s %.4f", r.variant.c_str(), r.coverage);
        if (v == 13) b13_cov = r.coverage;
        if (r.coverage < 0.99)
            return {false, fmt("%s coverage %.4f < 0.99", r.variant.c_str(), r.coverage)};
    }
    if (!(b13_cov > b1.coverage)) return {false, "B13 coverage not above B1"};
    if (max_secs >= 30.0) return {false, fmt("probe took %.1f s (budget 30 s)", max_secs)};
    return {true, covs + fmt("; max %.1f s/probe", max_secs)};
}

// ---------------------------------------------------------------------------
// 5. Zero-weight identities: zeroed RPM-I is the identity map; F-I masks sum
//    to 1 within 1e-12 and the fused image stays inside the branch envelope.
// ---------------------------------------------------------------------------
Result c5_zero_weight_identities() {
    Rng rng(5);
    Tensor f = Tensor::zeros({1, 8, 10, 10});
    for (double& v : f.data) v = rng.uniform(-1.0, 1.0);

    Rpm rpm = Rpm::make(rng, 8, RpmVariant::AddResidual);
    rpm.visit("", [](const std::string&, Parameter& p) {
        std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
    });
    Tape t1;
    if (rpm.forward(t1, f, true).data != f.data) return {false, "zeroed RPM-I is not the identity"};

    DpmFusion fi = DpmFusion::make(rng, FusionStrategy::FI, 8);
    Tape t2;
    Tensor fs = fi.spm.forward(t2, f, true);
    Tensor fr = fi.rpm_branch(t2, f, true);
    Tensor img_s = fi.to_image_s->forward(t2, fs, true);
    Tensor img_r = fi.to_image_r->forward(t2, fr, true);
    Tensor masks = softmax_channels(fi.attention->forward(t2, concat_channels({fs, fr}), true));
    double mask_err = 0.0;
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j)
            mask_err = std::max(mask_err,
                                std::abs(masks.at(0, 0, i, j) + masks.at(0, 1, i, j) - 1.0));
    if (mask_err > 1e-12) return {false, fmt("F-I mask sum error %.2e", mask_err)};

    Tape t3;
    Tensor fused = fi.forward(t3, f, true);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 10; ++i)
            for (int j = 0; j < 10; ++j) {
                const double lo = std::min(img_s.at(0, c, i, j), img_r.at(0, c, i, j)) - 1e-12;
                const double hi = std::max(img_s.at(0, c, i, j), img_r.at(0, c, i, j)) + 1e-12;
                const double v = fused.at(0, c, i, j);
                if (v < lo || v > hi) return {false, "F-I output escapes the branch envelope"};
            }
    return {true, fmt("RPM-I identity exact; mask sum error %.1e; envelope holds", mask_err)};
}

// ---------------------------------------------------------------------------
// 6. Reconstruction-mode convergence: lambda_gan = 0 (pixel-L1 + perceptual),
//    4-image set at 64x64, 500 Adam steps (beta1 = 0, beta2 = 0.999): final
//    generator loss <= 25% of initial, no NaN, bit-deterministic across reruns.
// ---------------------------------------------------------------------------
Result c6_reconstruction() {
    auto run = [] {
        RunConfig cfg;
        cfg.seed = 11;
        cfg.ablation = Ablation::B13;
        cfg.train.mode = TrainMode::Reconstruction;
        cfg.train.batch = 4;  // the full 4-image set each step
        cfg.resolve();
        const Dataset data = Dataset::generate(101, 4, 64);
        TrainState s = state_from_config(cfg);
        std::vector<double> totals;
        totals.reserve(500);
        for (int i = 0; i < 500; ++i) totals.push_back(train_step(s, data).total);
        return totals;
    };
    std::vector<double> a, b;
    try {
        a = run();
        b = run();
    } catch (const NumericError& e) {
        return {false, std::string("numeric abort: ") + e.what()};
    }
    for (double v : a)
        if (!std::isfinite(v)) return {false, "non-finite loss"};
    if (a != b) return {false, "loss trajectory differs between reruns"};
    const double ratio = a.back() / a.front();
    Result res;
    res.pass = ratio <= 0.25;
    res.detail = fmt("loss %.4f -> %.4f (ratio %.4f <= 0.25), rerun bit-identical", a.front(),
                     a.back(), ratio);
    return res;
}

// ---------------------------------------------------------------------------
// 7. Full GAN smoke and the desk-scale ablation direction: B1 and B13 train
//    2000 steps on a 32-sample set with a shared seed; no numeric abort; B13
//    improves oracle pixel accuracy by >= 0.2 absolute over its untrained
//    init; RF coverage B13 >= B1. Accuracy ordering is reported, not asserted.
// ---------------------------------------------------------------------------
Result c7_gan_smoke() {
    const Dataset data = Dataset::generate(7777, 32, 64);
    RunConfig base;
    base.seed = 2026;
    base.train.batch = 2;
    base.resolve();

    struct Slot {
        AblationRow row;
        std::exception_ptr err;
    };
    Slot b1, b13;
    auto worker = [&](Ablation v, Slot* slot) {
        try {
            slot->row = run_ablation_variant(base, v, data, 2000);
        } catch (...) {
            slot->err = std::current_exception();
        }
    };
    // Independent states and tapes: the two trainings may run concurrently.
    std::thread th1(worker, Ablation::B1, &b1);
    std::thread th13(worker, Ablation::B13, &b13);
    th1.join();
    th13.join();
    for (const Slot* s : {&b1, &b13}) {
        if (!s->err) continue;
        try {
            std::rethrow_exception(s->err);
        } catch (const std::exception& e) {
            return {false, std::string("training aborted: ") + e.what()};
        }
    }

    std::printf("    %s", ablation_table({b1.row, b13.row}).c_str());
    const double delta = b13.row.accuracy - b13.row.accuracy_untrained;
    if (delta < 0.2)
        return {false, fmt("B13 accuracy improvement %.4f < 0.2", delta)};
    if (b13.row.rf_coverage < b1.row.rf_coverage)
        return {false, "B13 RF coverage below B1"};
    return {true, fmt("B13 acc %.4f (untrained %.4f, +%.4f); B1 acc %.4f; RF %.4f >= %.4f; "
                      "accuracy ordering observed: %s",
                      b13.row.accuracy, b13.row.accuracy_untrained, delta, b1.row.accuracy,
                      b13.row.rf_coverage, b1.row.rf_coverage,
                      b13.row.accuracy >= b1.row.accuracy ? "B13 >= B1" : "B13 < B1")};
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence: checkpoint round trip bit-exact; resumed
//    training equals a straight run bit-exactly; dataset regeneration is
//    byte-identical.
// ---------------------------------------------------------------------------
std::string file_bytes(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

Result c8_determinism_persistence() {
    const fs::path dir = fs::temp_directory_path() / "dpgan_acceptance_c8";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const Dataset data = Dataset::generate(88, 8, 16);

    RunConfig cfg;
    cfg.seed = 55;
    cfg.ablation = Ablation::B4;
    cfg.generator.width = 8;
    cfg.train.batch = 2;
    cfg.resolve();

    TrainState straight = state_from_config(cfg);
    for (int i = 0; i < 6; ++i) train_step(straight, data);

    TrainState half = state_from_config(cfg);
    for (int i = 0; i < 3; ++i) train_step(half, data);
    const std::string ck1 = (dir / "half.ckpt").string();
    checkpoint_save(half, ck1, config_to_json(cfg).dump());

    TrainState resumed = state_from_config(cfg);
    checkpoint_restore(resumed, load_container(ck1));
    const std::string ck2 = (dir / "half_resaved.ckpt").string();
    checkpoint_save(resumed, ck2, config_to_json(cfg).dump());
    if (file_bytes(ck1) != file_bytes(ck2)) return {false, "checkpoint round trip not byte-exact"};

    for (int i = 0; i < 3; ++i) train_step(resumed, data);
    const std::string ck3 = (dir / "resumed.ckpt").string();
    const std::string ck4 = (dir / "straight.ckpt").string();
    checkpoint_save(resumed, ck3, config_to_json(cfg).dump());
    checkpoint_save(straight, ck4, config_to_json(cfg).dump());
    if (file_bytes(ck3) != file_bytes(ck4)) return {false, "resume differs from straight run"};

    const std::string d1 = (dir / "ds1").string(), d2 = (dir / "ds2").string();
    write_dataset(d1, Dataset::generate(9, 6, 32));
    write_dataset(d2, Dataset::generate(9, 6, 32));
    for (const auto& e : fs::directory_iterator(d1)) {
        const std::string name = e.path().filename().string();
        if (file_bytes(e.path().string()) != file_bytes((fs::path(d2) / name).string()))
            return {false, "dataset regeneration differs: " + name};
    }
    fs::remove_all(dir);
    return {true, "checkpoint round trip, resume-equals-straight, dataset bytes all exact"};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        Result (*run)();
    };
    const Criterion criteria[] = {
        {1, "gradient suite", c1_gradient_suite},
        {2, "pooling oracle", c2_pooling_oracle},
        {3, "shape laws", c3_shape_laws},
        {4, "receptive field", c4_receptive_field},
        {5, "zero-weight identities", c5_zero_weight_identities},
        {6, "reconstruction convergence", c6_reconstruction},
        {7, "GAN smoke + ablation direction", c7_gan_smoke},
        {8, "determinism & persistence", c8_determinism_persistence},
    };

    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failures = 0, ran = 0;
    const auto t0 = Clock::now();
    for (const Criterion& c : criteria) {
        if (!wanted.empty() && wanted.count(c.id) == 0) continue;
        ++ran;
        Result r;
        const auto tc = Clock::now();
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {false, std::string("exception: ") + e.what()};
        }
        std::printf("[%d] %-32s %s  (%.1f s) %s\n", c.id, c.name, r.pass ? "PASS" : "FAIL",
                    seconds_since(tc), r.detail.c_str());
        std::fflush(stdout);
        if (!r.pass) ++failures;
    }
    std::printf("acceptance: %d/%d criteria passed (%.1f s)\n", ran - failures, ran,
                seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
