// dpgan: command-line workbench for the double-pooling layout-to-image GAN.
//
// Subcommands: make-dataset, train, generate, eval, gradcheck, probe-rf,
// ablate. Exit codes: 0 success, 1 usage error, 2 verification failure,
// 3 numeric abort.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dpgan/ablate.hpp"
#include "dpgan/config.hpp"
#include "dpgan/gradcheck_suite.hpp"
#include "dpgan/rf_probe.hpp"

namespace fs = std::filesystem;
using namespace dpgan;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerification = 2;
constexpr int kExitNumeric = 3;

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) {
        RunConfig cfg;
        cfg.resolve();
        return cfg;
    }
    return load_config(path);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write: " + path);
    f << text;
}

TrainState state_from_checkpoint(const Container& c, RunConfig* cfg_out = nullptr) {
    const std::string* cfg_json = checkpoint_config(c);
    if (cfg_json == nullptr) throw IoError("checkpoint carries no config metadata");
    RunConfig cfg = config_from_json(nlohmann::json::parse(*cfg_json));
    TrainState state = state_from_config(cfg);
    checkpoint_restore(state, c);
    if (cfg_out != nullptr) *cfg_out = cfg;
    return state;
}

int cmd_make_dataset(const std::string& out, int num, int size, int classes, std::uint64_t seed,
                     bool force) {
    if (fs::exists(out) && !fs::is_empty(out) && !force)
        throw ContractError("output directory " + out + " is not empty (use --force)");
    write_dataset(out, Dataset::generate(seed, num, size, classes));
    std::printf("wrote %d samples (%dx%d, %d classes, seed %llu) to %s\n", num, size, size, classes,
                static_cast<unsigned long long>(seed), out.c_str());
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, bool resume, int ckpt_every) {
    RunConfig cfg = load_config_or_default(config_path);
    const Dataset data = load_dataset(data_dir);
    check(data.classes == cfg.generator.classes,
          "dataset has K = " + std::to_string(data.classes) + " but config expects K = " +
              std::to_string(cfg.generator.classes));

    fs::create_directories(out_dir);
    const std::string config_echo = config_to_json(cfg).dump();
    write_text((fs::path(out_dir) / "resolved_config.json").string(),
               config_to_json(cfg).dump(2) + "\n");
    const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.ckpt").string();
    const std::string log_path = (fs::path(out_dir) / "metrics.log").string();

    TrainState state = state_from_config(cfg);
    if (resume) {
        checkpoint_restore(state, load_container(ckpt_path));
        std::printf("resumed from %s at step %lld\n", ckpt_path.c_str(),
                    static_cast<long long>(state.step));
    }

    std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write: " + log_path);

    while (state.step < cfg.train.steps) {
        StepMetrics m;
        try {
            m = train_step(state, data);
        } catch (const NumericError& e) {
            std::fprintf(stderr, "numeric abort: %s (last-good checkpoint kept at %s)\n", e.what(),
                         ckpt_path.c_str());
            return kExitNumeric;
        }
        log << metrics_to_json(m).dump() << "\n";
        log.flush();
        if (ckpt_every > 0 && state.step % ckpt_every == 0)
            checkpoint_save(state, ckpt_path, config_echo);
    }
    checkpoint_save(state, ckpt_path, config_echo);
    std::printf("trained to step %lld; checkpoint at %s\n", static_cast<long long>(state.step),
                ckpt_path.c_str());
    return kExitOk;
}

int cmd_generate(const std::string& ckpt, const std::string& layout_path,
                 const std::string& out_path) {
    RunConfig cfg;
    TrainState state = state_from_checkpoint(load_container(ckpt), &cfg);
    const LayoutMap layout = read_pgm(layout_path, cfg.generator.classes);
    Tape tape;
    const Tensor img =
        state.g.forward(tape, one_hot_encode(layout, cfg.generator.classes), false);
    write_ppm(out_path, img);
    std::printf("wrote %dx%d image to %s\n", img.shape.w, img.shape.h, out_path.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& out_path,
             bool ground_truth) {
    const Dataset data = load_dataset(data_dir);
    nlohmann::json samples = nlohmann::json::array();
    double acc = 0.0, miou = 0.0;

    TrainState state = [&] {
        if (ground_truth) {
            RunConfig cfg;
            cfg.generator.classes = data.classes;
            cfg.resolve();
            return state_from_config(cfg);
        }
        return state_from_checkpoint(load_container(ckpt));
    }();
    check(ground_truth || state.g.cfg.classes == data.classes,
          "checkpoint K does not match dataset K");

    for (int i = 0; i < data.count(); ++i) {
        SegMetrics m;
        if (ground_truth) {
            m = metrics(oracle_segment(data.truths[static_cast<size_t>(i)], data.styles),
                        data.layouts[static_cast<size_t>(i)]);
        } else {
            Tape tape;
            const Tensor img = state.g.forward(
                tape, one_hot_encode(data.layouts[static_cast<size_t>(i)], data.classes), false);
            m = metrics(oracle_segment(img, data.styles), data.layouts[static_cast<size_t>(i)]);
        }
        acc += m.accuracy;
        miou += m.miou;
        samples.push_back({{"index", i}, {"accuracy", m.accuracy}, {"miou", m.miou}});
    }
    const nlohmann::json report = {
        {"source", ground_truth ? "ground-truth" : "generator"},
        {"count", data.count()},
        {"aggregate", {{"accuracy", acc / data.count()}, {"miou", miou / data.count()}}},
        {"samples", samples}};
    const std::string text = report.dump(2) + "\n";
    if (!out_path.empty()) write_text(out_path, text);
    std::fputs(text.c_str(), stdout);
    return kExitOk;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
    auto suite = standard_gradcheck_suite();
    if (scope != "all") {
        std::vector<GradcheckSuiteCase> filtered;
        for (auto& c : suite)
            if (c.name == scope) filtered.push_back(std::move(c));
        if (filtered.empty()) {
            std::string names;
            for (const auto& c : suite) names += " " + c.name;
            throw ContractError("unknown gradcheck scope \"" + scope + "\"; known:" + names);
        }
        suite = std::move(filtered);
    }
    GradcheckOptions opt;
    bool all_pass = true;
    std::printf("%-22s %8s %12s  %s\n", "case", "probes", "max_rel", "verdict");
    for (auto& c : suite) {
        const GradcheckReport r = c.run(seed, opt);
        std::int64_t probes = 0;
        for (const auto& i : r.inputs) probes += i.probes;
        std::printf("%-22s %8lld %12.3e  %s\n", r.name.c_str(), static_cast<long long>(probes),
                    r.max_rel, r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    return all_pass ? kExitOk : kExitVerification;
}

int cmd_probe_rf(const std::string& config_path, const std::string& out_dir, int size,
                 const std::string& compare) {
    RunConfig cfg = load_config_or_default(config_path);
    const std::vector<Ablation> variants =
        compare.empty() ? std::vector<Ablation>{cfg.ablation} : parse_variant_list(compare);

    nlohmann::json report = nlohmann::json::array();
    for (Ablation v : variants) {
        RunConfig vcfg = cfg;
        vcfg.ablation = v;
        vcfg.resolve();
        Rng rng(vcfg.seed);
        Generator g = Generator::make(rng, vcfg.generator);
        const RfResult r = probe_receptive_field(g, size);
        report.push_back({{"variant", r.variant},
                          {"stage", "pre-image feature"},
                          {"size", r.size},
                          {"probe", {r.probe_row, r.probe_col}},
                          {"coverage", r.coverage},
                          {"bbox", {r.bbox_r0, r.bbox_c0, r.bbox_r1, r.bbox_c1}},
                          {"bbox_hw", {r.bbox_height(), r.bbox_width()}}});
        if (!out_dir.empty()) {
            fs::create_directories(out_dir);
            LayoutMap mask(size, size, 2);
            for (size_t i = 0; i < r.mask.size(); ++i) mask.cells[i] = r.mask[i] ? 255 : 0;
            mask.classes = 256;
            write_pgm((fs::path(out_dir) / ("rf_mask_" + r.variant + ".pgm")).string(), mask);
        }
        std::printf("%-4s coverage %.4f bbox %dx%d probe (%d,%d)\n", r.variant.c_str(), r.coverage,
                    r.bbox_height(), r.bbox_width(), r.probe_row, r.probe_col);
    }
    if (!out_dir.empty())
        write_text((fs::path(out_dir) / "rf_report.json").string(), report.dump(2) + "\n");
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir,
               const std::string& out_dir, int steps, const std::string& variants_csv) {
    RunConfig cfg = load_config_or_default(config_path);
    const Dataset data = load_dataset(data_dir);
    const std::vector<Ablation> variants = parse_variant_list(variants_csv);
    const std::vector<AblationRow> rows = run_ablation(cfg, variants, data, steps);
    const std::string table = ablation_table(rows);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text((fs::path(out_dir) / "ablation.json").string(),
                   ablation_to_json(rows).dump(2) + "\n");
        write_text((fs::path(out_dir) / "ablation.txt").string(), table);
    }
    std::fputs(table.c_str(), stdout);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"double-pooling layout-to-image GAN workbench"};
    app.require_subcommand(1);

    // make-dataset
    auto* mk = app.add_subcommand("make-dataset", "generate a deterministic synthetic dataset");
    std::string mk_out;
    int mk_num = 8, mk_size = 64, mk_classes = 5;
    std::uint64_t mk_seed = 42;
    bool mk_force = false;
    mk->add_option("--out", mk_out, "output directory")->required();
    mk->add_option("--num", mk_num, "sample count");
    mk->add_option("--size", mk_size, "image size (pixels)");
    mk->add_option("--classes", mk_classes, "class count K");
    mk->add_option("--seed", mk_seed, "dataset seed");
    mk->add_flag("--force", mk_force, "overwrite a non-empty directory");

    // train
    auto* tr = app.add_subcommand("train", "train a generator/discriminator pair");
    std::string tr_config, tr_data, tr_out;
    bool tr_resume = false;
    int tr_ckpt_every = 500;
    tr->add_option("--config", tr_config, "run config JSON (defaults when omitted)");
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_flag("--resume", tr_resume, "resume from <out>/checkpoint.ckpt");
    tr->add_option("--ckpt-every", tr_ckpt_every, "checkpoint interval in steps");

    // generate
    auto* ge = app.add_subcommand("generate", "run the generator on a layout image");
    std::string ge_ckpt, ge_layout, ge_out;
    ge->add_option("--ckpt", ge_ckpt, "checkpoint file")->required();
    ge->add_option("--layout", ge_layout, "layout PGM file")->required();
    ge->add_option("--out", ge_out, "output PPM file")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "oracle-segmenter metrics over a dataset");
    std::string ev_ckpt, ev_data, ev_out;
    bool ev_gt = false;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file (unused with --ground-truth)");
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "write the JSON report here as well");
    ev->add_flag("--ground-truth", ev_gt, "score the dataset's own truth images");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string gc_scope = "all";
    std::uint64_t gc_seed = 7;
    gc->add_option("--scope", gc_scope, "all or one case name");
    gc->add_option("--seed", gc_seed, "probe seed");

    // probe-rf
    auto* rf = app.add_subcommand("probe-rf", "receptive-field footprint of a variant");
    std::string rf_config, rf_out, rf_compare;
    int rf_size = 64;
    rf->add_option("--config", rf_config, "run config JSON");
    rf->add_option("--out", rf_out, "output directory for report + masks");
    rf->add_option("--size", rf_size, "probe layout size");
    rf->add_option("--compare", rf_compare, "comma-separated variants, e.g. B1,B2,B13");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and compare ablation variants");
    std::string ab_config, ab_data, ab_out;
    int ab_steps = 200;
    std::string ab_variants =
        "B1,B2,B3,B4,B5,B6,B7,B8,B9,B10,B11,B12,B13";
    ab->add_option("--config", ab_config, "run config JSON");
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory");
    ab->add_option("--steps", ab_steps, "training steps per variant");
    ab->add_option("--variants", ab_variants, "comma-separated variant list");

    try {
        app.parse(argc, argv);
        if (*mk) return cmd_make_dataset(mk_out, mk_num, mk_size, mk_classes, mk_seed, mk_force);
        if (*tr) return cmd_train(tr_config, tr_data, tr_out, tr_resume, tr_ckpt_every);
        if (*ge) return cmd_generate(ge_ckpt, ge_layout, ge_out);
        if (*ev) {
            if (!ev_gt && ev_ckpt.empty())
                throw ContractError("eval: --ckpt is required unless --ground-truth is set");
            return cmd_eval(ev_ckpt, ev_data, ev_out, ev_gt);
        }
        if (*gc) return cmd_gradcheck(gc_scope, gc_seed);
        if (*rf) return cmd_probe_rf(rf_config, rf_out, rf_size, rf_compare);
        if (*ab) return cmd_ablate(ab_config, ab_data, ab_out, ab_steps, ab_variants);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }
}
