#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

#include "dpgan/ablate.hpp"
#include "dpgan/config.hpp"
#include "dpgan/rf_probe.hpp"

using namespace dpgan;
namespace fs = std::filesystem;

#ifndef DPGAN_CLI_PATH
#define DPGAN_CLI_PATH "dpgan"
#endif

namespace {

std::string q(const std::string& s) { return "\"" + s + "\""; }

int run_cli(const std::string& args) {
    const std::string cmd = std::string(q(DPGAN_CLI_PATH)) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string tmp(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p.string();
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

std::map<std::string, std::string> dir_bytes(const std::string& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        out[e.path().filename().string()] = read_file(e.path().string());
    return out;
}

int count_lines(const std::string& path) {
    std::ifstream f(path);
    int n = 0;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ++n;
    return n;
}

// Small fast config shared by the CLI round-trip tests.
void write_small_config(const std::string& path, int steps, const std::string& ablation = "B2") {
    std::ofstream f(path);
    f << R"({"seed": 5, "ablation": ")" << ablation << R"(",
           "generator": {"width": 8},
           "train": {"steps": )"
      << steps << R"(, "batch": 2}})";
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
    const RunConfig def = config_from_json(nlohmann::json::object());
    EXPECT_EQ(def.ablation, Ablation::B13);
    EXPECT_EQ(def.generator.width, 16);
    EXPECT_EQ(def.generator.classes, 5);
    EXPECT_DOUBLE_EQ(def.loss.gan, 1.0);
    EXPECT_DOUBLE_EQ(def.loss.feature_matching, 10.0);
    EXPECT_DOUBLE_EQ(def.loss.perceptual, 10.0);
    EXPECT_DOUBLE_EQ(def.train.lr_g, 1e-4);
    EXPECT_DOUBLE_EQ(def.train.lr_d, 4e-4);
    EXPECT_DOUBLE_EQ(def.train.beta1, 0.0);
    EXPECT_DOUBLE_EQ(def.train.beta2, 0.999);
    EXPECT_EQ(def.generator.spm_levels, (std::vector<int>{1, 2, 3, 6}));

    // Echo -> parse -> echo is a fixed point.
    const nlohmann::json echo = config_to_json(def);
    const RunConfig again = config_from_json(echo);
    EXPECT_EQ(config_to_json(again).dump(), echo.dump());
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"sneed": 1})")), ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"generator": {"widht": 8}})")),
                 ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"train": {"lr": 0.1}})")),
                 ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"loss": {"gan": -1}})")),
                 ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"ablation": "B14"})")), ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"train": {"mode": "vae"}})")),
                 ContractError);
}

TEST(Config, VariantListParsing) {
    const auto all = parse_variant_list("B1,B2,B3,B4,B5,B6,B7,B8,B9,B10,B11,B12,B13");
    EXPECT_EQ(all.size(), 13u);
    EXPECT_EQ(all.front(), Ablation::B1);
    EXPECT_EQ(all.back(), Ablation::B13);
    EXPECT_EQ(parse_variant_list(" B1 , B13 ").size(), 2u);
    EXPECT_THROW(parse_variant_list("B0"), ContractError);
    EXPECT_THROW(parse_variant_list(""), ContractError);
}

TEST(Probe, BaselineBoundedAndPoolingVariantsGlobal) {
    GeneratorConfig cfg;
    cfg.width = 8;
    cfg.ablation = Ablation::B1;
    Rng r1(3);
    Generator b1 = Generator::make(r1, cfg);
    const RfResult p1 = probe_receptive_field(b1, 32);
    EXPECT_LE(p1.bbox_height(), 9);
    EXPECT_LE(p1.bbox_width(), 9);
    EXPECT_LT(p1.coverage, 0.2);

    cfg.ablation = Ablation::B2;
    Rng r2(3);
    Generator b2 = Generator::make(r2, cfg);
    const RfResult p2 = probe_receptive_field(b2, 32);
    EXPECT_GE(p2.coverage, 0.99);

    // Adding a pooling module never shrinks the footprint.
    EXPECT_TRUE(footprint_subset(p1, p2));
    EXPECT_GT(p2.coverage, p1.coverage);
}

TEST(Probe, RpmFootprintIsCrossShaped) {
    GeneratorConfig cfg;
    cfg.width = 8;
    cfg.ablation = Ablation::B3;
    Rng rng(3);
    Generator g = Generator::make(rng, cfg);
    const RfResult p = probe_receptive_field(g, 32);
    // Strip pooling reaches the full probe row and column.
    for (int c = 0; c < 32; ++c) EXPECT_TRUE(p.mask[static_cast<size_t>(p.probe_row) * 32 + c]);
    for (int r = 0; r < 32; ++r) EXPECT_TRUE(p.mask[static_cast<size_t>(r) * 32 + p.probe_col]);
    EXPECT_LT(p.coverage, 0.99);  // but not the whole input with one block
}

TEST(Ablate, RowsCoverRequestedVariantsWithoutTraining) {
    RunConfig cfg;
    cfg.generator.width = 8;
    cfg.train.batch = 2;
    const Dataset data = Dataset::generate(3, 2, 16);
    const auto rows = run_ablation(cfg, parse_variant_list("B1,B2,B13"), data, 0);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].variant, "B1");
    EXPECT_EQ(rows[2].variant, "B13");
    EXPECT_GT(rows[1].parameters, rows[0].parameters);   // SPM adds per-level convs
    EXPECT_GE(rows[1].rf_coverage, rows[0].rf_coverage);  // B1 <= B2
    EXPECT_GE(rows[2].rf_coverage, rows[0].rf_coverage);  // B1 <= B13
    const std::string table = ablation_table(rows);
    EXPECT_NE(table.find("B13"), std::string::npos);
}

TEST(Cli, MakeDatasetIsDeterministicAndGuarded) {
    const std::string d1 = tmp("dpgan_cli_ds1");
    const std::string d2 = tmp("dpgan_cli_ds2");
    ASSERT_EQ(run_cli("make-dataset --out " + q(d1) + " --num 3 --size 16 --seed 9"), 0);
    ASSERT_EQ(run_cli("make-dataset --out " + q(d2) + " --num 3 --size 16 --seed 9"), 0);
    EXPECT_EQ(dir_bytes(d1), dir_bytes(d2));

    // Non-empty output directory without --force is a usage error.
    EXPECT_EQ(run_cli("make-dataset --out " + q(d1) + " --num 3 --size 16 --seed 9"), 1);
    EXPECT_EQ(run_cli("make-dataset --out " + q(d1) + " --num 3 --size 16 --seed 9 --force"), 0);

    // Strips cannot be placed on a tiny grid.
    const std::string d3 = tmp("dpgan_cli_ds3");
    EXPECT_EQ(run_cli("make-dataset --out " + q(d3) + " --num 1 --size 8"), 1);
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Cli, TrainWritesLogEchoAndResumesBitExact) {
    const std::string ds = tmp("dpgan_cli_train_ds");
    ASSERT_EQ(run_cli("make-dataset --out " + q(ds) + " --num 8 --size 16 --seed 4"), 0);

    const std::string cfg6 = tmp("dpgan_cli_cfg6.json");
    write_small_config(cfg6, 6);
    const std::string run_a = tmp("dpgan_cli_run_a");
    ASSERT_EQ(run_cli("train --config " + q(cfg6) + " --data " + q(ds) + " --out " + q(run_a)), 0);
    EXPECT_EQ(count_lines(run_a + "/metrics.log"), 6);

    // The resolved echo re-parses to the same configuration.
    const RunConfig echoed = load_config(run_a + "/resolved_config.json");
    EXPECT_EQ(config_to_json(echoed).dump(),
              config_to_json(load_config(cfg6)).dump());

    // Train 3 steps, then resume to 6: checkpoint bytes match the straight run.
    const std::string cfg3 = tmp("dpgan_cli_cfg3.json");
    write_small_config(cfg3, 3);
    const std::string run_b = tmp("dpgan_cli_run_b");
    ASSERT_EQ(run_cli("train --config " + q(cfg3) + " --data " + q(ds) + " --out " + q(run_b)), 0);
    ASSERT_EQ(run_cli("train --config " + q(cfg6) + " --data " + q(ds) + " --out " + q(run_b) +
                      " --resume"),
              0);
    EXPECT_EQ(read_file(run_b + "/checkpoint.ckpt"), read_file(run_a + "/checkpoint.ckpt"));

    // Generation from a checkpoint is deterministic and layout-sized.
    const std::string img1 = tmp("dpgan_cli_img1.ppm");
    const std::string img2 = tmp("dpgan_cli_img2.ppm");
    ASSERT_EQ(run_cli("generate --ckpt " + q(run_a + "/checkpoint.ckpt") + " --layout " +
                      q(ds + "/layout_00002.pgm") + " --out " + q(img1)),
              0);
    ASSERT_EQ(run_cli("generate --ckpt " + q(run_a + "/checkpoint.ckpt") + " --layout " +
                      q(ds + "/layout_00002.pgm") + " --out " + q(img2)),
              0);
    EXPECT_EQ(read_file(img1), read_file(img2));
    const Tensor img = read_ppm(img1);
    EXPECT_EQ(img.shape, (Shape{1, 3, 16, 16}));

    // Eval runs are deterministic; ground-truth eval scores 1.0.
    const std::string ev1 = tmp("dpgan_cli_eval1.json");
    const std::string ev2 = tmp("dpgan_cli_eval2.json");
    ASSERT_EQ(run_cli("eval --ckpt " + q(run_a + "/checkpoint.ckpt") + " --data " + q(ds) +
                      " --out " + q(ev1)),
              0);
    ASSERT_EQ(run_cli("eval --ckpt " + q(run_a + "/checkpoint.ckpt") + " --data " + q(ds) +
                      " --out " + q(ev2)),
              0);
    EXPECT_EQ(read_file(ev1), read_file(ev2));
    const std::string gt = tmp("dpgan_cli_eval_gt.json");
    ASSERT_EQ(run_cli("eval --ground-truth --data " + q(ds) + " --out " + q(gt)), 0);
    const auto gt_json = nlohmann::json::parse(read_file(gt));
    EXPECT_DOUBLE_EQ(gt_json["aggregate"]["accuracy"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(gt_json["aggregate"]["miou"].get<double>(), 1.0);

    for (const auto& p : {ds, run_a, run_b}) fs::remove_all(p);
    for (const auto& p : {cfg6, cfg3, img1, img2, ev1, ev2, gt}) fs::remove(p);
}

TEST(Cli, GradcheckScopes) {
    EXPECT_EQ(run_cli("gradcheck --scope adaptive_avg_pool2d"), 0);
    EXPECT_EQ(run_cli("gradcheck --scope no_such_op"), 1);
}

TEST(Cli, ProbeRfEmitsReportAndMasks) {
    const std::string out = tmp("dpgan_cli_rf");
    ASSERT_EQ(run_cli("probe-rf --compare B1,B2 --size 32 --out " + q(out)), 0);
    const auto report = nlohmann::json::parse(read_file(out + "/rf_report.json"));
    ASSERT_EQ(report.size(), 2u);
    EXPECT_EQ(report[0]["variant"], "B1");
    EXPECT_LE(report[0]["bbox_hw"][0].get<int>(), 9);
    EXPECT_GE(report[1]["coverage"].get<double>(), 0.99);
    EXPECT_TRUE(fs::exists(out + "/rf_mask_B1.pgm"));
    fs::remove_all(out);
}

TEST(Cli, UnknownFlagsAndMissingSubcommandAreUsageErrors) {
    EXPECT_EQ(run_cli(""), 1);
    EXPECT_EQ(run_cli("make-dataset --nonsense x"), 1);
    EXPECT_EQ(run_cli("train --data /nonexistent --out /tmp/dpgan_nowhere"), 1);
}
