#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "dpgan/synth.hpp"

using namespace dpgan;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
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

}  // namespace

TEST(Styles, PaletteSeparationInvariant) {
    for (int k : {5, 8}) {
        auto styles = default_styles(k);
        for (size_t a = 0; a < styles.size(); ++a)
            for (size_t b = a + 1; b < styles.size(); ++b) {
                double l1 = 0.0;
                for (int ch = 0; ch < 3; ++ch)
                    l1 += std::abs(styles[a].color[static_cast<size_t>(ch)] -
                                   styles[b].color[static_cast<size_t>(ch)]);
                EXPECT_GE(l1, 0.8) << "classes " << a << " and " << b;
            }
        for (const auto& s : styles) EXPECT_LE(s.amplitude, 0.2);
    }
    EXPECT_THROW(default_styles(9), ContractError);
}

TEST(Layout, DeterministicAndStripGuarantees) {
    const LayoutMap a = generate_layout(42, 32);
    const LayoutMap b = generate_layout(42, 32);
    EXPECT_EQ(a.cells, b.cells);
    EXPECT_NE(generate_layout(43, 32).cells, a.cells);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const LayoutMap l = generate_layout(seed, 32);
        // Some row is dominated by the horizontal-strip class.
        bool h_dominant = false;
        for (int r = 0; r < l.height; ++r) {
            int counts[8] = {0};
            for (int c = 0; c < l.width; ++c) counts[l.at(r, c)]++;
            int best = 0;
            for (int k = 1; k < 8; ++k)
                if (counts[k] > counts[best]) best = k;
            if (best == 3) h_dominant = true;
        }
        EXPECT_TRUE(h_dominant) << "seed " << seed;
        // And some column is dominated by the vertical-strip class.
        bool v_dominant = false;
        for (int c = 0; c < l.width; ++c) {
            int counts[8] = {0};
            for (int r = 0; r < l.height; ++r) counts[l.at(r, c)]++;
            int best = 0;
            for (int k = 1; k < 8; ++k)
                if (counts[k] > counts[best]) best = k;
            if (best == 4) v_dominant = true;
        }
        EXPECT_TRUE(v_dominant) << "seed " << seed;
    }
}

TEST(Layout, TooSmallSizeRejected) {
    EXPECT_THROW(generate_layout(1, 8), ContractError);
    EXPECT_THROW(generate_layout(1, 15), ContractError);
}

TEST(Layout, ClassHistogramCoversEveryClass) {
    std::int64_t counts[5] = {0};
    std::int64_t total = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const LayoutMap l = generate_layout(seed, 64);
        for (std::uint8_t c : l.cells) counts[c]++;
        total += static_cast<std::int64_t>(l.cells.size());
    }
    for (int k = 0; k < 5; ++k) {
        const double share = static_cast<double>(counts[k]) / static_cast<double>(total);
        EXPECT_GE(share, 0.01) << "class " << k << " share " << share;
    }
}

TEST(Render, ZeroAmplitudeGivesExactBaseColors) {
    auto styles = default_styles(5);
    for (auto& s : styles) s.amplitude = 0.0;
    const LayoutMap layout = generate_layout(7, 32);
    const Tensor img = render_ground_truth(layout, styles);
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c)
            for (int ch = 0; ch < 3; ++ch)
                EXPECT_DOUBLE_EQ(img.at(0, ch, r, c),
                                 styles[layout.at(r, c)].color[static_cast<size_t>(ch)]);
}

TEST(Render, PixelsStayInRange) {
    const auto styles = default_styles(5);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Tensor img = render_ground_truth(generate_layout(seed, 24), styles);
        for (double v : img.data) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Oracle, ExactRecoveryOnHundredSamples) {
    const auto styles = default_styles(5);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const LayoutMap layout = generate_layout(seed, 32);
        const LayoutMap seg = oracle_segment(render_ground_truth(layout, styles), styles);
        const SegMetrics m = metrics(seg, layout);
        ASSERT_DOUBLE_EQ(m.accuracy, 1.0) << "seed " << seed;
        ASSERT_DOUBLE_EQ(m.miou, 1.0) << "seed " << seed;
    }
}

TEST(Oracle, UniformGrayMapsToSingleNearestClass) {
    const auto styles = default_styles(5);
    const Tensor gray = Tensor::zeros({1, 3, 8, 8});
    const LayoutMap seg = oracle_segment(gray, styles);
    // (0, 0, 0) sits nearest to the vertical-strip color (0.05, 0.05, 0.05).
    for (std::uint8_t c : seg.cells) EXPECT_EQ(c, 4);
}

TEST(OneHot, PartitionOfUnityAndArgmaxRoundTrip) {
    const LayoutMap layout = generate_layout(11, 24);
    const Tensor oh = one_hot_encode(layout, 5);
    EXPECT_EQ(oh.shape, (Shape{1, 5, 24, 24}));
    for (int r = 0; r < 24; ++r)
        for (int c = 0; c < 24; ++c) {
            double s = 0.0;
            int argmax = 0;
            for (int k = 0; k < 5; ++k) {
                s += oh.at(0, k, r, c);
                if (oh.at(0, k, r, c) > oh.at(0, argmax, r, c)) argmax = k;
            }
            EXPECT_DOUBLE_EQ(s, 1.0);
            EXPECT_EQ(argmax, layout.at(r, c));
        }
}

TEST(OneHot, SingleClassDegenerateAndRangeError) {
    LayoutMap layout(4, 4, 1);
    const Tensor oh = one_hot_encode(layout, 1);
    for (double v : oh.data) EXPECT_DOUBLE_EQ(v, 1.0);

    LayoutMap bad(4, 4, 5);
    bad.at(1, 2) = 7;
    EXPECT_THROW(one_hot_encode(bad, 5), ContractError);
}

TEST(Metrics, HandComputedCases) {
    LayoutMap truth(2, 2, 2);  // all class 0
    LayoutMap pred(2, 2, 2);
    pred.at(0, 0) = 0;
    pred.at(0, 1) = 0;
    pred.at(1, 0) = 1;
    pred.at(1, 1) = 1;
    const SegMetrics m = metrics(pred, truth);
    EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
    EXPECT_DOUBLE_EQ(m.miou, 0.25);  // IoU(class0) = 0.5, IoU(class1) = 0

    // Identical maps.
    const SegMetrics ident = metrics(truth, truth);
    EXPECT_DOUBLE_EQ(ident.accuracy, 1.0);
    EXPECT_DOUBLE_EQ(ident.miou, 1.0);

    // Complementary checkerboards.
    LayoutMap a(2, 2, 2), b(2, 2, 2);
    a.at(0, 0) = 0;
    a.at(0, 1) = 1;
    a.at(1, 0) = 1;
    a.at(1, 1) = 0;
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) b.at(r, c) = 1 - a.at(r, c);
    const SegMetrics comp = metrics(a, b);
    EXPECT_DOUBLE_EQ(comp.accuracy, 0.0);
    EXPECT_DOUBLE_EQ(comp.miou, 0.0);

    LayoutMap wrong_size(3, 2, 2);
    EXPECT_THROW(metrics(a, wrong_size), ContractError);
}

TEST(Metrics, PermutationCovariant) {
    const LayoutMap t0 = generate_layout(3, 24);
    LayoutMap p0 = generate_layout(4, 24);
    const SegMetrics before = metrics(p0, t0);
    // Swap classes 1 <-> 2 consistently in both maps.
    auto swap12 = [](LayoutMap m) {
        for (auto& c : m.cells)
            if (c == 1) c = 2;
            else if (c == 2) c = 1;
        return m;
    };
    const SegMetrics after = metrics(swap12(p0), swap12(t0));
    EXPECT_DOUBLE_EQ(before.accuracy, after.accuracy);
    EXPECT_DOUBLE_EQ(before.miou, after.miou);
}

TEST(ImageIo, AffineEndpointsAndRoundTripBounds) {
    EXPECT_EQ(byte_from_unit(-1.0), 0);
    EXPECT_EQ(byte_from_unit(1.0), 255);
    EXPECT_EQ(byte_from_unit(0.0), 128);  // 127.5 rounds half away from zero

    Rng rng(55);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.uniform(-1.0, 1.0);
        const double back = unit_from_byte(byte_from_unit(v));
        EXPECT_LE(std::abs(back - v), 1.0 / 255.0);
    }
}

TEST(ImageIo, PpmAndPgmRoundTrips) {
    const std::string dir = temp_dir("dpgan_io_test");
    fs::create_directories(dir);
    const auto styles = default_styles(5);
    const LayoutMap layout = generate_layout(21, 24);
    const Tensor img = render_ground_truth(layout, styles);

    const std::string ppm = dir + "/img.ppm";
    write_ppm(ppm, img);
    const Tensor back = read_ppm(ppm);
    ASSERT_EQ(back.shape, img.shape);
    for (size_t i = 0; i < img.data.size(); ++i)
        EXPECT_LE(std::abs(back.data[i] - img.data[i]), 1.0 / 255.0);

    const std::string pgm = dir + "/layout.pgm";
    write_pgm(pgm, layout);
    const LayoutMap layout_back = read_pgm(pgm, 5);
    EXPECT_EQ(layout_back.cells, layout.cells);  // lossless integer round trip

    EXPECT_THROW(read_ppm(pgm), IoError);
    fs::remove_all(dir);
}

TEST(Dataset, RegenerationIsByteIdentical) {
    const std::string d1 = temp_dir("dpgan_ds_1");
    const std::string d2 = temp_dir("dpgan_ds_2");
    write_dataset(d1, Dataset::generate(42, 8, 32));
    write_dataset(d2, Dataset::generate(42, 8, 32));
    const auto b1 = dir_bytes(d1), b2 = dir_bytes(d2);
    ASSERT_EQ(b1.size(), 17u);  // manifest + 8 layout/truth pairs
    EXPECT_EQ(b1, b2);
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Dataset, LoadRestoresSamplesAndValidates) {
    const std::string dir = temp_dir("dpgan_ds_load");
    const Dataset d = Dataset::generate(7, 4, 32);
    write_dataset(dir, d);
    const Dataset loaded = load_dataset(dir);
    ASSERT_EQ(loaded.count(), 4);
    EXPECT_EQ(loaded.classes, 5);
    EXPECT_EQ(loaded.size, 32);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(loaded.layouts[static_cast<size_t>(i)].cells, d.layouts[static_cast<size_t>(i)].cells);
        // Truth images round-trip through 8-bit quantization.
        for (size_t j = 0; j < d.truths[static_cast<size_t>(i)].data.size(); ++j)
            EXPECT_LE(std::abs(loaded.truths[static_cast<size_t>(i)].data[j] -
                               d.truths[static_cast<size_t>(i)].data[j]),
                      1.0 / 255.0);
    }
    EXPECT_THROW(load_dataset(temp_dir("dpgan_ds_missing")), IoError);
    fs::remove_all(dir);
}
