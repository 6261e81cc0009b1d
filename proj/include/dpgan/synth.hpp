#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpgan/tensor.hpp"

namespace dpgan {

// Per-pixel class-index grid. Default class roles (K = 5): 0 background,
// 1 square block, 2 wide rectangle, 3 horizontal strip, 4 vertical strip.
struct LayoutMap {
    int width = 0, height = 0;
    int classes = 0;
    std::vector<std::uint8_t> cells;  // row-major

    LayoutMap() = default;
    LayoutMap(int w, int h, int k) : width(w), height(h), classes(k) {
        cells.assign(static_cast<size_t>(w) * h, 0);
    }

    std::uint8_t& at(int row, int col) { return cells[static_cast<size_t>(row) * width + col]; }
    std::uint8_t at(int row, int col) const { return cells[static_cast<size_t>(row) * width + col]; }
};

// Flat color plus a low-amplitude sinusoid on a single channel. Keeping the
// texture on one channel bounds the L1 perturbation by the amplitude, which
// keeps the nearest-color segmenter exact (see oracle_segment).
struct ClassStyle {
    std::array<double, 3> color{};
    int texture_axis = 0;     // 0: varies along x, 1: along y
    int texture_channel = 0;  // which RGB channel carries the sinusoid
    double amplitude = 0.15;  // <= 0.2
    double frequency = 1.0 / 7.0;
    double phase = 0.0;
};

// Base palette: pairwise L1 separation >= 0.8 (the default five are >= 1.75).
// Class 4 (vertical strip) sits near zero, far from every other color.
inline std::vector<ClassStyle> default_styles(int classes) {
    static constexpr std::array<std::array<double, 3>, 8> kPalette = {{
        {-0.85, -0.85, -0.85},
        {0.9, 0.1, -0.8},
        {-0.8, 0.9, 0.1},
        {0.1, -0.8, 0.9},
        {0.05, 0.05, 0.05},
        {0.9, 0.9, 0.9},
        {-0.9, 0.1, 0.9},
        {0.9, -0.85, 0.85},
    }};
    check(classes >= 1 && classes <= static_cast<int>(kPalette.size()),
          "default_styles: supported class counts are 1.." + std::to_string(kPalette.size()));
    std::vector<ClassStyle> styles(static_cast<size_t>(classes));
    for (int k = 0; k < classes; ++k) {
        auto& s = styles[static_cast<size_t>(k)];
        s.color = kPalette[static_cast<size_t>(k)];
        s.texture_axis = k % 2;
        s.texture_channel = k % 3;
        s.amplitude = 0.15;
        s.frequency = 1.0 / 7.0;
        s.phase = 0.9 * k;
    }
    return styles;
}

// Seeded layout: 2-5 blocks, then one horizontal strip (height 1-3 spanning
// >= 75% of the width) and one vertical strip (width 1-3 spanning >= 75% of
// the height). Later objects overwrite earlier ones.
inline LayoutMap generate_layout(std::uint64_t seed, int size, int classes = 5) {
    check(size >= 16, "generate_layout: size " + std::to_string(size) +
                          " is too small to place strips (minimum 16)");
    check(classes >= 5, "generate_layout: needs at least 5 classes for the object roles");
    LayoutMap layout(size, size, classes);
    Rng rng(mix64(seed, 0x4c41594full));

    auto fill_rect = [&](int r0, int c0, int h, int w, std::uint8_t cls) {
        for (int r = r0; r < r0 + h; ++r)
            for (int c = c0; c < c0 + w; ++c) layout.at(r, c) = cls;
    };

    std::vector<std::uint8_t> block_classes = {1, 2};
    for (int k = 5; k < classes; ++k) block_classes.push_back(static_cast<std::uint8_t>(k));

    const int blocks = static_cast<int>(rng.range(2, 5));
    for (int b = 0; b < blocks; ++b) {
        const std::uint8_t cls = block_classes[rng.below(block_classes.size())];
        int bw, bh;
        if (cls == 2) {  // wide rectangle
            bw = static_cast<int>(rng.range(size / 4, size / 2));
            bh = static_cast<int>(rng.range(size / 8, size / 4));
        } else {
            bw = bh = static_cast<int>(rng.range(size / 8, size / 4));
        }
        const int r0 = static_cast<int>(rng.range(0, size - bh));
        const int c0 = static_cast<int>(rng.range(0, size - bw));
        fill_rect(r0, c0, bh, bw, cls);
    }

    const int min_span = (3 * size + 3) / 4;
    {
        const int t = static_cast<int>(rng.range(1, 3));
        const int len = static_cast<int>(rng.range(min_span, size));
        const int r0 = static_cast<int>(rng.range(0, size - t));
        const int c0 = static_cast<int>(rng.range(0, size - len));
        fill_rect(r0, c0, t, len, 3);
    }
    {
        const int t = static_cast<int>(rng.range(1, 3));
        const int len = static_cast<int>(rng.range(min_span, size));
        const int r0 = static_cast<int>(rng.range(0, size - len));
        const int c0 = static_cast<int>(rng.range(0, size - t));
        fill_rect(r0, c0, len, t, 4);
    }
    return layout;
}

inline Tensor render_ground_truth(const LayoutMap& layout, const std::vector<ClassStyle>& styles) {
    check(static_cast<int>(styles.size()) >= layout.classes,
          "render_ground_truth: style table does not cover all classes");
    Tensor img = Tensor::zeros({1, 3, layout.height, layout.width});
    for (int r = 0; r < layout.height; ++r) {
        for (int c = 0; c < layout.width; ++c) {
            const ClassStyle& s = styles[layout.at(r, c)];
            const int coord = s.texture_axis == 0 ? c : r;
            const double tex =
                s.amplitude * std::sin(2.0 * 3.14159265358979323846 * s.frequency * coord + s.phase);
            for (int ch = 0; ch < 3; ++ch) {
                double v = s.color[static_cast<size_t>(ch)] + (ch == s.texture_channel ? tex : 0.0);
                img.at(0, ch, r, c) = std::clamp(v, -1.0, 1.0);
            }
        }
    }
    return img;
}

inline Tensor one_hot_encode(const LayoutMap& layout, int classes) {
    Tensor out = Tensor::zeros({1, classes, layout.height, layout.width});
    for (int r = 0; r < layout.height; ++r)
        for (int c = 0; c < layout.width; ++c) {
            const int cls = layout.at(r, c);
            check(cls < classes, "one_hot_encode: class index " + std::to_string(cls) +
                                     " out of range for K = " + std::to_string(classes));
            out.at(0, cls, r, c) = 1.0;
        }
    return out;
}

// Nearest base color in L1; ties break toward the lowest class index. Stands
// in for a pretrained segmenter: exact on rendered images because the texture
// perturbs L1 distance by at most `amplitude` < half the palette separation.
inline LayoutMap oracle_segment(const Tensor& img, const std::vector<ClassStyle>& styles) {
    check(img.shape.n == 1 && img.shape.c == 3, "oracle_segment: expected a (1, 3, H, W) image");
    LayoutMap out(img.shape.w, img.shape.h, static_cast<int>(styles.size()));
    for (int r = 0; r < img.shape.h; ++r)
        for (int c = 0; c < img.shape.w; ++c) {
            int best = 0;
            double best_d = 1e300;
            for (size_t k = 0; k < styles.size(); ++k) {
                double d = 0.0;
                for (int ch = 0; ch < 3; ++ch)
                    d += std::abs(img.at(0, ch, r, c) - styles[k].color[static_cast<size_t>(ch)]);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(k);
                }
            }
            out.at(r, c) = static_cast<std::uint8_t>(best);
        }
    return out;
}

struct SegMetrics {
    double accuracy = 0.0;
    double miou = 0.0;
};

// Pixel accuracy and mean IoU; classes absent from both maps are excluded
// from the mean.
inline SegMetrics metrics(const LayoutMap& pred, const LayoutMap& truth) {
    check(pred.width == truth.width && pred.height == truth.height,
          "metrics: size mismatch between prediction and truth");
    const int k = std::max(pred.classes, truth.classes);
    std::vector<std::int64_t> inter(static_cast<size_t>(k), 0), pred_n(static_cast<size_t>(k), 0),
        truth_n(static_cast<size_t>(k), 0);
    std::int64_t correct = 0;
    const std::int64_t total = static_cast<std::int64_t>(pred.width) * pred.height;
    for (std::int64_t i = 0; i < total; ++i) {
        const int p = pred.cells[static_cast<size_t>(i)], t = truth.cells[static_cast<size_t>(i)];
        pred_n[static_cast<size_t>(p)]++;
        truth_n[static_cast<size_t>(t)]++;
        if (p == t) {
            correct++;
            inter[static_cast<size_t>(p)]++;
        }
    }
    SegMetrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    double iou_sum = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        const std::int64_t uni =
            pred_n[static_cast<size_t>(c)] + truth_n[static_cast<size_t>(c)] - inter[static_cast<size_t>(c)];
        if (uni == 0) continue;
        iou_sum += static_cast<double>(inter[static_cast<size_t>(c)]) / static_cast<double>(uni);
        present++;
    }
    m.miou = present == 0 ? 0.0 : iou_sum / present;
    return m;
}

// ---------------------------------------------------------------------------
// 8-bit image files. RGB images go to binary PPM (P6) with [-1, 1] mapped
// affinely onto [0, 255] (round half away from zero); layouts go to binary
// PGM (P5) storing raw class indices, which round-trips exactly.
// ---------------------------------------------------------------------------

inline std::uint8_t byte_from_unit(double v) {
    const double scaled = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
    const double rounded = std::floor(scaled + 0.5);  // half away from zero; scaled >= 0
    return static_cast<std::uint8_t>(std::clamp(rounded, 0.0, 255.0));
}

inline double unit_from_byte(std::uint8_t b) { return b / 255.0 * 2.0 - 1.0; }

inline void write_ppm(const std::string& path, const Tensor& img) {
    check(img.shape.n == 1 && img.shape.c == 3, "write_ppm: expected a (1, 3, H, W) image");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "P6\n" << img.shape.w << " " << img.shape.h << "\n255\n";
    for (int r = 0; r < img.shape.h; ++r)
        for (int c = 0; c < img.shape.w; ++c)
            for (int ch = 0; ch < 3; ++ch)
                f.put(static_cast<char>(byte_from_unit(img.at(0, ch, r, c))));
    if (!f) throw IoError("write failed: " + path);
}

namespace detail {

inline void read_pnm_header(std::ifstream& f, const std::string& path, const char* magic, int& w,
                            int& h) {
    std::string m;
    int maxval = 0;
    f >> m >> w >> h >> maxval;
    if (!f || m != magic || w <= 0 || h <= 0 || maxval != 255)
        throw IoError(path + ": malformed " + magic + " header");
    f.get();  // single whitespace before binary payload
}

}  // namespace detail

inline Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    int w = 0, h = 0;
    detail::read_pnm_header(f, path, "P6", w, h);
    std::vector<char> bytes(static_cast<size_t>(w) * h * 3);
    f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<size_t>(f.gcount()) != bytes.size()) throw IoError(path + ": truncated pixel data");
    Tensor img = Tensor::zeros({1, 3, h, w});
    size_t i = 0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int ch = 0; ch < 3; ++ch)
                img.at(0, ch, r, c) = unit_from_byte(static_cast<std::uint8_t>(bytes[i++]));
    return img;
}

inline void write_pgm(const std::string& path, const LayoutMap& layout) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "P5\n" << layout.width << " " << layout.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(layout.cells.data()),
            static_cast<std::streamsize>(layout.cells.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline LayoutMap read_pgm(const std::string& path, int classes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    int w = 0, h = 0;
    detail::read_pnm_header(f, path, "P5", w, h);
    LayoutMap layout(w, h, classes);
    f.read(reinterpret_cast<char*>(layout.cells.data()),
           static_cast<std::streamsize>(layout.cells.size()));
    if (static_cast<size_t>(f.gcount()) != layout.cells.size())
        throw IoError(path + ": truncated pixel data");
    for (std::uint8_t c : layout.cells)
        check(c < classes, path + ": class index " + std::to_string(c) + " >= K");
    return layout;
}

// ---------------------------------------------------------------------------
// Dataset: paired layout / rendered-truth samples, reproducible from
// (seed, count, size, K). Per-sample seeds derive from mix64(seed, index).
// ---------------------------------------------------------------------------

struct Dataset {
    std::uint64_t seed = 0;
    int size = 0;
    int classes = 0;
    std::vector<ClassStyle> styles;
    std::vector<LayoutMap> layouts;
    std::vector<Tensor> truths;

    int count() const { return static_cast<int>(layouts.size()); }

    static Dataset generate(std::uint64_t seed, int count, int size, int classes = 5) {
        Dataset d;
        d.seed = seed;
        d.size = size;
        d.classes = classes;
        d.styles = default_styles(classes);
        for (int i = 0; i < count; ++i) {
            d.layouts.push_back(generate_layout(mix64(seed, static_cast<std::uint64_t>(i)), size, classes));
            d.truths.push_back(render_ground_truth(d.layouts.back(), d.styles));
        }
        return d;
    }
};

inline constexpr const char* kDatasetSchema = "dpgan-dataset-v1";
inline constexpr const char* kManifestName = "manifest.json";

inline nlohmann::json style_to_json(const ClassStyle& s) {
    return nlohmann::json{{"color", s.color},
                          {"texture_axis", s.texture_axis},
                          {"texture_channel", s.texture_channel},
                          {"amplitude", s.amplitude},
                          {"frequency", s.frequency},
                          {"phase", s.phase}};
}

inline ClassStyle style_from_json(const nlohmann::json& j) {
    ClassStyle s;
    const auto& c = j.at("color");
    for (int i = 0; i < 3; ++i) s.color[static_cast<size_t>(i)] = c.at(static_cast<size_t>(i)).get<double>();
    s.texture_axis = j.at("texture_axis").get<int>();
    s.texture_channel = j.at("texture_channel").get<int>();
    s.amplitude = j.at("amplitude").get<double>();
    s.frequency = j.at("frequency").get<double>();
    s.phase = j.at("phase").get<double>();
    return s;
}

inline std::string sample_name(const char* stem, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%05d", stem, index);
    return buf;
}

inline void write_dataset(const std::string& dir, const Dataset& d) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json files = nlohmann::json::array();
    for (int i = 0; i < d.count(); ++i) {
        const std::string layout_file = sample_name("layout", i) + ".pgm";
        const std::string truth_file = sample_name("truth", i) + ".ppm";
        write_pgm((fs::path(dir) / layout_file).string(), d.layouts[static_cast<size_t>(i)]);
        write_ppm((fs::path(dir) / truth_file).string(), d.truths[static_cast<size_t>(i)]);
        files.push_back({{"layout", layout_file}, {"truth", truth_file}});
    }
    nlohmann::json styles = nlohmann::json::array();
    for (const auto& s : d.styles) styles.push_back(style_to_json(s));
    const nlohmann::json manifest = {{"schema", kDatasetSchema}, {"seed", d.seed},
                                     {"size", d.size},           {"classes", d.classes},
                                     {"count", d.count()},       {"styles", styles},
                                     {"files", files}};
    std::ofstream f((fs::path(dir) / kManifestName).string(), std::ios::trunc);
    if (!f) throw IoError("cannot write manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string manifest_path = (fs::path(dir) / kManifestName).string();
    std::ifstream f(manifest_path);
    if (!f) throw IoError("missing manifest: " + manifest_path);
    nlohmann::json manifest;
    try {
        f >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path + ": " + e.what());
    }
    if (manifest.value("schema", "") != kDatasetSchema)
        throw IoError(manifest_path + ": unknown dataset schema");

    Dataset d;
    d.seed = manifest.at("seed").get<std::uint64_t>();
    d.size = manifest.at("size").get<int>();
    d.classes = manifest.at("classes").get<int>();
    for (const auto& j : manifest.at("styles")) d.styles.push_back(style_from_json(j));
    for (const auto& entry : manifest.at("files")) {
        d.layouts.push_back(
            read_pgm((fs::path(dir) / entry.at("layout").get<std::string>()).string(), d.classes));
        d.truths.push_back(read_ppm((fs::path(dir) / entry.at("truth").get<std::string>()).string()));
    }
    if (static_cast<int>(d.layouts.size()) != manifest.at("count").get<int>())
        throw IoError(manifest_path + ": file list disagrees with count");
    return d;
}

}  // namespace dpgan
