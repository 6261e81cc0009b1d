#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpgan/tensor.hpp"

namespace dpgan {

// Trainable tensor with Adam state. bind() places the current value on a tape
// as a leaf; binding the same parameter twice on one tape reuses the leaf so
// gradients from several uses accumulate on a single node. A parameter binds
// to one tape at a time; concurrent forwards need distinct module instances.
struct Parameter {
    Tensor value;
    std::vector<double> m, v;  // Adam first/second moments
    std::int64_t t = 0;        // Adam step counter

    Tape* bound_tape = nullptr;
    std::uint64_t bound_serial = 0;
    int bound_node = -1;

    Parameter() = default;
    explicit Parameter(Tensor init) : value(std::move(init)) {
        m.assign(value.data.size(), 0.0);
        v.assign(value.data.size(), 0.0);
    }

    Tensor bind(Tape& tape, bool trainable = true) {
        if (!trainable) return value;
        if (bound_tape == &tape && bound_serial == tape.serial()) {
            Tensor reuse = value;
            reuse.tape = &tape;
            reuse.node = bound_node;
            return reuse;
        }
        Tensor leaf = tape.leaf(value, true);
        bound_tape = &tape;
        bound_serial = tape.serial();
        bound_node = leaf.node;
        return leaf;
    }

    bool bound_to(const Tape& tape) const {
        return bound_tape == &tape && bound_serial == tape.serial() && bound_node >= 0;
    }

    std::vector<double> grad(const Tape& tape) const {
        check(bound_to(tape), "parameter has no gradient on this tape");
        return tape.grad_node(bound_node);
    }
};

using ParamVisitor = std::function<void(const std::string&, Parameter&)>;

// Bias-corrected Adam. With beta1 = 0 the corrected first moment equals the
// current gradient.
struct Adam {
    double lr = 1e-4;
    double beta1 = 0.0;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(const Tape& tape, const std::vector<Parameter*>& params) const {
        for (Parameter* p : params) {
            check(p->bound_to(tape), "adam_step: missing gradients (parameter not bound to this tape)");
            const std::vector<double> g = tape.grad_node(p->bound_node);
            p->t += 1;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p->t));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p->t));
            for (size_t i = 0; i < g.size(); ++i) {
                p->m[i] = beta1 * p->m[i] + (1.0 - beta1) * g[i];
                p->v[i] = beta2 * p->v[i] + (1.0 - beta2) * g[i] * g[i];
                const double mhat = p->m[i] / bc1;
                const double vhat = p->v[i] / bc2;
                p->value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

inline Tensor scaled_normal(Rng& rng, Shape s, int fan_in, double gain) {
    Tensor t = Tensor::zeros(s);
    const double stdev = std::sqrt(gain / static_cast<double>(fan_in));
    for (double& v : t.data) v = stdev * rng.normal();
    return t;
}

// 2-D convolution layer; kernels may be rectangular (1x3 / 3x1 strip convs).
// gain 2 (He) suits conv+relu stages; purely linear convs use gain 1 so
// variance is preserved through stacked blocks.
struct Conv2d {
    Parameter w, b;
    int stride = 1, pad_h = 0, pad_w = 0;

    static Conv2d make(Rng& rng, int cin, int cout, int kh, int kw, int stride = 1, int pad_h = 0,
                       int pad_w = 0, double gain = 2.0) {
        Conv2d conv;
        conv.w = Parameter(scaled_normal(rng, Shape{cout, cin, kh, kw}, cin * kh * kw, gain));
        conv.b = Parameter(Tensor::zeros(Shape{1, cout, 1, 1}));
        conv.stride = stride;
        conv.pad_h = pad_h;
        conv.pad_w = pad_w;
        return conv;
    }

    int out_channels() const { return w.value.shape.n; }

    Tensor forward(Tape& tape, const Tensor& x, bool trainable) {
        return conv2d(x, w.bind(tape, trainable), b.bind(tape, trainable), stride, pad_h, pad_w);
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
    }
};

struct InstanceNorm {
    Parameter gamma, beta;
    double eps = 1e-5;

    static InstanceNorm make(int channels) {
        InstanceNorm n;
        n.gamma = Parameter(Tensor::full(Shape{1, channels, 1, 1}, 1.0));
        n.beta = Parameter(Tensor::zeros(Shape{1, channels, 1, 1}));
        return n;
    }

    Tensor forward(Tape& tape, const Tensor& x, bool trainable, bool frozen_stats = false) {
        return instance_norm(x, gamma.bind(tape, trainable), beta.bind(tape, trainable), eps,
                             frozen_stats);
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + ".gamma", gamma);
        fn(prefix + ".beta", beta);
    }
};

// ---------------------------------------------------------------------------
// Tensor container file: text header + little-endian float64 blob.
//
//   dpgan-tensors v1
//   meta <key> <value to end of line>        (zero or more)
//   tensor <name> <n> <c> <h> <w> <offset>   (zero or more, offset in bytes)
//   blob <total-bytes>
//   <raw little-endian doubles>
//
// Round-trips are bit-exact; loading validates sizes before any state is
// exposed, so a truncated file yields an error and no partial container.
// ---------------------------------------------------------------------------

struct Container {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, Tensor>> entries;

    const std::string* find_meta(const std::string& key) const {
        for (const auto& [k, v] : meta)
            if (k == key) return &v;
        return nullptr;
    }
    const Tensor* find(const std::string& name) const {
        for (const auto& [k, v] : entries)
            if (k == name) return &v;
        return nullptr;
    }
};

namespace detail {

inline void append_le64(std::string& out, double v) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double read_le64(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace detail

inline constexpr const char* kContainerMagic = "dpgan-tensors v1";

inline void save_container(const std::string& path, const Container& c) {
    std::ostringstream header;
    header << kContainerMagic << "\n";
    for (const auto& [k, v] : c.meta) header << "meta " << k << " " << v << "\n";
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.entries) {
        header << "tensor " << name << " " << t.shape.n << " " << t.shape.c << " " << t.shape.h
               << " " << t.shape.w << " " << offset << "\n";
        offset += static_cast<std::uint64_t>(t.shape.numel()) * 8;
    }
    header << "blob " << offset << "\n";

    std::string blob;
    blob.reserve(offset);
    for (const auto& [name, t] : c.entries)
        for (double v : t.data) detail::append_le64(blob, v);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::string h = header.str();
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

inline Container load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);

    Container c;
    std::string line;
    if (!std::getline(f, line) || line != kContainerMagic)
        throw IoError(path + ": bad magic or unsupported container version");

    struct PendingEntry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<PendingEntry> pending;
    std::uint64_t blob_bytes = 0;
    bool saw_blob = false;
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "meta") {
            std::string key;
            ls >> key;
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            c.meta.emplace_back(key, rest);
        } else if (tag == "tensor") {
            PendingEntry e;
            ls >> e.name >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w >> e.offset;
            if (ls.fail()) throw IoError(path + ": malformed tensor line: " + line);
            pending.push_back(std::move(e));
        } else if (tag == "blob") {
            ls >> blob_bytes;
            if (ls.fail()) throw IoError(path + ": malformed blob line");
            saw_blob = true;
            break;
        } else {
            throw IoError(path + ": unexpected header line: " + line);
        }
    }
    if (!saw_blob) throw IoError(path + ": missing blob section");

    std::uint64_t expect = 0;
    for (const auto& e : pending) {
        if (e.offset != expect) throw IoError(path + ": tensor offsets are not contiguous");
        expect += static_cast<std::uint64_t>(e.shape.numel()) * 8;
    }
    if (expect != blob_bytes) throw IoError(path + ": blob size disagrees with tensor table");

    std::string blob(blob_bytes, '\0');
    f.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
    if (static_cast<std::uint64_t>(f.gcount()) != blob_bytes)
        throw IoError(path + ": truncated blob (expected " + std::to_string(blob_bytes) +
                      " bytes, got " + std::to_string(f.gcount()) + ")");

    for (const auto& e : pending) {
        Tensor t = Tensor::zeros(e.shape);
        const char* p = blob.data() + e.offset;
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = detail::read_le64(p + 8 * i);
        c.entries.emplace_back(e.name, std::move(t));
    }
    return c;
}

}  // namespace dpgan
