#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dpgan/nn.hpp"

using namespace dpgan;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// Scalar Adam recurrence, written independently of the library update loop.
struct ScalarAdamOracle {
    double m = 0.0, v = 0.0;
    long t = 0;
    double step(double x, double g, double lr, double b1, double b2, double eps) {
        t += 1;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        return x - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

}  // namespace

TEST(Adam, ZeroGradientLeavesValueAndIncrementsStep) {
    Parameter p(Tensor::full({1, 1, 1, 2}, 0.75));
    Tape tape;
    Tensor leaf = p.bind(tape);
    Tensor other = tape.leaf(Tensor::full({1, 1, 1, 2}, 1.0));
    tape.backward(sum(other));  // p unused: gradient is zero
    Adam opt{.lr = 0.1, .beta1 = 0.0, .beta2 = 0.999, .eps = 1e-8};
    opt.step(tape, {&p});
    EXPECT_EQ(p.t, 1);
    for (double v : p.value.data) EXPECT_DOUBLE_EQ(v, 0.75);
}

TEST(Adam, BiasCorrectedFirstStepWithBetaOneZero) {
    // g = 3 everywhere: vhat = 9 after correction, update = lr*3/(3+eps) ~ lr.
    Parameter p(Tensor::full({1, 1, 1, 1}, 5.0));
    Tape tape;
    Tensor leaf = p.bind(tape);
    tape.backward(sum(affine(leaf, 3.0, 0.0)));
    const double lr = 0.01;
    Adam opt{.lr = lr, .beta1 = 0.0, .beta2 = 0.999, .eps = 1e-8};
    opt.step(tape, {&p});
    const double delta = 5.0 - p.value.data[0];
    EXPECT_NEAR(delta, lr * 3.0 / (3.0 + 1e-8), 1e-15);
    EXPECT_NEAR(delta, lr, 1e-8);
}

TEST(Adam, MatchesScalarOracleOverSuccessiveSteps) {
    const double lr = 0.05, b1 = 0.0, b2 = 0.999, eps = 1e-8;
    ScalarAdamOracle oracle;
    double x = 2.0;
    Adam opt{.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps};
    // Constant gradient of 1.7 per step via loss = 1.7 * p.
    Parameter p(Tensor::full({1, 1, 1, 1}, 2.0));
    for (int step = 0; step < 2; ++step) {
        Tape tape;
        Tensor leaf = p.bind(tape);
        tape.backward(sum(affine(leaf, 1.7, 0.0)));
        opt.step(tape, {&p});
        x = oracle.step(x, 1.7, lr, b1, b2, eps);
        ASSERT_NEAR(p.value.data[0], x, 1e-12);
    }
    EXPECT_EQ(p.t, 2);
}

TEST(Adam, MissingGradientsRejected) {
    Parameter p(Tensor::full({1, 1, 1, 1}, 1.0));
    Tape tape;
    Adam opt;
    EXPECT_THROW(opt.step(tape, {&p}), ContractError);
}

TEST(Parameter, RebindingOnOneTapeReusesTheLeaf) {
    Parameter p(Tensor::full({1, 1, 1, 1}, 3.0));
    Tape tape;
    Tensor a = p.bind(tape);
    Tensor b = p.bind(tape);
    EXPECT_EQ(a.node, b.node);
    // loss = p*p + p  ->  dp = 2p + 1 = 7
    tape.backward(sum(add(mul(a, b), a)));
    EXPECT_DOUBLE_EQ(p.grad(tape)[0], 7.0);
}

TEST(Parameter, FrozenBindIsConstant) {
    Parameter p(Tensor::full({1, 1, 1, 1}, 3.0));
    Tape tape;
    Tensor c = p.bind(tape, false);
    EXPECT_FALSE(c.recorded());
    EXPECT_FALSE(p.bound_to(tape));
}

TEST(Container, BitExactRoundTripAndIdempotentBytes) {
    Rng rng(421);
    Container c;
    c.meta.emplace_back("step", "12");
    c.meta.emplace_back("note", "value with spaces");
    Tensor a = Tensor::zeros({2, 3, 4, 5});
    for (double& v : a.data) v = rng.normal() * 1e3;
    a.data[0] = 0.1 + 0.2;  // not exactly representable; must survive bit-for-bit
    Tensor b = Tensor::zeros({1, 1, 1, 7});
    for (double& v : b.data) v = rng.uniform(-1, 1);
    c.entries.emplace_back("gen.conv.w", a);
    c.entries.emplace_back("gen.conv.b", b);

    const std::string p1 = temp_path("dpgan_container_1.bin");
    const std::string p2 = temp_path("dpgan_container_2.bin");
    save_container(p1, c);
    Container loaded = load_container(p1);
    ASSERT_EQ(loaded.entries.size(), 2u);
    EXPECT_EQ(loaded.entries[0].first, "gen.conv.w");
    EXPECT_EQ(loaded.entries[0].second.shape, a.shape);
    EXPECT_EQ(loaded.entries[0].second.data, a.data);
    EXPECT_EQ(loaded.entries[1].second.data, b.data);
    ASSERT_NE(loaded.find_meta("note"), nullptr);
    EXPECT_EQ(*loaded.find_meta("note"), "value with spaces");

    save_container(p2, loaded);
    EXPECT_EQ(read_file(p1), read_file(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST(Container, TruncatedFileIsStructuredError) {
    Container c;
    Tensor a = Tensor::full({1, 1, 2, 2}, 1.5);
    c.entries.emplace_back("w", a);
    const std::string path = temp_path("dpgan_container_trunc.bin");
    save_container(path, c);
    std::string bytes = read_file(path);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
    f.close();
    EXPECT_THROW(load_container(path), IoError);
    std::remove(path.c_str());
}

TEST(Container, VersionMismatchRejected) {
    const std::string path = temp_path("dpgan_container_badmagic.bin");
    std::ofstream f(path, std::ios::binary);
    f << "dpgan-tensors v999\nblob 0\n";
    f.close();
    EXPECT_THROW(load_container(path), IoError);
    std::remove(path.c_str());
}

TEST(Rng, StateRoundTripReproducesStream) {
    Rng a(99);
    (void)a.normal();
    (void)a.uniform();
    const std::string s = a.state();
    Rng b(1);
    b.restore(s);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}
