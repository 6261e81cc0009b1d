#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dpgan/gan.hpp"
#include "dpgan/gradcheck.hpp"

namespace dpgan {

struct GradcheckSuiteCase {
    std::string name;
    std::function<GradcheckReport(std::uint64_t, const GradcheckOptions&)> run;
};

namespace detail {

inline Tensor random_input(Rng& rng, Shape s, bool avoid_kinks = false) {
    Tensor t = Tensor::zeros(s);
    for (double& v : t.data) {
        v = rng.uniform(-1.0, 1.0);
        if (avoid_kinks && std::abs(v) < 0.05) v += 0.1;
    }
    return t;
}

}  // namespace detail

// Every differentiable op exactly once, then each composite block. Each case
// seeds its own inputs/parameters from the supplied seed, so one (seed, case)
// pair always reproduces the same report.
inline std::vector<GradcheckSuiteCase> standard_gradcheck_suite() {
    using Fn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;
    std::vector<GradcheckSuiteCase> suite;

    auto op_case = [&](const std::string& name, std::vector<Shape> shapes, Fn fn,
                       bool avoid_kinks = false) {
        suite.push_back({name, [name, shapes, fn, avoid_kinks](std::uint64_t seed,
                                                               const GradcheckOptions& opt) {
                             Rng rng(mix64(seed, std::hash<std::string>{}(name)));
                             GradcheckCase cs;
                             cs.name = name;
                             for (size_t i = 0; i < shapes.size(); ++i)
                                 cs.inputs.emplace_back("in" + std::to_string(i),
                                                        detail::random_input(rng, shapes[i], avoid_kinks));
                             cs.fn = fn;
                             return gradcheck(cs, seed, opt);
                         }});
    };

    const Shape small{1, 3, 5, 5};
    op_case("add", {small, small},
            [](Tape&, const std::vector<Tensor>& in) { return add(in[0], in[1]); });
    op_case("sub", {small, small},
            [](Tape&, const std::vector<Tensor>& in) { return sub(in[0], in[1]); });
    op_case("mul", {small, small},
            [](Tape&, const std::vector<Tensor>& in) { return mul(in[0], in[1]); });
    op_case("scale", {small},
            [](Tape&, const std::vector<Tensor>& in) { return affine(in[0], -1.7, 0.3); });
    op_case("concat_channels", {Shape{1, 2, 4, 4}, Shape{1, 3, 4, 4}},
            [](Tape&, const std::vector<Tensor>& in) {
                return concat_channels({in[0], in[1]});
            });
    op_case("conv2d", {Shape{1, 2, 5, 5}, Shape{3, 2, 3, 3}, Shape{1, 3, 1, 1}},
            [](Tape&, const std::vector<Tensor>& in) {
                return conv2d(in[0], in[1], in[2], 1, 1, 1);
            });
    op_case("adaptive_avg_pool2d", {Shape{1, 2, 5, 5}},
            [](Tape&, const std::vector<Tensor>& in) { return adaptive_avg_pool2d(in[0], 2, 2); });
    op_case("upsample", {Shape{1, 2, 3, 3}},
            [](Tape&, const std::vector<Tensor>& in) { return upsample_bilinear(in[0], 7, 5); });
    op_case("leaky_relu", {small},
            [](Tape&, const std::vector<Tensor>& in) { return leaky_relu(in[0], 0.2); }, true);
    op_case("relu", {small},
            [](Tape&, const std::vector<Tensor>& in) { return relu(in[0]); }, true);
    op_case("tanh", {small},
            [](Tape&, const std::vector<Tensor>& in) { return dpgan::tanh(in[0]); });
    op_case("softmax_channels", {small},
            [](Tape&, const std::vector<Tensor>& in) { return softmax_channels(in[0]); });
    op_case("instance_norm", {Shape{1, 2, 4, 4}, Shape{1, 2, 1, 1}, Shape{1, 2, 1, 1}},
            [](Tape&, const std::vector<Tensor>& in) {
                return instance_norm(in[0], affine(in[1], 0.5, 1.0), in[2]);
            });
    op_case("mean", {small}, [](Tape&, const std::vector<Tensor>& in) { return mean(in[0]); });
    op_case("sum", {small}, [](Tape&, const std::vector<Tensor>& in) { return sum(in[0]); });
    op_case("l1_distance", {small, small},
            [](Tape&, const std::vector<Tensor>& in) { return l1_distance(in[0], in[1]); }, true);

    auto block_case = [&](const std::string& name, auto make_block, Shape in_shape) {
        suite.push_back({name, [name, make_block, in_shape](std::uint64_t seed,
                                                            const GradcheckOptions& opt) {
                             Rng rng(mix64(seed, std::hash<std::string>{}(name)));
                             auto block = std::make_shared<decltype(make_block(rng))>(make_block(rng));
                             GradcheckCase cs;
                             cs.name = name;
                             cs.inputs.emplace_back("f", detail::random_input(rng, in_shape));
                             block->visit(name, [&](const std::string& pname, Parameter& p) {
                                 cs.params.emplace_back(pname, &p);
                             });
                             cs.fn = [block](Tape& tape, const std::vector<Tensor>& in) {
                                 return block->forward(tape, in[0], true);
                             };
                             return gradcheck(cs, seed, opt);
                         }});
    };

    block_case("spm", [](Rng& rng) { return Spm::pyramid(rng, 4); }, Shape{1, 4, 6, 6});
    block_case("hrpm", [](Rng& rng) { return StripPool::make(rng, 4, true); }, Shape{1, 4, 6, 6});
    block_case("vrpm", [](Rng& rng) { return StripPool::make(rng, 4, false); }, Shape{1, 4, 6, 6});
    block_case("rpm_add", [](Rng& rng) { return Rpm::make(rng, 8, RpmVariant::AddResidual); },
               Shape{1, 8, 6, 6});
    block_case("rpm_concat", [](Rng& rng) { return Rpm::make(rng, 8, RpmVariant::ConcatResidual); },
               Shape{1, 8, 6, 6});
    for (int s = 0; s < 7; ++s) {
        const FusionStrategy strategy = static_cast<FusionStrategy>(s);
        block_case(std::string("fusion_") + to_string(strategy),
                   [strategy](Rng& rng) { return DpmFusion::make(rng, strategy, 4); },
                   Shape{1, 4, 6, 6});
    }

    // Full default-strategy generator at 8x8: the input is the (relaxed, real
    // valued) one-hot layout, the parameters are the whole network.
    suite.push_back(
        {"generator_b13", [](std::uint64_t seed, const GradcheckOptions& opt) {
             Rng rng(mix64(seed, 0xb13u));
             GeneratorConfig cfg;
             cfg.classes = 3;
             cfg.width = 8;
             cfg.ablation = Ablation::B13;
             auto g = std::make_shared<Generator>(Generator::make(rng, cfg));
             GradcheckCase cs;
             cs.name = "generator_b13";
             cs.inputs.emplace_back("layout", detail::random_input(rng, Shape{1, 3, 8, 8}));
             g->visit("g", [&](const std::string& pname, Parameter& p) {
                 cs.params.emplace_back(pname, &p);
             });
             cs.fn = [g](Tape& tape, const std::vector<Tensor>& in) {
                 return g->forward(tape, in[0], true);
             };
             return gradcheck(cs, seed, opt);
         }});

    return suite;
}

}  // namespace dpgan
