#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dpgan/gan.hpp"

namespace dpgan {

// Full run configuration. The JSON form is strict: unknown keys are rejected
// so a typo cannot silently fall back to a default, and the resolved echo
// re-parses to an identical configuration.
struct RunConfig {
    std::uint64_t seed = 1;
    Ablation ablation = Ablation::B13;
    GeneratorConfig generator;
    DiscriminatorConfig discriminator;
    LossWeights loss;
    TrainConfig train;

    // Propagates the top-level seed/ablation into the sub-configs.
    void resolve() {
        generator.ablation = ablation;
        train.seed = seed;
        discriminator.classes = generator.classes;
        discriminator.image_channels = generator.image_channels;
    }
};

namespace detail {

inline void require_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                         const std::string& where) {
    check(j.is_object(), "config: " + where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const auto& k : allowed)
            if (k == key) known = true;
        check(known, "config: unknown key \"" + key + "\" in " + where);
    }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline std::string to_string(TrainMode m) {
    return m == TrainMode::Gan ? "gan" : "reconstruction";
}

inline TrainMode train_mode_from_string(const std::string& s) {
    if (s == "gan") return TrainMode::Gan;
    if (s == "reconstruction") return TrainMode::Reconstruction;
    throw ContractError("config: unknown train mode \"" + s + "\"");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    detail::require_keys(j, {"seed", "ablation", "generator", "discriminator", "loss", "train"},
                         "top level");
    RunConfig cfg;
    detail::maybe(j, "seed", cfg.seed);
    if (j.contains("ablation")) cfg.ablation = ablation_from_string(j.at("ablation").get<std::string>());

    if (j.contains("generator")) {
        const auto& g = j.at("generator");
        detail::require_keys(g, {"classes", "width", "depth", "image_channels", "spm_levels"},
                             "generator");
        detail::maybe(g, "classes", cfg.generator.classes);
        detail::maybe(g, "width", cfg.generator.width);
        detail::maybe(g, "depth", cfg.generator.depth);
        detail::maybe(g, "image_channels", cfg.generator.image_channels);
        detail::maybe(g, "spm_levels", cfg.generator.spm_levels);
    }
    if (j.contains("discriminator")) {
        const auto& d = j.at("discriminator");
        detail::require_keys(d, {"scales", "widths"}, "discriminator");
        detail::maybe(d, "scales", cfg.discriminator.scales);
        if (d.contains("widths")) {
            const auto w = d.at("widths").get<std::vector<int>>();
            check(w.size() == 3, "config: discriminator.widths needs exactly 3 entries");
            for (size_t i = 0; i < 3; ++i) cfg.discriminator.widths[i] = w[i];
        }
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        detail::require_keys(l, {"gan", "feature_matching", "perceptual"}, "loss");
        detail::maybe(l, "gan", cfg.loss.gan);
        detail::maybe(l, "feature_matching", cfg.loss.feature_matching);
        detail::maybe(l, "perceptual", cfg.loss.perceptual);
        check(cfg.loss.gan >= 0 && cfg.loss.feature_matching >= 0 && cfg.loss.perceptual >= 0,
              "config: loss weights must be non-negative");
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::require_keys(
            t, {"mode", "lr_g", "lr_d", "beta1", "beta2", "eps", "batch", "steps"}, "train");
        if (t.contains("mode")) cfg.train.mode = train_mode_from_string(t.at("mode").get<std::string>());
        detail::maybe(t, "lr_g", cfg.train.lr_g);
        detail::maybe(t, "lr_d", cfg.train.lr_d);
        detail::maybe(t, "beta1", cfg.train.beta1);
        detail::maybe(t, "beta2", cfg.train.beta2);
        detail::maybe(t, "eps", cfg.train.eps);
        detail::maybe(t, "batch", cfg.train.batch);
        detail::maybe(t, "steps", cfg.train.steps);
        check(cfg.train.beta1 >= 0.0 && cfg.train.beta1 < 1.0 && cfg.train.beta2 >= 0.0 &&
                  cfg.train.beta2 < 1.0,
              "config: beta values must lie in [0, 1)");
    }
    cfg.resolve();
    return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["ablation"] = to_string(cfg.ablation);
    j["generator"] = {{"classes", cfg.generator.classes},
                      {"width", cfg.generator.width},
                      {"depth", cfg.generator.depth},
                      {"image_channels", cfg.generator.image_channels},
                      {"spm_levels", cfg.generator.spm_levels}};
    j["discriminator"] = {
        {"scales", cfg.discriminator.scales},
        {"widths", std::vector<int>{cfg.discriminator.widths[0], cfg.discriminator.widths[1],
                                    cfg.discriminator.widths[2]}}};
    j["loss"] = {{"gan", cfg.loss.gan},
                 {"feature_matching", cfg.loss.feature_matching},
                 {"perceptual", cfg.loss.perceptual}};
    j["train"] = {{"mode", to_string(cfg.train.mode)}, {"lr_g", cfg.train.lr_g},
                  {"lr_d", cfg.train.lr_d},           {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},         {"eps", cfg.train.eps},
                  {"batch", cfg.train.batch},         {"steps", cfg.train.steps}};
    return j;
}

inline std::vector<Ablation> parse_variant_list(const std::string& csv) {
    std::vector<Ablation> out;
    std::string cur;
    for (char ch : csv + ",") {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(ablation_from_string(cur));
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(ch))) {
            cur.push_back(ch);
        }
    }
    check(!out.empty(), "empty variant list");
    return out;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
    return config_from_json(j);
}

inline TrainState state_from_config(const RunConfig& cfg) {
    RunConfig r = cfg;
    r.resolve();
    return TrainState::create(r.generator, r.discriminator, r.loss, r.train);
}

inline nlohmann::json metrics_to_json(const StepMetrics& m) {
    return {{"step", m.step},       {"loss_gan_d", m.loss_gan_d}, {"loss_gan_g", m.loss_gan_g},
            {"loss_fm", m.loss_fm}, {"loss_p", m.loss_p},         {"total", m.total}};
}

}  // namespace dpgan
