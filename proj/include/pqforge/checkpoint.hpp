#pragma once

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

#include "pqforge/layers.hpp"

namespace pqforge {

// Checkpoints reuse the bundle envelope (versioned JSON with a checksum) but
// carry the full-precision training state: weights as exact bit patterns,
// mask state, quantizer specs and the learnable compression parameters.

namespace checkpoint_detail {

inline std::string f64_hex(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    return hex64(bits);
}

inline double f64_unhex(const std::string& s) {
    const uint64_t bits = std::stoull(s, nullptr, 16);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

template <class T>
nlohmann::json tensor_json(const Tensor<T>& t) {
    nlohmann::json arr = nlohmann::json::array();
    for (size_t i = 0; i < t.size(); ++i) arr.push_back(f64_hex(static_cast<double>(t[i])));
    return arr;
}

template <class T>
void tensor_restore(const nlohmann::json& arr, Tensor<T>& t) {
    if (arr.size() != t.size()) throw DataError("checkpoint: tensor size mismatch");
    for (size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(f64_unhex(arr[i].get<std::string>()));
}

inline nlohmann::json spec_json(const FixedPointSpec& s) {
    nlohmann::json j;
    j["k"] = s.keep_negative;
    j["i"] = s.integer_bits;
    j["f"] = s.fractional_bits;
    j["round"] = to_string(s.round_mode);
    j["overflow"] = to_string(s.overflow_mode);
    return j;
}

inline FixedPointSpec spec_restore(const nlohmann::json& j) {
    FixedPointSpec s;
    s.keep_negative = j.at("k").get<int>();
    s.integer_bits = j.at("i").get<int>();
    s.fractional_bits = j.at("f").get<int>();
    s.round_mode = parse_round_mode(j.at("round").get<std::string>());
    s.overflow_mode = parse_overflow_mode(j.at("overflow").get<std::string>());
    return s;
}

} // namespace checkpoint_detail

template <class T>
std::string checkpoint_to_json(ModelGraph<T>& g) {
    using nlohmann::json;
    namespace cd = checkpoint_detail;
    json body;
    body["config"] = dump_config(g.config);
    body["norm_mean"] = g.norm_mean;
    body["norm_std"] = g.norm_std;
    body["desc"] = json::parse(dump_model_desc(g.desc));
    body["dtype"] = sizeof(T) == 8 ? "f64" : "f32";
    json layers = json::array();
    for (auto& l : g.layers) {
        json lj;
        lj["name"] = l.name;
        if (l.has_weights()) {
            lj["weight"] = cd::tensor_json(l.weight.var->val);
            lj["bias"] = cd::tensor_json(l.bias.var->val);
            lj["weight_spec"] = cd::spec_json(l.weight_quant.spec);
            lj["weight_quant_enabled"] = l.weight_quant.enabled;
        }
        if (l.kind == LayerKind::batchnorm) {
            lj["gamma"] = cd::tensor_json(l.gamma.var->val);
            lj["beta"] = cd::tensor_json(l.beta.var->val);
            lj["running_mean"] = cd::tensor_json(l.running_mean);
            lj["running_var"] = cd::tensor_json(l.running_var);
        }
        if (l.mask) {
            json mj;
            mj["method"] = to_string(l.mask->method);
            mj["granularity"] = to_string(l.mask->granularity);
            mj["hard"] = l.mask->hard;
            if (l.mask->hard_mask.size()) mj["hard_mask"] = cd::tensor_json(l.mask->hard_mask);
            if (!l.mask->unit_mask.empty()) mj["unit_mask"] = l.mask->unit_mask;
            if (l.mask->threshold) mj["threshold"] = cd::tensor_json(l.mask->threshold->val);
            if (l.mask->s_logits) {
                mj["s_logits"] = cd::tensor_json(l.mask->s_logits->val);
                mj["s_init"] = cd::tensor_json(l.mask->s_init);
            }
            mj["alpha"] = static_cast<double>(l.mask->alpha);
            mj["beta"] = static_cast<double>(l.mask->beta);
            mj["lambda"] = static_cast<double>(l.mask->lambda);
            mj["pdp_budget"] = static_cast<double>(l.mask->pdp_budget);
            mj["pdp_threshold"] = static_cast<double>(l.mask->pdp_threshold);
            lj["mask"] = mj;
        }
        if (l.use_hgq && l.weight_hgq.initialized()) {
            lj["hgq_fw"] = cd::tensor_json(l.weight_hgq.f_cont->val);
            if (l.in_hgq.initialized()) {
                lj["hgq_fx"] = cd::tensor_json(l.in_hgq.f_cont->val);
                lj["hgq_range"] = cd::tensor_json(l.in_hgq.running_maxabs);
            }
        }
        if (l.relu_mult.var) lj["relu_mult"] = cd::tensor_json(l.relu_mult.var->val);
        layers.push_back(lj);
    }
    body["layers"] = layers;

    json j;
    j["format"] = "pqforge-checkpoint";
    j["version"] = 1;
    j["checksum"] = hex64(fnv1a64(body.dump()));
    j["model"] = std::move(body);
    return j.dump(1);
}

template <class T>
void save_checkpoint(ModelGraph<T>& g, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("checkpoint: cannot write \"" + path + "\"");
    f << checkpoint_to_json(g);
}

template <class T>
ModelGraph<T> checkpoint_from_json(const std::string& text) {
    using nlohmann::json;
    namespace cd = checkpoint_detail;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("checkpoint: JSON parse error: ") + e.what());
    }
    try {
        if (!j.contains("format") || j.at("format").get<std::string>() != "pqforge-checkpoint")
            throw DataError("checkpoint: not a checkpoint file");
        if (j.at("version").get<int>() != 1) throw DataError("checkpoint: unsupported version");
        if (hex64(fnv1a64(j.at("model").dump())) != j.at("checksum").get<std::string>())
            throw DataError("checkpoint: checksum mismatch");
        const json& body = j.at("model");
        auto config = parse_config(body.at("config").get<std::string>());
        auto desc = parse_model_desc(body.at("desc").dump());
        ModelGraph<T> g = replace_layers<T>(desc, config);
        if (body.contains("norm_mean")) {
            g.norm_mean = body.at("norm_mean").get<std::vector<double>>();
            g.norm_std = body.at("norm_std").get<std::vector<double>>();
        }

        const json& layers = body.at("layers");
        if (layers.size() != g.layers.size()) throw DataError("checkpoint: layer count mismatch");
        for (size_t i = 0; i < g.layers.size(); ++i) {
            auto& l = g.layers[i];
            const json& lj = layers[i];
            if (lj.at("name").get<std::string>() != l.name)
                throw DataError("checkpoint: layer name mismatch at index " + std::to_string(i));
            if (l.has_weights()) {
                cd::tensor_restore(lj.at("weight"), l.weight.var->val);
                cd::tensor_restore(lj.at("bias"), l.bias.var->val);
                l.weight_quant.spec = cd::spec_restore(lj.at("weight_spec"));
                l.weight_quant.enabled = lj.at("weight_quant_enabled").get<bool>();
            }
            if (l.kind == LayerKind::batchnorm) {
                cd::tensor_restore(lj.at("gamma"), l.gamma.var->val);
                cd::tensor_restore(lj.at("beta"), l.beta.var->val);
                cd::tensor_restore(lj.at("running_mean"), l.running_mean);
                cd::tensor_restore(lj.at("running_var"), l.running_var);
            }
            if (lj.contains("mask")) {
                const json& mj = lj.at("mask");
                if (!l.mask) {
                    MaskState<T> st;
                    st.method = parse_prune_method(mj.at("method").get<std::string>());
                    st.granularity = parse_prune_granularity(mj.at("granularity").get<std::string>());
                    l.mask = std::move(st);
                }
                l.mask->hard = mj.at("hard").get<bool>();
                if (mj.contains("hard_mask")) {
                    l.mask->hard_mask = Tensor<T>(l.weight.var->val.shape());
                    cd::tensor_restore(mj.at("hard_mask"), l.mask->hard_mask);
                }
                if (mj.contains("unit_mask"))
                    l.mask->unit_mask = mj.at("unit_mask").get<std::vector<uint8_t>>();
                if (mj.contains("threshold") && l.mask->threshold)
                    cd::tensor_restore(mj.at("threshold"), l.mask->threshold->val);
                if (mj.contains("s_logits") && l.mask->s_logits) {
                    cd::tensor_restore(mj.at("s_logits"), l.mask->s_logits->val);
                    cd::tensor_restore(mj.at("s_init"), l.mask->s_init);
                }
                l.mask->alpha = static_cast<T>(mj.at("alpha").get<double>());
                l.mask->beta = static_cast<T>(mj.at("beta").get<double>());
                l.mask->lambda = static_cast<T>(mj.at("lambda").get<double>());
                l.mask->pdp_budget = static_cast<T>(mj.at("pdp_budget").get<double>());
                l.mask->pdp_threshold = static_cast<T>(mj.at("pdp_threshold").get<double>());
            }
            if (lj.contains("hgq_fw") && l.weight_hgq.initialized())
                cd::tensor_restore(lj.at("hgq_fw"), l.weight_hgq.f_cont->val);
            if (lj.contains("hgq_fx") && l.in_hgq.initialized()) {
                cd::tensor_restore(lj.at("hgq_fx"), l.in_hgq.f_cont->val);
                cd::tensor_restore(lj.at("hgq_range"), l.in_hgq.running_maxabs);
            }
            if (lj.contains("relu_mult") && l.relu_mult.var)
                cd::tensor_restore(lj.at("relu_mult"), l.relu_mult.var->val);
        }
        return g;
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: malformed: ") + e.what());
    }
}

template <class T>
ModelGraph<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("checkpoint: cannot open \"" + path + "\"");
    std::stringstream ss;
    ss << f.rdbuf();
    return checkpoint_from_json<T>(ss.str());
}

} // namespace pqforge
