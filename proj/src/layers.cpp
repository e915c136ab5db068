#include "pqforge/layers.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace pqforge {

using nlohmann::json;

const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::avgpool2d: return "avgpool2d";
        case LayerKind::activation: return "activation";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string& s) {
    for (LayerKind k : {LayerKind::dense, LayerKind::conv2d, LayerKind::batchnorm,
                        LayerKind::avgpool2d, LayerKind::activation, LayerKind::flatten})
        if (s == to_string(k)) return k;
    throw ConfigError("model: unknown layer kind \"" + s + "\"");
}

ModelDesc parse_model_desc(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("model: JSON parse error: ") + e.what());
    }
    if (!j.is_object() || !j.contains("input_shape") || !j.contains("layers"))
        throw DataError("model: expected an object with input_shape and layers");
    ModelDesc d;
    for (const auto& v : j["input_shape"]) d.input_shape.push_back(v.get<size_t>());
    if (!j["layers"].is_array()) throw DataError("model: layers must be an array");
    for (const auto& lj : j["layers"]) {
        LayerDesc l;
        if (!lj.contains("kind")) throw DataError("model: layer missing kind");
        l.kind = parse_layer_kind(lj["kind"].get<std::string>());
        if (lj.contains("name")) l.name = lj["name"].get<std::string>();
        if (lj.contains("units")) l.units = lj["units"].get<size_t>();
        if (lj.contains("in_channels")) l.in_channels = lj["in_channels"].get<size_t>();
        if (lj.contains("out_channels")) l.out_channels = lj["out_channels"].get<size_t>();
        if (lj.contains("kernel")) l.kernel = lj["kernel"].get<size_t>();
        if (lj.contains("pool")) l.pool = lj["pool"].get<size_t>();
        if (lj.contains("act")) l.act = lj["act"].get<std::string>();
        if (lj.contains("weights"))
            for (const auto& w : lj["weights"]) l.weights.push_back(w.get<double>());
        if (lj.contains("bias"))
            for (const auto& b : lj["bias"]) l.bias.push_back(b.get<double>());
        d.layers.push_back(std::move(l));
    }
    return d;
}

ModelDesc load_model_desc(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("model: cannot open \"" + path + "\"");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_model_desc(ss.str());
}

std::string dump_model_desc(const ModelDesc& d) {
    json j;
    j["input_shape"] = d.input_shape;
    j["layers"] = json::array();
    for (const auto& l : d.layers) {
        json lj;
        lj["kind"] = to_string(l.kind);
        if (!l.name.empty()) lj["name"] = l.name;
        if (l.units) lj["units"] = l.units;
        if (l.in_channels) lj["in_channels"] = l.in_channels;
        if (l.out_channels) lj["out_channels"] = l.out_channels;
        if (l.kernel) lj["kernel"] = l.kernel;
        if (l.pool) lj["pool"] = l.pool;
        if (l.kind == LayerKind::activation) lj["act"] = l.act;
        if (!l.weights.empty()) lj["weights"] = l.weights;
        if (!l.bias.empty()) lj["bias"] = l.bias;
        j["layers"].push_back(lj);
    }
    return j.dump(2);
}

std::string template_layer_config(const std::vector<std::string>& prunable_names,
                                  const CompressionConfig& base) {
    CompressionConfig c = base;
    c.pruning.disabled_layers = prunable_names;
    c.quantization.layer_specific.clear();
    for (const auto& n : prunable_names) c.quantization.layer_specific[n] = LayerQuantOverride{};
    return dump_config(c);
}

} // namespace pqforge
