#include "pqforge/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <set>
#include <sstream>

namespace pqforge {

const char* to_string(RewindMode m) {
    switch (m) {
        case RewindMode::never: return "never";
        case RewindMode::every_round: return "every_round";
        case RewindMode::post_training_stage: return "post_training_stage";
    }
    return "?";
}

RewindMode parse_rewind_mode(const std::string& s) {
    if (s == "never") return RewindMode::never;
    if (s == "every_round" || s == "every-round") return RewindMode::every_round;
    if (s == "post_training_stage" || s == "post-training-stage") return RewindMode::post_training_stage;
    throw ConfigError("unknown rewind mode \"" + s + "\"");
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw ConfigError("config: " + path + ": " + what);
}

std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

void ensure_map(const YAML::Node& n, const std::string& path) {
    if (!n.IsMap()) fail(path, "expected a mapping");
}

void ensure_known_keys(const YAML::Node& n, const std::string& path,
                       const std::set<std::string>& allowed) {
    if (!n.IsDefined() || n.IsNull()) return;
    ensure_map(n, path);
    for (const auto& kv : n) {
        const std::string key = kv.first.as<std::string>();
        if (!allowed.count(key)) fail(join(path, key), "unknown key");
    }
}

template <class T>
void read_scalar(const YAML::Node& n, const std::string& path, const char* key, T& out) {
    const YAML::Node v = n[key];
    if (!v.IsDefined() || v.IsNull()) return;
    try {
        out = v.as<T>();
    } catch (const YAML::Exception&) {
        fail(join(path, key), "wrong type");
    }
}

template <class T, class Parse>
void read_enum(const YAML::Node& n, const std::string& path, const char* key, T& out, Parse parse) {
    const YAML::Node v = n[key];
    if (!v.IsDefined() || v.IsNull()) return;
    std::string s;
    try {
        s = v.as<std::string>();
    } catch (const YAML::Exception&) {
        fail(join(path, key), "wrong type");
    }
    try {
        out = parse(s);
    } catch (const ConfigError& e) {
        fail(join(path, key), e.what());
    }
}

template <class T, class Parse>
void read_opt_enum(const YAML::Node& n, const std::string& path, const char* key,
                   std::optional<T>& out, Parse parse) {
    const YAML::Node v = n[key];
    if (!v.IsDefined() || v.IsNull()) return;
    T tmp{};
    read_enum(n, path, key, tmp, parse);
    out = tmp;
}

template <class T>
void read_opt_scalar(const YAML::Node& n, const std::string& path, const char* key,
                     std::optional<T>& out) {
    const YAML::Node v = n[key];
    if (!v.IsDefined() || v.IsNull()) return;
    T tmp{};
    read_scalar(n, path, key, tmp);
    out = tmp;
}

LayerQuantOverride parse_layer_override(const YAML::Node& n, const std::string& path) {
    ensure_known_keys(n, path,
                      {"default_data_keep_negatives", "default_data_integer_bits",
                       "default_data_fractional_bits", "default_weight_keep_negatives",
                       "default_weight_integer_bits", "default_weight_fractional_bits", "granularity",
                       "quantize_input", "quantize_output", "enable_quantization", "round_mode",
                       "overflow_mode_data", "overflow_mode_parameters"});
    LayerQuantOverride o;
    read_opt_scalar(n, path, "default_data_keep_negatives", o.default_data_keep_negatives);
    read_opt_scalar(n, path, "default_data_integer_bits", o.default_data_integer_bits);
    read_opt_scalar(n, path, "default_data_fractional_bits", o.default_data_fractional_bits);
    read_opt_scalar(n, path, "default_weight_keep_negatives", o.default_weight_keep_negatives);
    read_opt_scalar(n, path, "default_weight_integer_bits", o.default_weight_integer_bits);
    read_opt_scalar(n, path, "default_weight_fractional_bits", o.default_weight_fractional_bits);
    read_opt_enum(n, path, "granularity", o.granularity, parse_granularity);
    read_opt_scalar(n, path, "quantize_input", o.quantize_input);
    read_opt_scalar(n, path, "quantize_output", o.quantize_output);
    read_opt_scalar(n, path, "enable_quantization", o.enable_quantization);
    read_opt_enum(n, path, "round_mode", o.round_mode, parse_round_mode);
    read_opt_enum(n, path, "overflow_mode_data", o.overflow_mode_data, parse_overflow_mode);
    read_opt_enum(n, path, "overflow_mode_parameters", o.overflow_mode_parameters,
                  parse_overflow_mode);
    return o;
}

void parse_quantization(const YAML::Node& n, QuantizationConfig& q) {
    const std::string path = "quantization";
    if (!n.IsDefined() || n.IsNull()) return;
    ensure_known_keys(n, path,
                      {"default_data_keep_negatives", "default_data_integer_bits",
                       "default_data_fractional_bits", "default_weight_keep_negatives",
                       "default_weight_integer_bits", "default_weight_fractional_bits", "granularity",
                       "quantize_input", "quantize_output", "enable_quantization", "hgq_beta",
                       "hgq_gamma", "layer_specific", "use_high_granularity_quantization",
                       "use_real_tanh", "overflow_mode_data", "overflow_mode_parameters",
                       "round_mode", "use_relu_multiplier"});
    read_scalar(n, path, "default_data_keep_negatives", q.default_data_keep_negatives);
    read_scalar(n, path, "default_data_integer_bits", q.default_data_integer_bits);
    read_scalar(n, path, "default_data_fractional_bits", q.default_data_fractional_bits);
    read_scalar(n, path, "default_weight_keep_negatives", q.default_weight_keep_negatives);
    read_scalar(n, path, "default_weight_integer_bits", q.default_weight_integer_bits);
    read_scalar(n, path, "default_weight_fractional_bits", q.default_weight_fractional_bits);
    read_enum(n, path, "granularity", q.granularity, parse_granularity);
    read_scalar(n, path, "quantize_input", q.quantize_input);
    read_scalar(n, path, "quantize_output", q.quantize_output);
    read_scalar(n, path, "enable_quantization", q.enable_quantization);
    read_scalar(n, path, "hgq_beta", q.hgq_beta);
    read_scalar(n, path, "hgq_gamma", q.hgq_gamma);
    read_scalar(n, path, "use_high_granularity_quantization", q.use_high_granularity_quantization);
    read_scalar(n, path, "use_real_tanh", q.use_real_tanh);
    read_enum(n, path, "overflow_mode_data", q.overflow_mode_data, parse_overflow_mode);
    read_enum(n, path, "overflow_mode_parameters", q.overflow_mode_parameters, parse_overflow_mode);
    read_enum(n, path, "round_mode", q.round_mode, parse_round_mode);
    read_scalar(n, path, "use_relu_multiplier", q.use_relu_multiplier);
    if (const YAML::Node ls = n["layer_specific"]; ls.IsDefined() && !ls.IsNull()) {
        ensure_map(ls, join(path, "layer_specific"));
        for (const auto& kv : ls) {
            const std::string name = kv.first.as<std::string>();
            q.layer_specific[name] = parse_layer_override(kv.second, join(path, "layer_specific." + name));
        }
    }
    if (q.default_data_keep_negatives != 0 && q.default_data_keep_negatives != 1)
        fail(join(path, "default_data_keep_negatives"), "must be 0 or 1");
    if (q.default_weight_keep_negatives != 0 && q.default_weight_keep_negatives != 1)
        fail(join(path, "default_weight_keep_negatives"), "must be 0 or 1");
    q.data_spec().validate(join(path, "default_data bits"));
    q.weight_spec().validate(join(path, "default_weight bits"));
}

void parse_pruning(const YAML::Node& n, PruningConfig& p) {
    const std::string path = "pruning";
    if (!n.IsDefined() || n.IsNull()) return;
    ensure_known_keys(n, path,
                      {"method", "enable_pruning", "disabled_layers", "granularity", "n", "m",
                       "target_sparsity", "activation", "autosparse", "cs", "dst", "mdmm", "pdp",
                       "wanda"});
    read_enum(n, path, "method", p.method, parse_prune_method);
    read_scalar(n, path, "enable_pruning", p.enable_pruning);
    if (const YAML::Node dl = n["disabled_layers"]; dl.IsDefined() && !dl.IsNull()) {
        if (!dl.IsSequence()) fail(join(path, "disabled_layers"), "expected a list");
        for (const auto& v : dl) p.disabled_layers.push_back(v.as<std::string>());
    }
    read_enum(n, path, "granularity", p.granularity, parse_prune_granularity);
    read_scalar(n, path, "n", p.n);
    read_scalar(n, path, "m", p.m);
    read_scalar(n, path, "target_sparsity", p.target_sparsity);

    if (const YAML::Node b = n["activation"]; b.IsDefined() && !b.IsNull()) {
        ensure_known_keys(b, join(path, "activation"), {"threshold", "update_interval"});
        read_scalar(b, join(path, "activation"), "threshold", p.activation.threshold);
        read_scalar(b, join(path, "activation"), "update_interval", p.activation.update_interval);
    }
    if (const YAML::Node b = n["autosparse"]; b.IsDefined() && !b.IsNull()) {
        ensure_known_keys(b, join(path, "autosparse"), {"alpha", "alpha_decay", "threshold_init"});
        read_scalar(b, join(path, "autosparse"), "alpha", p.autosparse.alpha);
        read_scalar(b, join(path, "autosparse"), "alpha_decay", p.autosparse.alpha_decay);
        read_scalar(b, join(path, "autosparse"), "threshold_init", p.autosparse.threshold_init);
    }
    if (const YAML::Node b = n["cs"]; b.IsDefined() && !b.IsNull()) {
        ensure_known_keys(b, join(path, "cs"), {"beta_final", "s_init"});
        read_scalar(b, join(path, "cs"), "beta_final", p.cs.beta_final);
        read_scalar(b, join(path, "cs"), "s_init", p.cs.s_init);
    }
    if (const YAML::Node b = n["dst"]; b.IsDefined() && !b.IsNull()) {
        ensure_known_keys(b, join(path, "dst"), {"alpha", "reset_limit"});
        read_scalar(b, join(path, "dst"), "alpha", p.dst.alpha);
        read_scalar(b, join(path, "dst"), "reset_limit", p.dst.reset_limit);
    }
    if (const YAML::Node b = n["mdmm"]; b.IsDefined() && !b.IsNull()) {
        ensure_known_keys(b, join(path, "mdmm"), {"damping", "lambda_lr_scale", "eps_s"});
        read_scalar(b, join(path, "mdmm"), "damping", p.mdmm.damping);
        read_scalar(b, join(path, "mdmm"), "lambda_lr_scale", p.mdmm.lambda_lr_scale);
        read_scalar(b, join(path, "mdmm"), "eps_s", p.mdmm.eps_s);
    }
    if (const YAML::Node b = n["pdp"]; b.IsDefined() && !b.IsNull()) {
        ensure_known_keys(b, join(path, "pdp"), {"temperature"});
        read_scalar(b, join(path, "pdp"), "temperature", p.pdp.temperature);
    }
    if (const YAML::Node b = n["wanda"]; b.IsDefined() && !b.IsNull()) {
        ensure_known_keys(b, join(path, "wanda"), {"use_budgets", "calibration_batches"});
        read_scalar(b, join(path, "wanda"), "use_budgets", p.wanda.use_budgets);
        read_scalar(b, join(path, "wanda"), "calibration_batches", p.wanda.calibration_batches);
    }

    if (p.target_sparsity < 0.0 || p.target_sparsity >= 1.0)
        fail(join(path, "target_sparsity"), "must lie in [0,1)");
    if (p.n < 0 || p.m <= 0 || p.n > p.m) fail(join(path, "n"), "requires 0 <= n <= m");
    if (p.activation.threshold < 0.0 || p.activation.threshold > 1.0)
        fail(join(path, "activation.threshold"), "must lie in [0,1]");
    if (p.pdp.temperature <= 0.0) fail(join(path, "pdp.temperature"), "must be positive");
    if (p.cs.beta_final < 1.0) fail(join(path, "cs.beta_final"), "must be >= 1");
}

void parse_training(const YAML::Node& n, TrainingConfig& t) {
    const std::string path = "training";
    if (!n.IsDefined() || n.IsNull()) return;
    ensure_known_keys(n, path,
                      {"pretraining_epochs", "epochs", "fine_tuning_epochs", "rounds", "rewind",
                       "save_weights_epoch", "pruning_first", "allow_fixed_mask_fine_tune", "lr",
                       "batch_size", "seed", "weight_decay", "bn_momentum"});
    read_scalar(n, path, "pretraining_epochs", t.pretraining_epochs);
    read_scalar(n, path, "epochs", t.epochs);
    read_scalar(n, path, "fine_tuning_epochs", t.fine_tuning_epochs);
    read_scalar(n, path, "rounds", t.rounds);
    read_enum(n, path, "rewind", t.rewind, parse_rewind_mode);
    read_scalar(n, path, "save_weights_epoch", t.save_weights_epoch);
    read_scalar(n, path, "pruning_first", t.pruning_first);
    read_scalar(n, path, "allow_fixed_mask_fine_tune", t.allow_fixed_mask_fine_tune);
    read_scalar(n, path, "lr", t.lr);
    read_scalar(n, path, "batch_size", t.batch_size);
    read_scalar(n, path, "seed", t.seed);
    read_scalar(n, path, "weight_decay", t.weight_decay);
    read_scalar(n, path, "bn_momentum", t.bn_momentum);

    if (t.pretraining_epochs < 0 || t.epochs < 0 || t.fine_tuning_epochs < 0)
        fail(path, "epoch counts must be >= 0");
    if (t.rounds < 1) fail(join(path, "rounds"), "must be >= 1");
    if (t.epochs > 0 && t.save_weights_epoch >= t.epochs)
        fail(join(path, "save_weights_epoch"), "must be < epochs");
    if (t.epochs == 0 && t.save_weights_epoch != 0)
        fail(join(path, "save_weights_epoch"), "must be 0 when epochs is 0");
    if (t.batch_size < 1) fail(join(path, "batch_size"), "must be >= 1");
    if (t.lr <= 0) fail(join(path, "lr"), "must be positive");
}

void parse_fitcompress(const YAML::Node& n, FitCompressConfig& f) {
    const std::string path = "fitcompress";
    if (!n.IsDefined() || n.IsNull()) return;
    ensure_known_keys(n, path,
                      {"enabled", "compression_goal", "sparsity_step", "bit_floor", "max_sparsity"});
    read_scalar(n, path, "enabled", f.enabled);
    read_scalar(n, path, "compression_goal", f.compression_goal);
    read_scalar(n, path, "sparsity_step", f.sparsity_step);
    read_scalar(n, path, "bit_floor", f.bit_floor);
    read_scalar(n, path, "max_sparsity", f.max_sparsity);
    if (f.compression_goal <= 0.0 || f.compression_goal > 1.0)
        fail(join(path, "compression_goal"), "must lie in (0,1]");
    if (f.sparsity_step <= 0.0 || f.sparsity_step >= 1.0)
        fail(join(path, "sparsity_step"), "must lie in (0,1)");
    if (f.bit_floor < 1) fail(join(path, "bit_floor"), "must be >= 1");
    if (f.max_sparsity <= 0.0 || f.max_sparsity >= 1.0)
        fail(join(path, "max_sparsity"), "must lie in (0,1)");
}

HpoDimKind parse_dim_kind(const std::string& s) {
    if (s == "uniform") return HpoDimKind::uniform;
    if (s == "log_uniform") return HpoDimKind::log_uniform;
    if (s == "int_step") return HpoDimKind::int_step;
    if (s == "categorical") return HpoDimKind::categorical;
    throw ConfigError("unknown dimension kind \"" + s + "\"");
}

HpoDirection parse_direction(const std::string& s) {
    if (s == "minimize") return HpoDirection::minimize;
    if (s == "maximize") return HpoDirection::maximize;
    throw ConfigError("unknown direction \"" + s + "\"");
}

void parse_hpo(const YAML::Node& n, HpoConfig& h) {
    const std::string path = "hpo";
    if (!n.IsDefined() || n.IsNull()) return;
    ensure_known_keys(n, path, {"n_trials", "sampler", "seed", "workers", "objectives", "space"});
    read_scalar(n, path, "n_trials", h.n_trials);
    read_scalar(n, path, "sampler", h.sampler);
    read_scalar(n, path, "seed", h.seed);
    read_scalar(n, path, "workers", h.workers);
    if (h.sampler != "random" && h.sampler != "tpe_lite")
        fail(join(path, "sampler"), "must be random or tpe_lite");
    if (const YAML::Node ob = n["objectives"]; ob.IsDefined() && !ob.IsNull()) {
        if (!ob.IsSequence()) fail(join(path, "objectives"), "expected a list");
        for (size_t i = 0; i < ob.size(); ++i) {
            const std::string opath = join(path, "objectives[" + std::to_string(i) + "]");
            ensure_known_keys(ob[i], opath, {"metric", "direction"});
            HpoObjective o;
            read_scalar(ob[i], opath, "metric", o.metric);
            read_enum(ob[i], opath, "direction", o.direction, parse_direction);
            if (o.metric.empty()) fail(join(opath, "metric"), "required");
            h.objectives.push_back(o);
        }
    }
    if (const YAML::Node sp = n["space"]; sp.IsDefined() && !sp.IsNull()) {
        ensure_map(sp, join(path, "space"));
        for (const auto& kv : sp) {
            const std::string name = kv.first.as<std::string>();
            const std::string dpath = join(path, "space." + name);
            ensure_known_keys(kv.second, dpath, {"type", "lo", "hi", "step", "choices"});
            HpoDimension d;
            read_enum(kv.second, dpath, "type", d.kind, parse_dim_kind);
            read_scalar(kv.second, dpath, "lo", d.lo);
            read_scalar(kv.second, dpath, "hi", d.hi);
            read_scalar(kv.second, dpath, "step", d.step);
            if (const YAML::Node ch = kv.second["choices"]; ch.IsDefined() && !ch.IsNull()) {
                if (!ch.IsSequence()) fail(join(dpath, "choices"), "expected a list");
                for (const auto& c : ch) d.choices.push_back(c.as<std::string>());
            }
            if (d.kind == HpoDimKind::categorical) {
                if (d.choices.empty()) fail(dpath, "categorical requires choices");
            } else {
                if (!(d.lo < d.hi)) fail(dpath, "requires lo < hi");
                if (d.kind == HpoDimKind::log_uniform && d.lo <= 0.0)
                    fail(dpath, "log_uniform requires lo > 0");
                if (d.kind == HpoDimKind::int_step && d.step <= 0.0)
                    fail(dpath, "int_step requires step > 0");
            }
            h.space[name] = d;
        }
    }
    if (h.n_trials < 0) fail(join(path, "n_trials"), "must be >= 0");
    if (h.workers < 1) fail(join(path, "workers"), "must be >= 1");
}

CompressionConfig from_yaml(const YAML::Node& root) {
    CompressionConfig c;
    if (root.IsDefined() && !root.IsNull()) {
        if (!root.IsMap()) throw ConfigError("config: top level must be a mapping");
        ensure_known_keys(root, "", {"quantization", "pruning", "training", "fitcompress", "hpo"});
        parse_quantization(root["quantization"], c.quantization);
        parse_pruning(root["pruning"], c.pruning);
        parse_training(root["training"], c.training);
        parse_fitcompress(root["fitcompress"], c.fitcompress);
        parse_hpo(root["hpo"], c.hpo);
    }
    return c;
}

std::string fmt_double(double v) {
    if (v == std::floor(v) && std::fabs(v) < 1e15) return format("%.1f", v);
    return format("%.17g", v);
}

} // namespace

CompressionConfig load_config(const std::string& path) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(path);
    } catch (const YAML::BadFile&) {
        throw ConfigError("config: cannot open \"" + path + "\"");
    } catch (const YAML::Exception& e) {
        throw ConfigError("config: " + path + ": YAML parse error: " + e.what());
    }
    return from_yaml(root);
}

CompressionConfig parse_config(const std::string& yaml_text) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config: YAML parse error: ") + e.what());
    }
    return from_yaml(root);
}

std::string dump_config(const CompressionConfig& c) {
    std::ostringstream o;
    const auto& q = c.quantization;
    o << "quantization:\n";
    o << "  default_data_keep_negatives: " << q.default_data_keep_negatives << "\n";
    o << "  default_data_integer_bits: " << q.default_data_integer_bits << "\n";
    o << "  default_data_fractional_bits: " << q.default_data_fractional_bits << "\n";
    o << "  default_weight_keep_negatives: " << q.default_weight_keep_negatives << "\n";
    o << "  default_weight_integer_bits: " << q.default_weight_integer_bits << "\n";
    o << "  default_weight_fractional_bits: " << q.default_weight_fractional_bits << "\n";
    o << "  granularity: " << to_string(q.granularity) << "\n";
    o << "  quantize_input: " << (q.quantize_input ? "true" : "false") << "\n";
    o << "  quantize_output: " << (q.quantize_output ? "true" : "false") << "\n";
    o << "  enable_quantization: " << (q.enable_quantization ? "true" : "false") << "\n";
    o << "  hgq_beta: " << fmt_double(q.hgq_beta) << "\n";
    o << "  hgq_gamma: " << fmt_double(q.hgq_gamma) << "\n";
    o << "  use_high_granularity_quantization: "
      << (q.use_high_granularity_quantization ? "true" : "false") << "\n";
    o << "  use_real_tanh: " << (q.use_real_tanh ? "true" : "false") << "\n";
    o << "  overflow_mode_data: " << to_string(q.overflow_mode_data) << "\n";
    o << "  overflow_mode_parameters: " << to_string(q.overflow_mode_parameters) << "\n";
    o << "  round_mode: " << to_string(q.round_mode) << "\n";
    o << "  use_relu_multiplier: " << (q.use_relu_multiplier ? "true" : "false") << "\n";
    if (q.layer_specific.empty()) {
        o << "  layer_specific: {}\n";
    } else {
        o << "  layer_specific:\n";
        for (const auto& [name, ov] : q.layer_specific) {
            o << "    " << name << ":";
            std::ostringstream body;
            auto emit_int = [&](const char* key, const std::optional<int>& v) {
                if (v) body << "      " << key << ": " << *v << "\n";
            };
            auto emit_bool = [&](const char* key, const std::optional<bool>& v) {
                if (v) body << "      " << key << ": " << (*v ? "true" : "false") << "\n";
            };
            emit_int("default_data_keep_negatives", ov.default_data_keep_negatives);
            emit_int("default_data_integer_bits", ov.default_data_integer_bits);
            emit_int("default_data_fractional_bits", ov.default_data_fractional_bits);
            emit_int("default_weight_keep_negatives", ov.default_weight_keep_negatives);
            emit_int("default_weight_integer_bits", ov.default_weight_integer_bits);
            emit_int("default_weight_fractional_bits", ov.default_weight_fractional_bits);
            if (ov.granularity) body << "      granularity: " << to_string(*ov.granularity) << "\n";
            emit_bool("quantize_input", ov.quantize_input);
            emit_bool("quantize_output", ov.quantize_output);
            emit_bool("enable_quantization", ov.enable_quantization);
            if (ov.round_mode) body << "      round_mode: " << to_string(*ov.round_mode) << "\n";
            if (ov.overflow_mode_data)
                body << "      overflow_mode_data: " << to_string(*ov.overflow_mode_data) << "\n";
            if (ov.overflow_mode_parameters)
                body << "      overflow_mode_parameters: " << to_string(*ov.overflow_mode_parameters)
                     << "\n";
            const std::string s = body.str();
            o << (s.empty() ? " {}\n" : "\n" + s);
        }
    }

    const auto& p = c.pruning;
    o << "pruning:\n";
    o << "  method: " << to_string(p.method) << "\n";
    o << "  enable_pruning: " << (p.enable_pruning ? "true" : "false") << "\n";
    if (p.disabled_layers.empty()) {
        o << "  disabled_layers: []\n";
    } else {
        o << "  disabled_layers:\n";
        for (const auto& l : p.disabled_layers) o << "    - " << l << "\n";
    }
    o << "  granularity: " << to_string(p.granularity) << "\n";
    o << "  n: " << p.n << "\n";
    o << "  m: " << p.m << "\n";
    o << "  target_sparsity: " << fmt_double(p.target_sparsity) << "\n";
    o << "  activation: {threshold: " << fmt_double(p.activation.threshold)
      << ", update_interval: " << p.activation.update_interval << "}\n";
    o << "  autosparse: {alpha: " << fmt_double(p.autosparse.alpha)
      << ", alpha_decay: " << fmt_double(p.autosparse.alpha_decay)
      << ", threshold_init: " << fmt_double(p.autosparse.threshold_init) << "}\n";
    o << "  cs: {beta_final: " << fmt_double(p.cs.beta_final)
      << ", s_init: " << fmt_double(p.cs.s_init) << "}\n";
    o << "  dst: {alpha: " << fmt_double(p.dst.alpha)
      << ", reset_limit: " << fmt_double(p.dst.reset_limit) << "}\n";
    o << "  mdmm: {damping: " << fmt_double(p.mdmm.damping)
      << ", lambda_lr_scale: " << fmt_double(p.mdmm.lambda_lr_scale)
      << ", eps_s: " << fmt_double(p.mdmm.eps_s) << "}\n";
    o << "  pdp: {temperature: " << fmt_double(p.pdp.temperature) << "}\n";
    o << "  wanda: {use_budgets: " << (p.wanda.use_budgets ? "true" : "false")
      << ", calibration_batches: " << p.wanda.calibration_batches << "}\n";

    const auto& t = c.training;
    o << "training:\n";
    o << "  pretraining_epochs: " << t.pretraining_epochs << "\n";
    o << "  epochs: " << t.epochs << "\n";
    o << "  fine_tuning_epochs: " << t.fine_tuning_epochs << "\n";
    o << "  rounds: " << t.rounds << "\n";
    o << "  rewind: " << to_string(t.rewind) << "\n";
    o << "  save_weights_epoch: " << t.save_weights_epoch << "\n";
    o << "  pruning_first: " << (t.pruning_first ? "true" : "false") << "\n";
    o << "  allow_fixed_mask_fine_tune: " << (t.allow_fixed_mask_fine_tune ? "true" : "false")
      << "\n";
    o << "  lr: " << fmt_double(t.lr) << "\n";
    o << "  batch_size: " << t.batch_size << "\n";
    o << "  seed: " << t.seed << "\n";
    o << "  weight_decay: " << fmt_double(t.weight_decay) << "\n";
    o << "  bn_momentum: " << fmt_double(t.bn_momentum) << "\n";

    const auto& f = c.fitcompress;
    o << "fitcompress:\n";
    o << "  enabled: " << (f.enabled ? "true" : "false") << "\n";
    o << "  compression_goal: " << fmt_double(f.compression_goal) << "\n";
    o << "  sparsity_step: " << fmt_double(f.sparsity_step) << "\n";
    o << "  bit_floor: " << f.bit_floor << "\n";
    o << "  max_sparsity: " << fmt_double(f.max_sparsity) << "\n";

    const auto& h = c.hpo;
    o << "hpo:\n";
    o << "  n_trials: " << h.n_trials << "\n";
    o << "  sampler: " << h.sampler << "\n";
    o << "  seed: " << h.seed << "\n";
    o << "  workers: " << h.workers << "\n";
    if (h.objectives.empty()) {
        o << "  objectives: []\n";
    } else {
        o << "  objectives:\n";
        for (const auto& ob : h.objectives)
            o << "    - {metric: " << ob.metric << ", direction: "
              << (ob.direction == HpoDirection::maximize ? "maximize" : "minimize") << "}\n";
    }
    if (h.space.empty()) {
        o << "  space: {}\n";
    } else {
        o << "  space:\n";
        for (const auto& [name, d] : h.space) {
            o << "    " << name << ": {type: ";
            switch (d.kind) {
                case HpoDimKind::uniform: o << "uniform, lo: " << fmt_double(d.lo) << ", hi: " << fmt_double(d.hi); break;
                case HpoDimKind::log_uniform: o << "log_uniform, lo: " << fmt_double(d.lo) << ", hi: " << fmt_double(d.hi); break;
                case HpoDimKind::int_step:
                    o << "int_step, lo: " << fmt_double(d.lo) << ", hi: " << fmt_double(d.hi)
                      << ", step: " << fmt_double(d.step);
                    break;
                case HpoDimKind::categorical: {
                    o << "categorical, choices: [";
                    for (size_t i = 0; i < d.choices.size(); ++i) o << (i ? ", " : "") << d.choices[i];
                    o << "]";
                    break;
                }
            }
            o << "}\n";
        }
    }
    return o.str();
}

uint64_t config_hash(const CompressionConfig& c) { return fnv1a64(dump_config(c)); }

CompressionConfig default_config(const std::string& method) {
    CompressionConfig c;
    auto& t = c.training;
    if (method == "none") {
        c.pruning.method = PruneMethod::none;
        c.pruning.enable_pruning = false;
        return c;
    }
    if (method == "hgq") {
        c.pruning.method = PruneMethod::none;
        c.pruning.enable_pruning = false;
        c.quantization.use_high_granularity_quantization = true;
        c.quantization.hgq_beta = 1e-6;
        c.quantization.hgq_gamma = 1e-6;
        return c;
    }
    if (method == "fitcompress") {
        c.pruning.method = PruneMethod::none;
        c.pruning.enable_pruning = false;
        c.fitcompress.enabled = true;
        c.fitcompress.compression_goal = 0.0075;
        t.pretraining_epochs = 10;
        return c;
    }
    const PruneMethod m = parse_prune_method(method);
    c.pruning.method = m;
    switch (m) {
        case PruneMethod::activation:
            c.pruning.granularity = PruneGranularity::structured;
            break;
        case PruneMethod::autosparse:
        case PruneMethod::cs:
        case PruneMethod::dst:
            c.pruning.granularity = PruneGranularity::unstructured;
            break;
        case PruneMethod::mdmm:
            c.pruning.granularity = PruneGranularity::unstructured;
            t.fine_tuning_epochs = 10;
            break;
        case PruneMethod::pdp:
            c.pruning.granularity = PruneGranularity::unstructured;
            t.pretraining_epochs = 5;
            t.fine_tuning_epochs = 10;
            break;
        case PruneMethod::wanda:
            c.pruning.granularity = PruneGranularity::unstructured;
            t.pretraining_epochs = 5;
            break;
        default:
            throw ConfigError("unknown pruning method \"" + method + "\"");
    }
    if (m == PruneMethod::cs) {
        t.fine_tuning_epochs = 10;
        t.rewind = RewindMode::post_training_stage;
    }
    return c;
}

QuantizationConfig merge_layer_overrides(const CompressionConfig& c, const std::string& layer_name) {
    QuantizationConfig q = c.quantization;
    auto it = c.quantization.layer_specific.find(layer_name);
    if (it == c.quantization.layer_specific.end()) return q;
    const LayerQuantOverride& o = it->second;
    if (o.default_data_keep_negatives) q.default_data_keep_negatives = *o.default_data_keep_negatives;
    if (o.default_data_integer_bits) q.default_data_integer_bits = *o.default_data_integer_bits;
    if (o.default_data_fractional_bits) q.default_data_fractional_bits = *o.default_data_fractional_bits;
    if (o.default_weight_keep_negatives) q.default_weight_keep_negatives = *o.default_weight_keep_negatives;
    if (o.default_weight_integer_bits) q.default_weight_integer_bits = *o.default_weight_integer_bits;
    if (o.default_weight_fractional_bits) q.default_weight_fractional_bits = *o.default_weight_fractional_bits;
    if (o.granularity) q.granularity = *o.granularity;
    if (o.quantize_input) q.quantize_input = *o.quantize_input;
    if (o.quantize_output) q.quantize_output = *o.quantize_output;
    if (o.enable_quantization) q.enable_quantization = *o.enable_quantization;
    if (o.round_mode) q.round_mode = *o.round_mode;
    if (o.overflow_mode_data) q.overflow_mode_data = *o.overflow_mode_data;
    if (o.overflow_mode_parameters) q.overflow_mode_parameters = *o.overflow_mode_parameters;
    return q;
}

void validate_stage_plan(const CompressionConfig& c) {
    const auto& t = c.training;
    const auto& p = c.pruning;
    const bool pruning_on = p.enable_pruning && p.method != PruneMethod::none;

    if (c.fitcompress.enabled) {
        if (t.pretraining_epochs < 1)
            throw ConfigError("fitcompress requires pretraining_epochs >= 1");
        if (pruning_on)
            throw ConfigError("fitcompress sets masks itself; disable the pruning method");
    }
    if (!pruning_on) return;

    const PruneMethod m = p.method;
    const bool needs_pre = m == PruneMethod::pdp || m == PruneMethod::wanda;
    if (needs_pre && t.pretraining_epochs < 1)
        throw ConfigError(std::string("pruning method ") + to_string(m) +
                          " requires pretraining_epochs >= 1");
    if (!needs_pre && t.pretraining_epochs > 0)
        throw ConfigError(std::string("pruning method ") + to_string(m) +
                          " does not use a pre-training stage");

    const bool ft_ok = m == PruneMethod::cs || m == PruneMethod::mdmm || m == PruneMethod::pdp;
    const bool ft_optional = m == PruneMethod::dst || m == PruneMethod::activation;
    if (t.fine_tuning_epochs > 0 && !ft_ok) {
        if (!(ft_optional && t.allow_fixed_mask_fine_tune))
            throw ConfigError(std::string("pruning method ") + to_string(m) +
                              " has no fine-tuning stage" +
                              (ft_optional ? " (set training.allow_fixed_mask_fine_tune to run a fixed-mask fine-tune)"
                                           : ""));
    }

    auto granularity_error = [&]() {
        throw ConfigError(std::string("pruning method ") + to_string(m) +
                          " does not support granularity " + to_string(p.granularity));
    };
    switch (m) {
        case PruneMethod::activation:
            if (p.granularity != PruneGranularity::structured) granularity_error();
            break;
        case PruneMethod::autosparse:
        case PruneMethod::cs:
        case PruneMethod::dst:
            if (p.granularity != PruneGranularity::unstructured) granularity_error();
            break;
        case PruneMethod::mdmm:
            if (p.granularity == PruneGranularity::n_m) granularity_error();
            break;
        case PruneMethod::pdp:
            if (p.granularity == PruneGranularity::n_m)
                throw ConfigError("pdp n_m granularity is not implemented");
            break;
        case PruneMethod::wanda:
            if (p.granularity == PruneGranularity::structured) granularity_error();
            if (p.granularity == PruneGranularity::n_m && p.wanda.use_budgets)
                throw ConfigError("wanda: per-layer budgets cannot combine with n_m granularity");
            break;
        default:
            break;
    }
}

CompressionConfig with_override(const CompressionConfig& c, const std::string& path,
                                const std::string& value) {
    YAML::Node root = YAML::Load(dump_config(c));
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : path) {
        if (ch == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    if (parts.empty()) throw ConfigError("override: empty path");
    // yaml-cpp node assignment through a chain of temporaries
    std::vector<YAML::Node> chain;
    chain.push_back(root);
    for (size_t i = 0; i + 1 < parts.size(); ++i) chain.push_back(chain.back()[parts[i]]);
    chain.back()[parts.back()] = YAML::Load(value);
    std::ostringstream o;
    o << root;
    return parse_config(o.str());
}

} // namespace pqforge
