#include "pqforge/deploy.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace pqforge {

using nlohmann::json;

int64_t requantize_int(int64_t n, int e_cur, const DeployedQuant& q) {
    const int shift = e_cur + q.fractional_bits;
    __int128 m;
    if (shift >= 0) {
        m = static_cast<__int128>(n) << shift;
    } else {
        const int d = -shift;
        const __int128 D = static_cast<__int128>(1) << d;
        __int128 quot = static_cast<__int128>(n) >> d; // arithmetic: floor
        const __int128 rem = static_cast<__int128>(n) - (quot << d);
        const __int128 twice = 2 * rem;
        const bool tie = twice == D;
        const bool above = twice > D;
        const bool frac_nonzero = rem != 0;
        const bool negative = n < 0;
        bool inc = false;
        switch (q.round) {
            case RoundMode::TRN: break;
            case RoundMode::TRN_ZERO: inc = negative && frac_nonzero; break;
            case RoundMode::RND: inc = above || tie; break;
            case RoundMode::RND_CONV: inc = above || (tie && (quot & 1) != 0); break;
            case RoundMode::RND_ZERO: inc = above || (tie && negative); break;
            case RoundMode::RND_MIN_INF: inc = above; break;
            case RoundMode::RND_INF: inc = above || (tie && !negative); break;
        }
        m = inc ? quot + 1 : quot;
    }

    const __int128 n_max = (static_cast<__int128>(1) << q.mag_bits) - 1;
    const __int128 n_min = q.keep_negative ? -(static_cast<__int128>(1) << q.mag_bits) : 0;
    switch (q.overflow) {
        case OverflowMode::SAT:
            if (m > n_max) m = n_max;
            if (m < n_min) m = n_min;
            break;
        case OverflowMode::SAT_SYM: {
            const __int128 lo = q.keep_negative ? -n_max : 0;
            if (m > n_max) m = n_max;
            if (m < lo) m = lo;
            break;
        }
        case OverflowMode::WRAP: {
            if (q.keep_negative) {
                const __int128 period = static_cast<__int128>(1) << (q.mag_bits + 1);
                __int128 w = (m + (static_cast<__int128>(1) << q.mag_bits)) % period;
                if (w < 0) w += period;
                m = w - (static_cast<__int128>(1) << q.mag_bits);
            } else {
                const __int128 period = static_cast<__int128>(1) << q.mag_bits;
                m %= period;
                if (m < 0) m += period;
            }
            break;
        }
        case OverflowMode::WRAP_SM: {
            if (!q.keep_negative) {
                const __int128 period = static_cast<__int128>(1) << q.mag_bits;
                m %= period;
                if (m < 0) m += period;
            } else {
                const bool neg = m < 0;
                __int128 a = neg ? -m : m;
                a %= static_cast<__int128>(1) << q.mag_bits;
                m = neg ? -a : a;
            }
            break;
        }
    }
    return static_cast<int64_t>(m);
}

namespace {

/// Exact mantissa of a raw double on the grid of q (entry quantization).
int64_t quantize_entry(double x, const DeployedQuant& q) {
    FixedPointSpec s;
    s.keep_negative = q.keep_negative;
    s.integer_bits = q.mag_bits - q.fractional_bits;
    s.fractional_bits = q.fractional_bits;
    s.round_mode = q.round;
    s.overflow_mode = q.overflow;
    const double v = quantize_value(x, s);
    return static_cast<int64_t>(std::llround(std::ldexp(v, q.fractional_bits)));
}

struct PathState {
    bool on_grid = false;
    int e_cur = 0;
};

void walk_layer(const DeployedLayer& l, PathState& st, bool throwing) {
    auto need_grid = [&](const char* what) {
        if (!st.on_grid && throwing)
            throw StateError(format("deploy: %s in layer \"%s\" needs a quantized input; enable "
                                    "quantize_input upstream",
                                    what, l.name.c_str()));
    };
    switch (l.kind) {
        case LayerKind::flatten:
            return;
        case LayerKind::activation: {
            if (l.has_in_quant) {
                st.on_grid = true;
                st.e_cur = -l.in_q.fractional_bits;
            }
            need_grid("activation");
            if (l.act == Activation::hard_tanh && st.e_cur > 0 && throwing)
                throw StateError("deploy: hard_tanh needs a sub-unit grid step in layer \"" + l.name + "\"");
            if (l.has_out_quant) {
                const int m = l.act == Activation::relu ? l.shift_m : 0;
                st.e_cur = -l.out_q.fractional_bits - m;
            }
            return;
        }
        case LayerKind::dense: {
            if (l.has_in_quant) {
                st.on_grid = true;
                st.e_cur = -l.in_q.fractional_bits;
            }
            need_grid("dense MAC");
            int min_w_exp = 0;
            bool any = false;
            for (size_t e = 0; e < l.w_exp.size(); ++e) {
                if (!any || l.w_exp[e] < min_w_exp) min_w_exp = l.w_exp[e];
                any = true;
            }
            int e_acc = st.e_cur + min_w_exp;
            st.e_cur = std::min(e_acc, l.b_exp);
            if (l.has_out_quant) st.e_cur = -l.out_q.fractional_bits;
            return;
        }
        default:
            if (throwing) throw StateError("deploy: unsupported layer kind in the data path");
    }
}

} // namespace

void validate_data_path(const DeployedModel& m) {
    PathState st;
    for (const auto& l : m.layers) walk_layer(l, st, true);
}

Tensor<double> int_infer(const DeployedModel& model, const Tensor<double>& x_raw) {
    if (x_raw.ndim() != 2)
        throw ShapeError("int_infer: expected a [batch, features] input, got " + shape_str(x_raw.shape()));
    const size_t B = x_raw.dim(0);
    size_t F = x_raw.dim(1);

    std::vector<int64_t> cur(B * F);
    int e_cur = 0;
    bool on_grid = false;

    // raw doubles enter as-is; the first quantizer establishes the grid
    std::vector<double> raw(x_raw.vec());

    for (const auto& l : model.layers) {
        if (l.kind == LayerKind::flatten) continue;

        if (l.kind == LayerKind::activation) {
            if (l.has_in_quant) {
                if (!on_grid) {
                    for (size_t i = 0; i < B * F; ++i) cur[i] = quantize_entry(raw[i], l.in_q);
                    on_grid = true;
                } else {
                    for (size_t i = 0; i < B * F; ++i) cur[i] = requantize_int(cur[i], e_cur, l.in_q);
                }
                e_cur = -l.in_q.fractional_bits;
            }
            if (!on_grid) throw StateError("int_infer: activation before any quantizer");
            switch (l.act) {
                case Activation::relu: {
                    for (auto& v : cur) v = std::max<int64_t>(v, 0);
                    break;
                }
                case Activation::hard_tanh: {
                    const int64_t one = int64_t(1) << std::max(0, -e_cur);
                    for (auto& v : cur) v = std::min(std::max(v, -one), one);
                    break;
                }
                default:
                    break;
            }
            if (l.has_out_quant) {
                const int m = l.act == Activation::relu ? l.shift_m : 0;
                for (auto& v : cur) v = requantize_int(v, e_cur + m, l.out_q);
                e_cur = -l.out_q.fractional_bits - m;
            }
            continue;
        }

        // dense
        const size_t I = l.in_features, O = l.out_features;
        if (F != I)
            throw ShapeError(format("int_infer: layer \"%s\" expects %zu features, got %zu",
                                    l.name.c_str(), I, F));
        if (l.has_in_quant) {
            if (!on_grid) {
                for (size_t i = 0; i < B * F; ++i) cur[i] = quantize_entry(raw[i], l.in_q);
                on_grid = true;
            } else {
                for (size_t i = 0; i < B * F; ++i) cur[i] = requantize_int(cur[i], e_cur, l.in_q);
            }
            e_cur = -l.in_q.fractional_bits;
        }
        if (!on_grid) throw StateError("int_infer: dense MAC before any quantizer");

        int min_w_exp = l.w_exp.empty() ? 0 : l.w_exp[0];
        for (int e : l.w_exp) min_w_exp = std::min(min_w_exp, e);
        // align weight mantissas once per layer
        std::vector<int64_t> w_aligned(I * O);
        for (size_t e = 0; e < I * O; ++e)
            w_aligned[e] = l.w_mant[e] << (l.w_exp[e] - min_w_exp);

        const int e_acc = e_cur + min_w_exp;
        const int e_out = std::min(e_acc, l.b_exp);
        const int acc_shift = e_acc - e_out;   // >= 0
        const int bias_shift = l.b_exp - e_out; // >= 0

        std::vector<int64_t> next(B * O, 0);
        for (size_t r = 0; r < B; ++r) {
            const int64_t* xr = cur.data() + r * I;
            int64_t* yr = next.data() + r * O;
            for (size_t i = 0; i < I; ++i) {
                const int64_t xv = xr[i];
                if (xv == 0) continue;
                const int64_t* wrow = w_aligned.data() + i * O;
                for (size_t o = 0; o < O; ++o) yr[o] += xv * wrow[o];
            }
            for (size_t o = 0; o < O; ++o)
                yr[o] = (yr[o] << acc_shift) + (l.b_mant[o] << bias_shift);
        }
        cur = std::move(next);
        e_cur = e_out;
        F = O;
        if (l.has_out_quant) {
            for (auto& v : cur) v = requantize_int(v, e_cur, l.out_q);
            e_cur = -l.out_q.fractional_bits;
        }
    }

    Tensor<double> scores({B, F});
    for (size_t i = 0; i < B * F; ++i) scores[i] = std::ldexp(static_cast<double>(cur[i]), e_cur);
    return scores;
}

std::vector<int> int_predict(const DeployedModel& m, const Tensor<double>& x_raw) {
    auto s = int_infer(m, x_raw);
    const size_t B = s.dim(0), C = s.dim(1);
    std::vector<int> out(B);
    for (size_t r = 0; r < B; ++r) {
        size_t arg = 0;
        for (size_t c = 1; c < C; ++c)
            if (s[r * C + c] > s[r * C + arg]) arg = c;
        out[r] = static_cast<int>(arg);
    }
    return out;
}

double deployed_ebops(const DeployedModel& m) {
    double total = 0;
    for (const auto& l : m.layers) {
        if (l.kind != LayerKind::dense) continue;
        for (size_t i = 0; i < l.in_features; ++i)
            for (size_t o = 0; o < l.out_features; ++o) {
                const size_t e = i * l.out_features + o;
                if (l.mask[e]) total += static_cast<double>(l.w_bits[e]) * l.in_bits[i];
            }
    }
    return total;
}

// ---------------------------------------------------------------------------
// bundle serialization

namespace {

std::string mant_hex(int64_t v) {
    const bool neg = v < 0;
    const uint64_t a = neg ? static_cast<uint64_t>(-v) : static_cast<uint64_t>(v);
    return (neg ? "-" : "") + format("%llx", static_cast<unsigned long long>(a));
}

int64_t mant_parse(const std::string& s) {
    if (s.empty()) throw DataError("bundle: empty mantissa");
    const bool neg = s[0] == '-';
    const uint64_t a = std::stoull(neg ? s.substr(1) : s, nullptr, 16);
    return neg ? -static_cast<int64_t>(a) : static_cast<int64_t>(a);
}

json quant_json(const DeployedQuant& q) {
    json j;
    j["k"] = q.keep_negative;
    j["f"] = q.fractional_bits;
    j["mag"] = q.mag_bits;
    j["round"] = to_string(q.round);
    j["overflow"] = to_string(q.overflow);
    return j;
}

DeployedQuant quant_parse(const json& j) {
    DeployedQuant q;
    q.keep_negative = j.at("k").get<int>();
    q.fractional_bits = j.at("f").get<int>();
    q.mag_bits = j.at("mag").get<int>();
    q.round = parse_round_mode(j.at("round").get<std::string>());
    q.overflow = parse_overflow_mode(j.at("overflow").get<std::string>());
    return q;
}

json model_json(const DeployedModel& m) {
    json j;
    j["input_shape"] = m.input_shape;
    j["output_dim"] = m.output_dim;
    j["norm_mean"] = m.norm_mean;
    j["norm_std"] = m.norm_std;
    j["layers"] = json::array();
    for (const auto& l : m.layers) {
        json lj;
        lj["kind"] = to_string(l.kind);
        lj["name"] = l.name;
        if (l.kind == LayerKind::dense) {
            lj["in_features"] = l.in_features;
            lj["out_features"] = l.out_features;
            json wm = json::array();
            for (int64_t v : l.w_mant) wm.push_back(mant_hex(v));
            lj["w_mant"] = wm;
            lj["w_exp"] = l.w_exp;
            lj["w_bits"] = l.w_bits;
            lj["mask"] = l.mask;
            json bm = json::array();
            for (int64_t v : l.b_mant) bm.push_back(mant_hex(v));
            lj["b_mant"] = bm;
            lj["b_exp"] = l.b_exp;
            lj["in_bits"] = l.in_bits;
            lj["acc_width"] = l.acc_width;
        }
        if (l.kind == LayerKind::activation) {
            lj["act"] = to_string(l.act);
            lj["shift_m"] = l.shift_m;
        }
        if (l.has_in_quant) lj["in_q"] = quant_json(l.in_q);
        if (l.has_out_quant) lj["out_q"] = quant_json(l.out_q);
        j["layers"].push_back(lj);
    }
    return j;
}

DeployedModel model_parse(const json& j) {
    DeployedModel m;
    for (const auto& v : j.at("input_shape")) m.input_shape.push_back(v.get<size_t>());
    m.output_dim = j.at("output_dim").get<size_t>();
    for (const auto& v : j.at("norm_mean")) m.norm_mean.push_back(v.get<double>());
    for (const auto& v : j.at("norm_std")) m.norm_std.push_back(v.get<double>());
    for (const auto& lj : j.at("layers")) {
        DeployedLayer l;
        l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
        l.name = lj.at("name").get<std::string>();
        if (l.kind == LayerKind::dense) {
            l.in_features = lj.at("in_features").get<size_t>();
            l.out_features = lj.at("out_features").get<size_t>();
            for (const auto& v : lj.at("w_mant")) l.w_mant.push_back(mant_parse(v.get<std::string>()));
            for (const auto& v : lj.at("w_exp")) l.w_exp.push_back(v.get<int>());
            for (const auto& v : lj.at("w_bits")) l.w_bits.push_back(v.get<int>());
            for (const auto& v : lj.at("mask")) l.mask.push_back(v.get<uint8_t>());
            for (const auto& v : lj.at("b_mant")) l.b_mant.push_back(mant_parse(v.get<std::string>()));
            l.b_exp = lj.at("b_exp").get<int>();
            for (const auto& v : lj.at("in_bits")) l.in_bits.push_back(v.get<double>());
            l.acc_width = lj.at("acc_width").get<int>();
            if (l.w_mant.size() != l.in_features * l.out_features ||
                l.w_exp.size() != l.w_mant.size() || l.mask.size() != l.w_mant.size())
                throw DataError("bundle: inconsistent array sizes in layer \"" + l.name + "\"");
        }
        if (l.kind == LayerKind::activation) {
            l.act = parse_activation(lj.at("act").get<std::string>());
            l.shift_m = lj.at("shift_m").get<int>();
        }
        if (lj.contains("in_q")) {
            l.has_in_quant = true;
            l.in_q = quant_parse(lj.at("in_q"));
        }
        if (lj.contains("out_q")) {
            l.has_out_quant = true;
            l.out_q = quant_parse(lj.at("out_q"));
        }
        m.layers.push_back(std::move(l));
    }
    return m;
}

constexpr const char* kBundleFormat = "pqforge-bundle";
constexpr int kBundleVersion = 1;

} // namespace

std::string bundle_to_json(const DeployedModel& m) {
    json j;
    j["format"] = kBundleFormat;
    j["version"] = kBundleVersion;
    json body = model_json(m);
    j["checksum"] = hex64(fnv1a64(body.dump()));
    j["model"] = std::move(body);
    return j.dump(1);
}

uint64_t bundle_hash(const DeployedModel& m) { return fnv1a64(model_json(m).dump()); }

DeployedModel bundle_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("bundle: JSON parse error: ") + e.what());
    }
    try {
        if (!j.contains("format") || j.at("format").get<std::string>() != kBundleFormat)
            throw DataError("bundle: not a model bundle");
        if (j.at("version").get<int>() != kBundleVersion)
            throw DataError(format("bundle: unsupported version %d", j.at("version").get<int>()));
        const std::string want = j.at("checksum").get<std::string>();
        const std::string got = hex64(fnv1a64(j.at("model").dump()));
        if (want != got) throw DataError("bundle: checksum mismatch (truncated or corrupted file)");
        return model_parse(j.at("model"));
    } catch (const json::exception& e) {
        throw DataError(std::string("bundle: malformed: ") + e.what());
    }
}

void export_bundle(const DeployedModel& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("bundle: cannot write \"" + path + "\"");
    f << bundle_to_json(m);
    if (!f) throw DataError("bundle: write to \"" + path + "\" failed");
}

DeployedModel import_bundle(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("bundle: cannot open \"" + path + "\"");
    std::stringstream ss;
    ss << f.rdbuf();
    return bundle_from_json(ss.str());
}

} // namespace pqforge
