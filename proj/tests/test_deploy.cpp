#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "pqforge/deploy.hpp"
#include "pqforge/rng.hpp"
#include "pqforge/train.hpp"

using namespace pqforge;

namespace {

ModelDesc hlf_mlp() {
    ModelDesc d;
    d.input_shape = {16};
    size_t i = 1;
    for (size_t h : {64u, 32u, 32u}) {
        d.layers.push_back({LayerKind::dense, "fc" + std::to_string(i), h, 0, 0, 0, 0, "", {}, {}});
        d.layers.push_back({LayerKind::activation, "relu" + std::to_string(i), 0, 0, 0, 0, 0, "relu", {}, {}});
        ++i;
    }
    d.layers.push_back({LayerKind::dense, "out", 5, 0, 0, 0, 0, "", {}, {}});
    return d;
}

/// Quantized training forward in 64-bit mode: the float-side of the
/// differential contract.
Tensor<double> float_forward(ModelGraph<double>& g, const Tensor<double>& x) {
    g.training_mode = false;
    NoGradGuard<double> ng(g.tape);
    return g.forward(x)->val;
}

template <class F>
void with_random_masks(ModelGraph<double>& g, uint64_t seed, double sparsity, F body) {
    Rng rng(seed, "masks");
    for (auto& l : g.layers) {
        if (!l.prunable()) continue;
        l.mask->hard_mask = Tensor<double>(l.weight.var->val.shape(), 1.0);
        for (size_t e = 0; e < l.mask->hard_mask.size(); ++e)
            if (rng.next_double() < sparsity) l.mask->hard_mask[e] = 0.0;
        l.mask->hard = true;
    }
    body();
}

} // namespace

TEST_CASE("single-neuron toy: hand integer arithmetic") {
    // w = 0.5 (f=2), x = 0.25 (f=2): mantissas 2 and 1, product 2 at 2^-4
    ModelDesc d;
    d.input_shape = {1};
    d.layers.push_back({LayerKind::dense, "n", 1, 0, 0, 0, 0, "", {0.5}, {0.0}});
    auto cfg = default_config("none");
    cfg.quantization.default_data_integer_bits = 0;
    cfg.quantization.default_data_fractional_bits = 2;
    cfg.quantization.default_weight_integer_bits = 0;
    cfg.quantization.default_weight_fractional_bits = 2;
    auto g = replace_layers<double>(d, cfg);
    auto dep = finalize_model(g);

    REQUIRE(dep.layers.size() == 1);
    CHECK(dep.layers[0].w_mant[0] == 2);
    CHECK(dep.layers[0].w_exp[0] == -2);
    Tensor<double> x({1, 1}, {0.25});
    auto scores = int_infer(dep, x);
    CHECK(scores[0] == 0.125);
}

TEST_CASE("accumulator width formula and the exact-in-double bound") {
    auto cfg = default_config("none");
    auto g = replace_layers<double>(hlf_mlp(), cfg);
    auto dep = finalize_model(g);
    // 16 -> 64 at 8/8 bits: width 8 + 8 + 4 = 20
    CHECK(dep.layers[0].acc_width == 20);

    // widths beyond 52 bits are refused at finalize time
    auto cfg2 = default_config("none");
    cfg2.quantization.default_data_fractional_bits = 23; // 24-bit data
    cfg2.quantization.default_weight_fractional_bits = 23;
    cfg2.quantization.default_weight_integer_bits = 2;
    ModelDesc wide;
    wide.input_shape = {4096};
    wide.layers.push_back({LayerKind::dense, "w", 8, 0, 0, 0, 0, "", {}, {}});
    auto g2 = replace_layers<double>(wide, cfg2);
    CHECK_THROWS_WITH_AS(finalize_model(g2), doctest::Contains("52"), StateError);
}

TEST_CASE("finalize: soft masks, real tanh, and unquantized layers are refused") {
    auto cfg = default_config("dst");
    auto g = replace_layers<double>(hlf_mlp(), cfg);
    CHECK_THROWS_WITH_AS(finalize_model(g), doctest::Contains("soft mask"), StateError);

    auto cfg2 = default_config("none");
    cfg2.quantization.use_real_tanh = true;
    ModelDesc d;
    d.input_shape = {4};
    d.layers.push_back({LayerKind::dense, "fc", 4, 0, 0, 0, 0, "", {}, {}});
    d.layers.push_back({LayerKind::activation, "t", 0, 0, 0, 0, 0, "tanh", {}, {}});
    auto g2 = replace_layers<double>(d, cfg2);
    CHECK_THROWS_WITH_AS(finalize_model(g2), doctest::Contains("tanh"), StateError);

    auto cfg3 = default_config("none");
    cfg3.quantization.enable_quantization = false;
    auto g3 = replace_layers<double>(hlf_mlp(), cfg3);
    CHECK_THROWS_AS(finalize_model(g3), StateError);
}

TEST_CASE("bit-exact: int_infer equals the quantized training forward on random models") {
    for (Granularity gran : {Granularity::per_tensor, Granularity::per_channel, Granularity::per_weight}) {
        auto cfg = default_config("dst");
        cfg.quantization.granularity = gran;
        auto g = replace_layers<double>(hlf_mlp(), cfg);
        with_random_masks(g, 42 + static_cast<uint64_t>(gran), 0.5, [&] {
            auto dep = finalize_model(g);
            Rng rng(7, "inputs");
            const size_t B = 256;
            Tensor<double> x({B, 16});
            for (size_t e = 0; e < x.size(); ++e) x[e] = rng.uniform(-2, 2);
            auto want = float_forward(g, x);
            auto got = int_infer(dep, x);
            REQUIRE(want.size() == got.size());
            size_t mismatches = 0;
            for (size_t e = 0; e < want.size(); ++e)
                if (want[e] != got[e]) ++mismatches;
            CHECK_MESSAGE(mismatches == 0, "granularity " << to_string(gran));
        });
    }
}

TEST_CASE("bit-exact: all-zero input propagates the quantized biases") {
    auto cfg = default_config("none");
    auto g = replace_layers<double>(hlf_mlp(), cfg);
    for (auto& l : g.layers)
        if (l.has_weights())
            for (size_t e = 0; e < l.bias.var->val.size(); ++e)
                l.bias.var->val[e] = 0.01 * double(e % 7) - 0.02;
    auto dep = finalize_model(g);
    Tensor<double> x({3, 16});
    auto want = float_forward(g, x);
    auto got = int_infer(dep, x);
    for (size_t e = 0; e < want.size(); ++e) CHECK(want[e] == got[e]);
}

TEST_CASE("pruned-weight opacity: flipping a masked float never changes the output") {
    auto cfg = default_config("dst");
    auto g = replace_layers<double>(hlf_mlp(), cfg);
    with_random_masks(g, 11, 0.6, [&] {
        auto dep = finalize_model(g);
        Rng rng(12, "opacity");
        Tensor<double> x({16, 16});
        for (size_t e = 0; e < x.size(); ++e) x[e] = rng.uniform(-2, 2);
        auto base = int_infer(dep, x);

        // flip every masked weight's float value, re-finalize, compare
        for (auto& l : g.layers)
            if (l.prunable())
                for (size_t e = 0; e < l.mask->hard_mask.size(); ++e)
                    if (l.mask->hard_mask[e] == 0.0) l.weight.var->val[e] = rng.uniform(-9, 9);
        auto dep2 = finalize_model(g);
        auto flipped = int_infer(dep2, x);
        for (size_t e = 0; e < base.size(); ++e) CHECK(base[e] == flipped[e]);
    });
}

TEST_CASE("deployed EBOPs equals the training-side EBOPs recomputed from the bundle") {
    auto cfg = default_config("dst");
    cfg.quantization.granularity = Granularity::per_channel;
    auto g = replace_layers<double>(hlf_mlp(), cfg);
    with_random_masks(g, 13, 0.4, [&] {
        auto dep = finalize_model(g);
        // refresh the model-side recording with one forward
        Tensor<double> x({2, 16}, 0.1);
        float_forward(g, x);
        CHECK(deployed_ebops(dep) == doctest::Approx(g.ebops()));
    });
}

TEST_CASE("bundle: round-trip, checksum, stability") {
    auto cfg = default_config("none");
    auto g = replace_layers<double>(hlf_mlp(), cfg);
    auto dep = finalize_model(g);
    dep.norm_mean.assign(16, 0.5);
    dep.norm_std.assign(16, 2.0);

    const char* path = "test_bundle_tmp.json";
    export_bundle(dep, path);
    auto back = import_bundle(path);

    Rng rng(14, "bundle");
    Tensor<double> x({8, 16});
    for (size_t e = 0; e < x.size(); ++e) x[e] = rng.uniform(-2, 2);
    auto a = int_infer(dep, x);
    auto b = int_infer(back, x);
    for (size_t e = 0; e < a.size(); ++e) CHECK(a[e] == b[e]);

    CHECK(bundle_hash(dep) == bundle_hash(back));
    CHECK(back.norm_mean.size() == 16);

    // stable across export runs
    const std::string j1 = bundle_to_json(dep);
    const std::string j2 = bundle_to_json(dep);
    CHECK(j1 == j2);

    // truncation breaks the checksum
    {
        std::ifstream f(path);
        std::stringstream ss;
        ss << f.rdbuf();
        std::string text = ss.str();
        text = text.substr(0, text.size() / 2);
        std::ofstream out(path);
        out << text;
    }
    CHECK_THROWS_AS(import_bundle(path), DataError);
    std::remove(path);

    // a flipped mantissa breaks the checksum too
    std::string text = bundle_to_json(dep);
    auto pos = text.find("\"w_mant\"");
    REQUIRE(pos != std::string::npos);
    auto q = text.find('"', text.find('[', pos) + 1);
    text[q + 1] = text[q + 1] == '1' ? '2' : '1';
    CHECK_THROWS_AS(bundle_from_json(text), DataError);
}

TEST_CASE("requantize_int agrees with the double-domain core") {
    Rng rng(15, "requant");
    for (int trial = 0; trial < 4000; ++trial) {
        DeployedQuant q;
        q.keep_negative = static_cast<int>(rng.next_below(2));
        q.fractional_bits = static_cast<int>(rng.next_below(8));
        q.mag_bits = 1 + static_cast<int>(rng.next_below(10));
        q.round = static_cast<RoundMode>(rng.next_below(7));
        q.overflow = static_cast<OverflowMode>(rng.next_below(4));
        const int e_cur = -static_cast<int>(rng.next_below(16));
        const int64_t n = static_cast<int64_t>(rng.next_below(1 << 20)) - (1 << 19);

        const int64_t got = requantize_int(n, e_cur, q);
        FixedPointSpec s;
        s.keep_negative = q.keep_negative;
        s.integer_bits = q.mag_bits - q.fractional_bits;
        s.fractional_bits = q.fractional_bits;
        s.round_mode = q.round;
        s.overflow_mode = q.overflow;
        const double v = quantize_value(std::ldexp(static_cast<double>(n), e_cur), s);
        const int64_t want = static_cast<int64_t>(std::llround(std::ldexp(v, q.fractional_bits)));
        CHECK_MESSAGE(got == want, "n=" << n << " e=" << e_cur << " f=" << q.fractional_bits
                                        << " mag=" << q.mag_bits << " rm=" << to_string(q.round)
                                        << " om=" << to_string(q.overflow));
    }
}

TEST_CASE("relu multiplier: deployed shift matches the float path bitwise") {
    ModelDesc d;
    d.input_shape = {8};
    d.layers.push_back({LayerKind::dense, "fc", 8, 0, 0, 0, 0, "", {}, {}});
    d.layers.push_back({LayerKind::activation, "r", 0, 0, 0, 0, 0, "relu", {}, {}});
    d.layers.push_back({LayerKind::dense, "out", 3, 0, 0, 0, 0, "", {}, {}});
    auto cfg = default_config("none");
    cfg.quantization.use_relu_multiplier = true;
    cfg.quantization.quantize_output = true;
    auto g = replace_layers<double>(d, cfg);
    g.layers[1].relu_mult.var->val[0] = 2.2; // rounds to shift 2

    auto dep = finalize_model(g);
    bool found = false;
    for (auto& l : dep.layers)
        if (l.kind == LayerKind::activation) {
            CHECK(l.shift_m == 2);
            found = true;
        }
    CHECK(found);

    Rng rng(16, "shift");
    Tensor<double> x({32, 8});
    for (size_t e = 0; e < x.size(); ++e) x[e] = rng.uniform(-1, 1);
    auto want = float_forward(g, x);
    auto got = int_infer(dep, x);
    for (size_t e = 0; e < want.size(); ++e) CHECK(want[e] == got[e]);
}
