#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pqforge/layers.hpp"
#include "pqforge/rng.hpp"

using namespace pqforge;

namespace {

ModelDesc mlp_desc(size_t in, std::vector<size_t> hidden, size_t out) {
    ModelDesc d;
    d.input_shape = {in};
    int i = 1;
    for (size_t h : hidden) {
        d.layers.push_back({LayerKind::dense, "fc" + std::to_string(i), h, 0, 0, 0, 0, "", {}, {}});
        d.layers.push_back({LayerKind::activation, "relu" + std::to_string(i), 0, 0, 0, 0, 0, "relu", {}, {}});
        ++i;
    }
    d.layers.push_back({LayerKind::dense, "out", out, 0, 0, 0, 0, "", {}, {}});
    return d;
}

CompressionConfig plain_config() {
    auto c = default_config("none");
    c.quantization.enable_quantization = false;
    return c;
}

} // namespace

TEST_CASE("pass-through: disabled compression equals the plain computation") {
    auto cfg = plain_config();
    auto g = replace_layers<double>(mlp_desc(16, {64, 32, 32}, 5), cfg);
    CHECK(g.output_dim == 5);

    Rng rng(61, "passthrough");
    const size_t B = 50;
    for (int rep = 0; rep < 20; ++rep) { // 1000 random inputs total
        Tensor<double> x({B, 16});
        for (size_t e = 0; e < x.size(); ++e) x[e] = rng.uniform(-2, 2);
        NoGradGuard<double> ng(g.tape);
        auto y = g.forward(x);

        // plain counterpart computed directly from the same weights
        Tensor<double> cur = x;
        for (auto& l : g.layers) {
            if (l.kind == LayerKind::dense) {
                const size_t I = l.in_features, O = l.out_features;
                Tensor<double> nxt({cur.dim(0), O});
                for (size_t r = 0; r < cur.dim(0); ++r)
                    for (size_t o = 0; o < O; ++o) {
                        double acc = l.bias.var->val[o];
                        for (size_t i = 0; i < I; ++i)
                            acc += cur[r * I + i] * l.weight.var->val[i * O + o];
                        nxt[r * O + o] = acc;
                    }
                cur = nxt;
            } else if (l.kind == LayerKind::activation) {
                for (size_t e = 0; e < cur.size(); ++e) cur[e] = std::max(cur[e], 0.0);
            }
        }
        for (size_t e = 0; e < cur.size(); ++e)
            CHECK(std::fabs(y->val[e] - cur[e]) <= 1e-6 * std::max(1.0, std::fabs(cur[e])));
    }
}

TEST_CASE("pq dense: output matches a hand-composed quantize-matmul pipeline exactly") {
    auto cfg = default_config("none"); // 8-bit per-tensor quantizers on
    auto g = replace_layers<double>(mlp_desc(16, {}, 64), cfg);
    auto& l = g.layers[0];
    REQUIRE(l.in_quant.enabled);
    REQUIRE(l.weight_quant.enabled);

    Rng rng(62, "composed");
    Tensor<double> x({4, 16});
    for (size_t e = 0; e < x.size(); ++e) x[e] = rng.uniform(-1, 1);
    NoGradGuard<double> ng(g.tape);
    auto y = g.forward(x);

    Tensor<double> xq = quantize_fixed(x, l.in_quant.spec);
    Tensor<double> wq = quantize_fixed(l.weight.var->val, l.weight_quant.spec);
    Tensor<double> bq = quantize_fixed(l.bias.var->val, l.bias_quant.spec);
    for (size_t r = 0; r < 4; ++r)
        for (size_t o = 0; o < 64; ++o) {
            double acc = bq[o];
            for (size_t i = 0; i < 16; ++i) acc += xq[r * 16 + i] * wq[i * 64 + o];
            CHECK(y->val[r * 64 + o] == acc);
        }
}

TEST_CASE("pq dense: all-zero hard mask leaves only the quantized bias") {
    auto cfg = default_config("dst");
    auto g = replace_layers<double>(mlp_desc(8, {}, 3), cfg);
    auto& l = g.layers[0];
    for (size_t e = 0; e < l.bias.var->val.size(); ++e) l.bias.var->val[e] = 0.3 * (1 + double(e));
    l.mask->hard_mask = Tensor<double>(l.weight.var->val.shape());
    l.mask->hard = true;

    Tensor<double> x({2, 8}, 0.7);
    NoGradGuard<double> ng(g.tape);
    auto y = g.forward(x);
    Tensor<double> bq = quantize_fixed(l.bias.var->val, l.bias_quant.spec);
    for (size_t r = 0; r < 2; ++r)
        for (size_t o = 0; o < 3; ++o) CHECK(y->val[r * 3 + o] == bq[o]);
}

TEST_CASE("pq conv2d: naive convolution oracle and masked filter") {
    ModelDesc d;
    d.input_shape = {2, 5, 5};
    d.layers.push_back({LayerKind::conv2d, "conv1", 0, 2, 3, 3, 0, "", {}, {}});
    auto cfg = plain_config();
    auto g = replace_layers<double>(d, cfg);
    auto& l = g.layers[0];

    Rng rng(63, "conv");
    Tensor<double> x({2, 2, 5, 5});
    for (size_t e = 0; e < x.size(); ++e) x[e] = rng.uniform(-1, 1);
    NoGradGuard<double> ng(g.tape);
    auto y = g.forward(x);
    REQUIRE(y->val.shape() == Shape{2, 3, 3, 3});

    // naive direct convolution: kernel matrix rows are (c,kh,kw)
    for (size_t b = 0; b < 2; ++b)
        for (size_t co = 0; co < 3; ++co)
            for (size_t oh = 0; oh < 3; ++oh)
                for (size_t ow = 0; ow < 3; ++ow) {
                    double acc = l.bias.var->val[co];
                    for (size_t c = 0; c < 2; ++c)
                        for (size_t kh = 0; kh < 3; ++kh)
                            for (size_t kw = 0; kw < 3; ++kw) {
                                const size_t krow = (c * 3 + kh) * 3 + kw;
                                acc += x[((b * 2 + c) * 5 + oh + kh) * 5 + ow + kw] *
                                       l.weight.var->val[krow * 3 + co];
                            }
                    const double got = y->val[((b * 3 + co) * 3 + oh) * 3 + ow];
                    CHECK(std::fabs(got - acc) <= 1e-6 * std::max(1.0, std::fabs(acc)));
                }

    // 1x1 kernel with identity channel map mixes channels only
    ModelDesc d1;
    d1.input_shape = {2, 4, 4};
    LayerDesc c1{LayerKind::conv2d, "mix", 0, 2, 2, 1, 0, "", {1, 0, 0, 1}, {}};
    d1.layers.push_back(c1);
    auto g1 = replace_layers<double>(d1, cfg);
    Tensor<double> x1({1, 2, 4, 4});
    for (size_t e = 0; e < x1.size(); ++e) x1[e] = rng.uniform(-1, 1);
    NoGradGuard<double> ng1(g1.tape);
    auto y1 = g1.forward(x1);
    for (size_t e = 0; e < x1.size(); ++e) CHECK(y1->val[e] == doctest::Approx(x1[e]));

    // masked-out filter: its output channel carries only the bias
    auto cfg2 = default_config("dst");
    cfg2.quantization.enable_quantization = false;
    auto g2 = replace_layers<double>(d, cfg2);
    auto& l2 = g2.layers[0];
    l2.mask->hard_mask = Tensor<double>(l2.weight.var->val.shape(), 1.0);
    for (size_t k = 0; k < l2.weight.var->val.dim(0); ++k) l2.mask->hard_mask[k * 3 + 1] = 0.0;
    l2.mask->hard = true;
    l2.bias.var->val[1] = 0.25;
    NoGradGuard<double> ng2(g2.tape);
    auto y2 = g2.forward(x);
    for (size_t b = 0; b < 2; ++b)
        for (size_t oh = 0; oh < 3; ++oh)
            for (size_t ow = 0; ow < 3; ++ow) CHECK(y2->val[((b * 3 + 1) * 3 + oh) * 3 + ow] == 0.25);
}

TEST_CASE("pq activation: quantized relu lands on the grid") {
    ModelDesc d;
    d.input_shape = {4};
    d.layers.push_back({LayerKind::activation, "a", 0, 0, 0, 0, 0, "relu", {}, {}});
    auto cfg = default_config("none");
    cfg.quantization.quantize_input = false;
    cfg.quantization.quantize_output = true; // (1,0,7) default
    auto g = replace_layers<double>(d, cfg);

    Tensor<double> x({1, 4}, {0.5, -0.7, 0.333, 2.0});
    NoGradGuard<double> ng(g.tape);
    auto y = g.forward(x);
    CHECK(y->val[0] == 0.5); // exact grid value at f=7
    CHECK(y->val[1] == 0.0); // relu of negative is 0 under any quantizer
    const double n = std::ldexp(y->val[2], 7);
    CHECK(n == std::floor(n));
    CHECK(y->val[3] == doctest::Approx(1.0 - std::ldexp(1.0, -7))); // saturates at max

    // linear activation with no quantizers is the identity
    ModelDesc d2;
    d2.input_shape = {3};
    d2.layers.push_back({LayerKind::activation, "lin", 0, 0, 0, 0, 0, "linear", {}, {}});
    auto g2 = replace_layers<double>(d2, plain_config());
    Tensor<double> x2({1, 3}, {0.1, -0.2, 0.3});
    NoGradGuard<double> ng2(g2.tape);
    auto y2 = g2.forward(x2);
    CHECK(y2->val.vec() == x2.vec());
}

TEST_CASE("replace_layers: defaults, disabled layers, unknown layer_specific") {
    auto cfg = default_config("dst");
    cfg.pruning.disabled_layers = {"fc2"};
    auto g = replace_layers<float>(mlp_desc(8, {6, 4}, 2), cfg);
    REQUIRE(g.layers.size() == 5);
    CHECK(g.layers[0].mask.has_value());
    CHECK_FALSE(g.layers[2].mask.has_value()); // fc2 disabled
    CHECK(g.layers[0].weight_quant.spec.width() == 8);
    CHECK(g.layers[0].in_quant.enabled);
    CHECK_FALSE(g.layers[0].out_quant.enabled);

    auto bad = default_config("none");
    bad.quantization.layer_specific["ghost"] = LayerQuantOverride{};
    CHECK_THROWS_WITH_AS(replace_layers<float>(mlp_desc(8, {6}, 2), bad),
                         doctest::Contains("ghost"), ConfigError);

    // per-layer override beats the global default
    auto ov = default_config("none");
    LayerQuantOverride o;
    o.default_weight_fractional_bits = 3;
    ov.quantization.layer_specific["fc1"] = o;
    auto g2 = replace_layers<float>(mlp_desc(8, {6}, 2), ov);
    CHECK(g2.layers[0].weight_quant.spec.fractional_bits == 3);
    CHECK(g2.layers[2].weight_quant.spec.fractional_bits == 7);

    // disabled_layers wins over the global enable flag
    auto dis = default_config("dst");
    dis.pruning.disabled_layers = {"fc1"};
    auto g3 = replace_layers<float>(mlp_desc(8, {6}, 2), dis);
    CHECK_FALSE(g3.layers[0].mask.has_value());
}

TEST_CASE("template_layer_config: names both fields and re-parses") {
    auto cfg = default_config("dst");
    auto g = replace_layers<float>(mlp_desc(16, {64, 32, 32}, 5), cfg);
    auto yaml = template_layer_config(g);
    auto parsed = parse_config(yaml);
    CHECK(parsed.pruning.disabled_layers.size() == 4);
    CHECK(parsed.quantization.layer_specific.size() == 4);
    CHECK(parsed.quantization.layer_specific.count("fc1") == 1);
    CHECK(parsed.quantization.layer_specific.count("out") == 1);

    // empty model: empty fields
    ModelDesc empty;
    empty.input_shape = {4};
    auto ge = replace_layers<float>(empty, cfg);
    auto ye = parse_config(template_layer_config(ge));
    CHECK(ye.pruning.disabled_layers.empty());
    CHECK(ye.quantization.layer_specific.empty());
}

TEST_CASE("model description json round-trip") {
    auto d = mlp_desc(16, {8}, 4);
    d.layers[0].weights.assign(16 * 8, 0.5);
    auto text = dump_model_desc(d);
    auto d2 = parse_model_desc(text);
    CHECK(d2.input_shape == d.input_shape);
    REQUIRE(d2.layers.size() == d.layers.size());
    CHECK(d2.layers[0].weights.size() == d.layers[0].weights.size());
    CHECK(d2.layers[1].act == "relu");

    // weights copied verbatim into the built model
    auto g = replace_layers<double>(d2, plain_config());
    CHECK(g.layers[0].weight.var->val[0] == 0.5);

    CHECK_THROWS_AS(parse_model_desc("{not json"), DataError);
    CHECK_THROWS_AS(parse_model_desc("{\"layers\": []}"), DataError);
    CHECK_THROWS_AS(load_model_desc("/nonexistent.json"), DataError);
}

TEST_CASE("ebops excludes masked weights and snapshot/restore round-trips") {
    auto cfg = default_config("dst");
    auto g = replace_layers<double>(mlp_desc(4, {}, 4), cfg);
    auto& l = g.layers[0];
    Tensor<double> x({2, 4}, 0.5);
    {
        NoGradGuard<double> ng(g.tape);
        g.forward(x);
    }
    const double full = g.ebops();
    CHECK(full == doctest::Approx(16.0 * 8 * 8)); // every weight unmasked, 8x8 bits

    l.mask->hard_mask = Tensor<double>(l.weight.var->val.shape(), 1.0);
    for (size_t e = 0; e < 8; ++e) l.mask->hard_mask[e] = 0.0; // half masked
    l.mask->hard = true;
    {
        NoGradGuard<double> ng(g.tape);
        g.forward(x);
    }
    CHECK(g.ebops() == doctest::Approx(full / 2));

    auto snap = g.snapshot_weights();
    const uint64_t h0 = g.weight_hash();
    g.layers[0].weight.var->val[0] += 1.0;
    CHECK(g.weight_hash() != h0);
    g.restore_weights(snap);
    CHECK(g.weight_hash() == h0);
}
