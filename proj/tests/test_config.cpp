#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "pqforge/config.hpp"
#include "pqforge/rng.hpp"

using namespace pqforge;

TEST_CASE("empty config gives documented defaults") {
    auto c = parse_config("");
    CHECK(c.quantization.weight_spec().width() == 8); // 1+0+7
    CHECK(c.quantization.data_spec().width() == 8);
    CHECK(c.quantization.quantize_input);
    CHECK_FALSE(c.quantization.quantize_output);
    CHECK(c.quantization.enable_quantization);
    CHECK(c.quantization.granularity == Granularity::per_tensor);
    CHECK(c.quantization.round_mode == RoundMode::RND);
    CHECK(c.training.lr == 1e-3);
    CHECK(c.training.batch_size == 1024);
    CHECK_FALSE(c.fitcompress.enabled);
}

TEST_CASE("enum values accepted and rejected by name") {
    auto c = parse_config("quantization:\n  round_mode: RND_CONV\n");
    CHECK(c.quantization.round_mode == RoundMode::RND_CONV);

    // RN_ZERO is read as truncate-toward-zero
    auto c2 = parse_config("quantization:\n  round_mode: RN_ZERO\n");
    CHECK(c2.quantization.round_mode == RoundMode::TRN_ZERO);

    CHECK_THROWS_WITH_AS(parse_config("quantization:\n  round_mode: BANANA\n"),
                         doctest::Contains("quantization.round_mode"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("quantization:\n  overflow_mode_data: CLIP\n"),
                         doctest::Contains("quantization.overflow_mode_data"), ConfigError);
}

TEST_CASE("unknown keys are rejected with the full path") {
    CHECK_THROWS_WITH_AS(parse_config("quantizaton: {}\n"), doctest::Contains("quantizaton"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("pruning:\n  dst:\n    alhpa: 0.1\n"),
                         doctest::Contains("pruning.dst.alhpa"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("training:\n  epochss: 3\n"),
                         doctest::Contains("training.epochss"), ConfigError);
}

TEST_CASE("type and range violations name the key") {
    CHECK_THROWS_WITH_AS(parse_config("training:\n  epochs: banana\n"),
                         doctest::Contains("training.epochs"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("pruning:\n  target_sparsity: 1.5\n"),
                         doctest::Contains("target_sparsity"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("training:\n  epochs: 10\n  save_weights_epoch: 10\n"),
                         doctest::Contains("save_weights_epoch"), ConfigError);
}

TEST_CASE("default_config factories follow the stage table") {
    auto cs = default_config("cs");
    CHECK(cs.training.fine_tuning_epochs > 0);
    CHECK(cs.training.rewind == RewindMode::post_training_stage);
    CHECK(cs.training.pretraining_epochs == 0);

    auto ap = default_config("activation");
    CHECK(ap.training.pretraining_epochs == 0);
    CHECK(ap.pruning.granularity == PruneGranularity::structured);

    auto pdp = default_config("pdp");
    CHECK(pdp.training.pretraining_epochs >= 1);

    auto wanda = default_config("wanda");
    CHECK(wanda.training.pretraining_epochs >= 1);
    CHECK(wanda.training.fine_tuning_epochs == 0);

    CHECK_THROWS_AS(default_config("banana"), ConfigError);

    // every factory output round-trips through the parser and stage check
    for (const char* m : {"activation", "autosparse", "cs", "dst", "mdmm", "pdp", "wanda", "none",
                          "hgq", "fitcompress"}) {
        auto c = default_config(m);
        CHECK_NOTHROW(validate_stage_plan(c));
        auto re = parse_config(dump_config(c));
        CHECK(dump_config(re) == dump_config(c));
    }
}

TEST_CASE("round-trip: dump(load(x)) is structurally stable") {
    const std::string y = R"(
quantization:
  default_weight_fractional_bits: 5
  granularity: per_channel
  layer_specific:
    dense2: {default_weight_fractional_bits: 3, quantize_output: true}
pruning:
  method: dst
  dst: {alpha: 0.0003, reset_limit: 0.95}
training:
  epochs: 12
  lr: 0.002
hpo:
  n_trials: 4
  objectives:
    - {metric: val_accuracy, direction: maximize}
  space:
    pruning.dst.alpha: {type: log_uniform, lo: 1e-5, hi: 1e-3}
)";
    auto c = parse_config(y);
    auto c2 = parse_config(dump_config(c));
    CHECK(dump_config(c) == dump_config(c2));
    CHECK(config_hash(c) == config_hash(c2));

    // hash changes iff config changes
    auto c3 = with_override(c, "training.lr", "0.004");
    CHECK(config_hash(c3) != config_hash(c));
}

TEST_CASE("merge_layer_overrides: per-layer wins key-by-key") {
    auto c = parse_config(R"(
quantization:
  default_weight_fractional_bits: 7
  layer_specific:
    dense2: {default_weight_fractional_bits: 5}
)");
    auto eff2 = merge_layer_overrides(c, "dense2");
    CHECK(eff2.default_weight_fractional_bits == 5);
    auto eff1 = merge_layer_overrides(c, "dense1");
    CHECK(eff1.default_weight_fractional_bits == 7);

    // empty layer_specific: pure defaults
    auto plain = parse_config("");
    CHECK(merge_layer_overrides(plain, "anything").default_weight_fractional_bits == 7);
}

TEST_CASE("stage matrix: violations rejected before training") {
    auto dst = default_config("dst");
    dst.training.pretraining_epochs = 5;
    CHECK_THROWS_AS(validate_stage_plan(dst), ConfigError);

    auto pdp = default_config("pdp");
    pdp.training.pretraining_epochs = 0;
    CHECK_THROWS_AS(validate_stage_plan(pdp), ConfigError);

    auto as = default_config("autosparse");
    as.training.fine_tuning_epochs = 5;
    CHECK_THROWS_AS(validate_stage_plan(as), ConfigError);
    as.training.allow_fixed_mask_fine_tune = true; // not available for autosparse
    CHECK_THROWS_AS(validate_stage_plan(as), ConfigError);

    auto dst2 = default_config("dst");
    dst2.training.fine_tuning_epochs = 5;
    CHECK_THROWS_AS(validate_stage_plan(dst2), ConfigError);
    dst2.training.allow_fixed_mask_fine_tune = true; // optional fixed-mask fine-tune
    CHECK_NOTHROW(validate_stage_plan(dst2));

    auto wanda = default_config("wanda");
    wanda.pruning.granularity = PruneGranularity::n_m;
    wanda.pruning.wanda.use_budgets = true;
    CHECK_THROWS_AS(validate_stage_plan(wanda), ConfigError);
    wanda.pruning.wanda.use_budgets = false;
    CHECK_NOTHROW(validate_stage_plan(wanda));

    auto pdp2 = default_config("pdp");
    pdp2.pruning.granularity = PruneGranularity::n_m;
    CHECK_THROWS_AS(validate_stage_plan(pdp2), ConfigError);

    auto fit = default_config("fitcompress");
    fit.pruning.method = PruneMethod::dst;
    fit.pruning.enable_pruning = true;
    CHECK_THROWS_AS(validate_stage_plan(fit), ConfigError);

    auto cs = default_config("cs");
    cs.pruning.granularity = PruneGranularity::structured;
    CHECK_THROWS_AS(validate_stage_plan(cs), ConfigError);
}

TEST_CASE("property: random key mutations are rejected and named") {
    Rng rng(51, "fuzz");
    const std::string base = dump_config(default_config("dst"));
    int rejected = 0;
    for (int trial = 0; trial < 40; ++trial) {
        // pick a line with a key and perturb the key text
        std::vector<std::string> lines;
        std::string cur;
        for (char ch : base) {
            if (ch == '\n') {
                lines.push_back(cur);
                cur.clear();
            } else
                cur += ch;
        }
        size_t li = rng.next_below(lines.size());
        auto colon = lines[li].find(':');
        if (colon == std::string::npos || colon == 0) continue;
        size_t start = lines[li].find_first_not_of(' ');
        if (lines[li][start] == '-') continue;
        std::string key = lines[li].substr(start, colon - start);
        if (key.find('{') != std::string::npos || key.find('.') != std::string::npos) continue;
        std::string mutated = key;
        mutated.insert(rng.next_below(mutated.size() + 1), 1, 'x');
        std::string text = base;
        // replace only that line
        lines[li].replace(start, key.size(), mutated);
        text.clear();
        for (const auto& l : lines) text += l + "\n";
        try {
            parse_config(text);
            // a mutated key must never be silently accepted
            CHECK_MESSAGE(false, "accepted mutated key: " << mutated);
        } catch (const ConfigError& e) {
            CHECK_MESSAGE(std::string(e.what()).find(mutated) != std::string::npos,
                          "error does not name the key: " << e.what());
            ++rejected;
        }
    }
    CHECK(rejected >= 30);
}

TEST_CASE("with_override: path assignment re-validates") {
    auto c = default_config("dst");
    auto c2 = with_override(c, "pruning.dst.alpha", "0.00042");
    CHECK(c2.pruning.dst.alpha == doctest::Approx(0.00042));
    CHECK_THROWS_AS(with_override(c, "pruning.dst.banana", "1"), ConfigError);
    CHECK_THROWS_AS(with_override(c, "pruning.target_sparsity", "2.0"), ConfigError);
}

TEST_CASE("load_config: file handling") {
    CHECK_THROWS_AS(load_config("/nonexistent/path.yaml"), ConfigError);
    const char* path = "test_config_tmp.yaml";
    {
        std::ofstream f(path);
        f << "training:\n  epochs: 7\n";
    }
    auto c = load_config(path);
    CHECK(c.training.epochs == 7);
    std::remove(path);
}
