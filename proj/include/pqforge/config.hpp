#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pqforge/fixed_point.hpp"
#include "pqforge/pruning.hpp"
#include "pqforge/quantize.hpp"

namespace pqforge {

enum class RewindMode { never, every_round, post_training_stage };

const char* to_string(RewindMode m);
RewindMode parse_rewind_mode(const std::string& s);

/// Per-layer quantization overrides; absent fields fall back to the global
/// block key-by-key.
struct LayerQuantOverride {
    std::optional<int> default_data_keep_negatives;
    std::optional<int> default_data_integer_bits;
    std::optional<int> default_data_fractional_bits;
    std::optional<int> default_weight_keep_negatives;
    std::optional<int> default_weight_integer_bits;
    std::optional<int> default_weight_fractional_bits;
    std::optional<Granularity> granularity;
    std::optional<bool> quantize_input;
    std::optional<bool> quantize_output;
    std::optional<bool> enable_quantization;
    std::optional<RoundMode> round_mode;
    std::optional<OverflowMode> overflow_mode_data;
    std::optional<OverflowMode> overflow_mode_parameters;
};

struct QuantizationConfig {
    int default_data_keep_negatives = 1;
    int default_data_integer_bits = 0;
    int default_data_fractional_bits = 7;
    int default_weight_keep_negatives = 1;
    int default_weight_integer_bits = 0;
    int default_weight_fractional_bits = 7;
    Granularity granularity = Granularity::per_tensor;
    bool quantize_input = true;
    bool quantize_output = false;
    bool enable_quantization = true;
    double hgq_beta = 0.0;
    double hgq_gamma = 0.0;
    std::map<std::string, LayerQuantOverride> layer_specific;
    bool use_high_granularity_quantization = false;
    bool use_real_tanh = false;
    OverflowMode overflow_mode_data = OverflowMode::SAT;
    OverflowMode overflow_mode_parameters = OverflowMode::SAT;
    RoundMode round_mode = RoundMode::RND;
    bool use_relu_multiplier = false;

    FixedPointSpec data_spec() const {
        FixedPointSpec s;
        s.keep_negative = default_data_keep_negatives;
        s.integer_bits = default_data_integer_bits;
        s.fractional_bits = default_data_fractional_bits;
        s.round_mode = round_mode;
        s.overflow_mode = overflow_mode_data;
        return s;
    }
    FixedPointSpec weight_spec() const {
        FixedPointSpec s;
        s.keep_negative = default_weight_keep_negatives;
        s.integer_bits = default_weight_integer_bits;
        s.fractional_bits = default_weight_fractional_bits;
        s.round_mode = round_mode;
        s.overflow_mode = overflow_mode_parameters;
        return s;
    }
};

struct PruningConfig {
    PruneMethod method = PruneMethod::none;
    bool enable_pruning = true;
    std::vector<std::string> disabled_layers;
    PruneGranularity granularity = PruneGranularity::unstructured;
    int n = 2;
    int m = 4;
    double target_sparsity = 0.5;

    struct {
        double threshold = 0.05;
        int update_interval = 32;
    } activation;
    struct {
        double alpha = 1.0;
        double alpha_decay = 0.8;
        double threshold_init = -5.0;
    } autosparse;
    struct {
        double beta_final = 200.0;
        double s_init = 0.5;
    } cs;
    struct {
        double alpha = 1e-4;
        double reset_limit = 0.99;
    } dst;
    struct {
        double damping = 1.0;
        double lambda_lr_scale = 10.0;
        double eps_s = 1e-2;
    } mdmm;
    struct {
        double temperature = 1e-2;
    } pdp;
    struct {
        bool use_budgets = false;
        int calibration_batches = 1;
    } wanda;
};

struct TrainingConfig {
    int pretraining_epochs = 0;
    int epochs = 30;
    int fine_tuning_epochs = 0;
    int rounds = 1;
    RewindMode rewind = RewindMode::never;
    int save_weights_epoch = 0;
    bool pruning_first = true;
    bool allow_fixed_mask_fine_tune = false;
    double lr = 1e-3;
    int batch_size = 1024;
    uint64_t seed = 0;
    double weight_decay = 0.0;
    double bn_momentum = 0.1;
};

struct FitCompressConfig {
    bool enabled = false;
    double compression_goal = 0.5;
    double sparsity_step = 0.05;
    int bit_floor = 2;
    double max_sparsity = 0.99;
};

enum class HpoDirection { minimize, maximize };
enum class HpoDimKind { uniform, log_uniform, int_step, categorical };

struct HpoDimension {
    HpoDimKind kind = HpoDimKind::uniform;
    double lo = 0.0;
    double hi = 1.0;
    double step = 1.0;                 // int_step
    std::vector<std::string> choices;  // categorical
};

struct HpoObjective {
    std::string metric; // val_accuracy | val_loss | ebops | sparsity
    HpoDirection direction = HpoDirection::maximize;
};

struct HpoConfig {
    int n_trials = 0;
    std::string sampler = "random"; // random | tpe_lite
    uint64_t seed = 0;
    int workers = 1;
    std::vector<HpoObjective> objectives;
    std::map<std::string, HpoDimension> space; // keyed by config path
};

struct CompressionConfig {
    QuantizationConfig quantization;
    PruningConfig pruning;
    TrainingConfig training;
    FitCompressConfig fitcompress;
    HpoConfig hpo;
};

/// Parse and validate a YAML file. Unknown keys, wrong types and enum
/// violations are rejected with the offending key path named.
CompressionConfig load_config(const std::string& path);

/// Same, from a YAML string (used by tests and HPO overrides).
CompressionConfig parse_config(const std::string& yaml_text);

/// Canonical YAML dump; load(dump(c)) reproduces c.
std::string dump_config(const CompressionConfig& c);

/// FNV hash of the canonical dump.
uint64_t config_hash(const CompressionConfig& c);

/// Method-appropriate defaults. Accepts the seven pruning method names plus
/// "none", "hgq" and "fitcompress".
CompressionConfig default_config(const std::string& method);

/// Effective quantization settings for one layer: per-layer override beats
/// the global default key-by-key.
QuantizationConfig merge_layer_overrides(const CompressionConfig& c, const std::string& layer_name);

/// Stage/granularity legality checks (the pruning stage matrix and the
/// FITCompress preconditions). Throws ConfigError before any training runs.
void validate_stage_plan(const CompressionConfig& c);

/// Apply one "path: value" override (e.g. "pruning.dst.alpha: 3e-4") and
/// re-validate; used by the HPO loop.
CompressionConfig with_override(const CompressionConfig& c, const std::string& path,
                                const std::string& value);

} // namespace pqforge
