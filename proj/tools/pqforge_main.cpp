// pqforge command line: train/tune compressed models, export them to the
// integer inference bundle, and report run logs.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "pqforge/checkpoint.hpp"
#include "pqforge/data.hpp"
#include "pqforge/deploy.hpp"
#include "pqforge/fitcompress.hpp"
#include "pqforge/hpo.hpp"
#include "pqforge/report.hpp"
#include "pqforge/train.hpp"

namespace fs = std::filesystem;
using namespace pqforge;

namespace {

ModelDesc default_hlf_mlp() {
    ModelDesc d;
    d.input_shape = {16};
    size_t i = 1;
    for (size_t h : {64u, 32u, 32u}) {
        d.layers.push_back({LayerKind::dense, "fc" + std::to_string(i), h, 0, 0, 0, 0, "", {}, {}});
        d.layers.push_back(
            {LayerKind::activation, "relu" + std::to_string(i), 0, 0, 0, 0, 0, "relu", {}, {}});
        ++i;
    }
    d.layers.push_back({LayerKind::dense, "out", 5, 0, 0, 0, 0, "", {}, {}});
    return d;
}

/// "--data" accepts a CSV path or synth:n=...,features=...,classes=...
Dataset load_data_arg(const std::string& arg, double val_fraction, uint64_t seed) {
    if (arg.rfind("synth", 0) == 0) {
        size_t n = 10000, features = 16, classes = 5;
        const auto spec = arg.size() > 5 && arg[5] == ':' ? arg.substr(6) : "";
        std::string key, val;
        bool in_val = false;
        auto commit = [&] {
            if (key == "n") n = std::stoull(val);
            else if (key == "features") features = std::stoull(val);
            else if (key == "classes") classes = std::stoull(val);
            else if (!key.empty()) throw ConfigError("unknown synth data key \"" + key + "\"");
            key.clear();
            val.clear();
            in_val = false;
        };
        for (char ch : spec) {
            if (ch == '=') in_val = true;
            else if (ch == ',') commit();
            else (in_val ? val : key) += ch;
        }
        commit();
        return synth_dataset(n, features, classes, seed, val_fraction);
    }
    return load_hlf_csv(arg, val_fraction, seed);
}

struct TrainOutputs {
    RunRecord record;
    std::string checkpoint_path;
    std::string bundle_path;
};

template <class T>
TrainOutputs run_train(CompressionConfig cfg, const Dataset& data, const ModelDesc& desc,
                       const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto tr = data.train_split<T>();
    auto va = data.val_split<T>();
    auto model = replace_layers<T>(desc, cfg);
    model.norm_mean = data.mean;
    model.norm_std = data.stddev;

    DefaultTrainEpoch<T> train_fn;
    RunRecord rec = train_model<T>(
        model, tr, va,
        [&train_fn](ModelGraph<T>& m, Adam<T>& o, const DataSplit<T>& d, const EpochContext<T>& c) {
            return train_fn(m, o, d, c);
        },
        [](ModelGraph<T>& m, const DataSplit<T>& d, const EpochContext<T>& c) {
            return default_validate_epoch(m, d, c);
        });

    TrainOutputs out;
    out.checkpoint_path = (fs::path(out_dir) / "checkpoint.json").string();
    save_checkpoint(model, out.checkpoint_path);
    rec.artifact_path = out.checkpoint_path;

    try {
        DeployedModel dep = finalize_model(model);
        out.bundle_path = (fs::path(out_dir) / "model.pqb").string();
        export_bundle(dep, out.bundle_path);
        rec.bundle_hash = hex64(bundle_hash(dep));
        rec.artifact_path = out.bundle_path;
    } catch (const StateError& e) {
        log_info(std::string("bundle export skipped: ") + e.what());
    }

    Tracker tracker((fs::path(out_dir) / "run.jsonl").string());
    tracker.log_run(rec);
    out.record = rec;
    return out;
}

double metric_value(const RunRecord& rec, const std::string& name) {
    if (name == "val_accuracy") return rec.final_accuracy;
    if (name == "val_loss") return rec.epochs.empty() ? 0.0 : rec.epochs.back().val_loss;
    if (name == "ebops") return rec.final_ebops;
    if (name == "sparsity") return rec.final_sparsity;
    throw ConfigError("hpo: unknown objective metric \"" + name +
                      "\" (use val_accuracy, val_loss, ebops or sparsity)");
}

int run_cli(int argc, char** argv) {
    CLI::App app{"pqforge: hardware-aware neural network compression"};
    app.require_subcommand(1);

    std::string config_path, data_arg, model_path, out_dir = "out";
    std::string bundle_path, checkpoint_path, out_file;
    uint64_t seed = 0;
    bool seed_set = false;
    int workers = 0;
    std::string dtype = "f32";
    double val_fraction = 0.2;
    bool csv_mode = false;
    std::vector<std::string> report_files;

    auto add_common = [&](CLI::App* cmd, bool need_data) {
        cmd->add_option("--config", config_path, "YAML configuration file");
        if (need_data)
            cmd->add_option("--data", data_arg,
                            "dataset CSV, or synth:n=N,features=F,classes=C")
                ->required();
        cmd->add_option("--model", model_path, "model topology JSON (default: 16-64-32-32-5 MLP)");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--seed", seed, "override training.seed")->each([&](const std::string&) {
            seed_set = true;
        });
        cmd->add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
        cmd->add_option("--val-fraction", val_fraction, "validation fraction (default 0.2)");
    };

    auto* train_cmd = app.add_subcommand("train", "train a compressed model");
    add_common(train_cmd, true);

    auto* tune_cmd = app.add_subcommand("tune", "hyperparameter search over the hpo block");
    add_common(tune_cmd, true);
    tune_cmd->add_option("--workers", workers, "parallel trial workers");

    auto* export_cmd = app.add_subcommand("export", "finalize a checkpoint into an inference bundle");
    export_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint.json")->required();
    export_cmd->add_option("--out", out_file, "bundle path (default model.pqb)");
    export_cmd->add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

    auto* infer_cmd = app.add_subcommand("infer", "run the integer engine on raw feature rows");
    infer_cmd->add_option("--bundle", bundle_path, "model.pqb")->required();
    infer_cmd->add_option("--data", data_arg, "feature CSV")->required();
    infer_cmd->add_option("--out", out_file, "write scores CSV here (default stdout)");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a bundle or checkpoint on labeled data");
    eval_cmd->add_option("--bundle", bundle_path, "model.pqb");
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint.json");
    eval_cmd->add_option("--data", data_arg, "labeled CSV or synth spec")->required();
    eval_cmd->add_option("--seed", seed, "split seed");
    eval_cmd->add_option("--val-fraction", val_fraction, "validation fraction");
    eval_cmd->add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

    auto* template_cmd = app.add_subcommand("template", "emit a per-layer configuration template");
    template_cmd->add_option("--model", model_path, "model topology JSON")->required();
    template_cmd->add_option("--config", config_path, "base YAML configuration");
    template_cmd->add_option("--out", out_file, "write template here (default stdout)");

    auto* report_cmd = app.add_subcommand("report", "summarize run logs as a table");
    report_cmd->add_option("logs", report_files, "run.jsonl files")->required();
    report_cmd->add_flag("--csv", csv_mode, "emit CSV instead of markdown");

    CLI11_PARSE(app, argc, argv);

    auto load_cfg = [&]() {
        CompressionConfig cfg = config_path.empty() ? default_config("none") : load_config(config_path);
        if (seed_set) cfg.training.seed = seed;
        validate_stage_plan(cfg);
        return cfg;
    };
    auto load_desc = [&]() {
        return model_path.empty() ? default_hlf_mlp() : load_model_desc(model_path);
    };

    if (train_cmd->parsed()) {
        auto cfg = load_cfg();
        auto data = load_data_arg(data_arg, val_fraction, cfg.training.seed);
        TrainOutputs out = dtype == "f64" ? run_train<double>(cfg, data, load_desc(), out_dir)
                                          : run_train<float>(cfg, data, load_desc(), out_dir);
        std::cout << format("method=%s accuracy=%.4f sparsity=%.4f ebops=%.0f\n",
                            out.record.method.c_str(), out.record.final_accuracy,
                            out.record.final_sparsity, out.record.final_ebops);
        std::cout << "run log: " << (fs::path(out_dir) / "run.jsonl").string() << "\n";
        std::cout << "checkpoint: " << out.checkpoint_path << "\n";
        if (!out.bundle_path.empty()) std::cout << "bundle: " << out.bundle_path << "\n";
        return 0;
    }

    if (tune_cmd->parsed()) {
        auto cfg = load_cfg();
        if (workers > 0) cfg.hpo.workers = workers;
        if (cfg.hpo.n_trials < 1) throw ConfigError("hpo.n_trials must be >= 1 for tune");
        if (cfg.hpo.space.empty()) throw ConfigError("hpo.space is empty");
        if (cfg.hpo.objectives.empty()) throw ConfigError("hpo.objectives is empty");
        auto data = load_data_arg(data_arg, val_fraction, cfg.training.seed);
        auto desc = load_desc();
        fs::create_directories(out_dir);
        Tracker tracker((fs::path(out_dir) / "study.jsonl").string());

        auto objective = [&](const std::map<std::string, std::string>& params, int trial_id) {
            CompressionConfig c = cfg;
            for (const auto& [path, value] : params) c = with_override(c, path, value);
            c.training.seed = cfg.training.seed + 1000 + static_cast<uint64_t>(trial_id);
            const std::string trial_dir = (fs::path(out_dir) / format("trial_%03d", trial_id)).string();
            TrainOutputs out = dtype == "f64" ? run_train<double>(c, data, desc, trial_dir)
                                              : run_train<float>(c, data, desc, trial_dir);
            std::vector<double> vals;
            for (const auto& ob : cfg.hpo.objectives) vals.push_back(metric_value(out.record, ob.metric));
            return vals;
        };
        auto res = run_study(cfg.hpo, objective, &tracker);
        if (cfg.hpo.objectives.size() >= 2) {
            std::cout << "pareto front (trial: objectives):\n";
            for (size_t f : res.front) {
                std::cout << "  " << f << ":";
                for (double v : res.trials[f].objectives) std::cout << " " << format("%.6g", v);
                std::cout << "\n";
            }
        } else {
            std::cout << "best trial: " << res.best;
            if (res.best >= 0) std::cout << " value " << format("%.6g", res.trials[res.best].objectives[0]);
            std::cout << "\n";
        }
        std::cout << "study log: " << (fs::path(out_dir) / "study.jsonl").string() << "\n";
        return 0;
    }

    if (export_cmd->parsed()) {
        const std::string out_path = out_file.empty() ? "model.pqb" : out_file;
        DeployedModel dep;
        if (dtype == "f64") {
            auto g = load_checkpoint<double>(checkpoint_path);
            dep = finalize_model(g);
        } else {
            auto g = load_checkpoint<float>(checkpoint_path);
            dep = finalize_model(g);
        }
        export_bundle(dep, out_path);
        std::cout << "bundle: " << out_path << " hash=" << hex64(bundle_hash(dep)) << "\n";
        return 0;
    }

    if (infer_cmd->parsed()) {
        DeployedModel dep = import_bundle(bundle_path);
        const size_t F = dep.input_shape.empty() ? 0 : dep.input_shape[0];
        auto x = load_feature_csv(data_arg, F, nullptr);
        if (!dep.norm_mean.empty())
            for (size_t r = 0; r < x.dim(0); ++r)
                for (size_t f = 0; f < F; ++f)
                    x[r * F + f] = (x[r * F + f] - dep.norm_mean[f]) / dep.norm_std[f];
        auto scores = int_infer(dep, x);
        std::ostream* os = &std::cout;
        std::ofstream fout;
        if (!out_file.empty()) {
            fout.open(out_file);
            if (!fout) throw DataError("cannot write \"" + out_file + "\"");
            os = &fout;
        }
        const size_t C = scores.dim(1);
        for (size_t c = 0; c < C; ++c) *os << "score" << c << ",";
        *os << "argmax\n";
        for (size_t r = 0; r < scores.dim(0); ++r) {
            size_t arg = 0;
            for (size_t c = 0; c < C; ++c) {
                *os << format("%.10g", scores[r * C + c]) << ",";
                if (scores[r * C + c] > scores[r * C + arg]) arg = c;
            }
            *os << arg << "\n";
        }
        return 0;
    }

    if (eval_cmd->parsed()) {
        if (bundle_path.empty() == checkpoint_path.empty())
            throw ConfigError("eval: pass exactly one of --bundle or --checkpoint");
        auto data = load_data_arg(data_arg, val_fraction, seed);
        if (!bundle_path.empty()) {
            DeployedModel dep = import_bundle(bundle_path);
            auto va = data.val_split<double>();
            auto preds = int_predict(dep, va.X);
            size_t correct = 0;
            for (size_t i = 0; i < preds.size(); ++i)
                if (preds[i] == va.y[i]) ++correct;
            std::cout << format("val_accuracy=%.4f ebops=%.0f n=%zu\n",
                                double(correct) / double(preds.size()), deployed_ebops(dep),
                                preds.size());
        } else {
            auto run = [&](auto tag) {
                using T = decltype(tag);
                auto g = load_checkpoint<T>(checkpoint_path);
                auto va = data.val_split<T>();
                auto m = evaluate(g, va);
                std::cout << format("val_loss=%.6f val_accuracy=%.4f sparsity=%.4f ebops=%.0f\n",
                                    m.loss, m.accuracy, m.sparsity, m.ebops);
                for (auto& [name, sp] : m.per_layer_sparsity)
                    std::cout << format("  sparsity[%s]=%.4f\n", name.c_str(), sp);
            };
            if (dtype == "f64")
                run(double{});
            else
                run(float{});
        }
        return 0;
    }

    if (template_cmd->parsed()) {
        auto cfg = config_path.empty() ? default_config("none") : load_config(config_path);
        auto desc = load_desc();
        auto g = replace_layers<float>(desc, cfg);
        const std::string yaml = template_layer_config(g);
        if (out_file.empty()) {
            std::cout << yaml;
        } else {
            std::ofstream f(out_file);
            if (!f) throw DataError("cannot write \"" + out_file + "\"");
            f << yaml;
        }
        return 0;
    }

    if (report_cmd->parsed()) {
        std::vector<RunSummary> runs;
        for (const auto& p : report_files) {
            auto r = read_run_log(p);
            runs.insert(runs.end(), r.begin(), r.end());
        }
        std::cout << (csv_mode ? metrics_report_csv(runs) : metrics_report_markdown(runs));
        return 0;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
