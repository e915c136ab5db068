#include "pqforge/hpo.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <thread>

namespace pqforge {

using nlohmann::json;

// ---------------------------------------------------------------------------
// tracker

Tracker::Tracker(const std::string& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd_ < 0) throw DataError("tracker: cannot open \"" + path + "\" for append");
}

Tracker::~Tracker() {
    if (fd_ >= 0) ::close(fd_);
}

void Tracker::log_line(const std::string& line) {
    std::string buf = line;
    if (buf.empty() || buf.back() != '\n') buf += '\n';
    std::lock_guard<std::mutex> lock(mu_);
    const char* p = buf.data();
    size_t left = buf.size();
    while (left > 0) {
        ssize_t n = ::write(fd_, p, left);
        if (n < 0) throw DataError("tracker: write to \"" + path_ + "\" failed");
        p += n;
        left -= static_cast<size_t>(n);
    }
}

std::string run_summary_json(const RunRecord& rec) {
    json j;
    j["type"] = "summary";
    j["status"] = rec.status;
    j["config_hash"] = rec.config_hash;
    j["method"] = rec.method;
    j["granularity"] = rec.granularity;
    j["final_accuracy"] = rec.final_accuracy;
    j["final_ebops"] = rec.final_ebops;
    j["final_sparsity"] = rec.final_sparsity;
    json ls = json::object();
    for (const auto& [name, v] : rec.final_layer_sparsity) ls[name] = v;
    j["layer_sparsity"] = ls;
    j["wall_seconds"] = rec.wall_seconds;
    j["artifact"] = rec.artifact_path;
    j["bundle_hash"] = rec.bundle_hash;
    return j.dump();
}

std::vector<std::string> run_record_lines(const RunRecord& rec) {
    std::vector<std::string> out;
    for (const auto& e : rec.epochs) {
        json j;
        j["type"] = "epoch";
        j["epoch"] = e.epoch;
        j["stage"] = e.stage;
        j["round"] = e.round;
        j["train_loss"] = e.train_loss;
        j["val_loss"] = e.val_loss;
        j["val_accuracy"] = e.val_accuracy;
        j["sparsity"] = e.sparsity;
        j["ebops"] = e.ebops;
        out.push_back(j.dump());
    }
    out.push_back(run_summary_json(rec));
    return out;
}

std::string trial_json(const Trial& t) {
    json j;
    j["type"] = "trial";
    j["id"] = t.id;
    json p = json::object();
    for (const auto& [k, v] : t.params) p[k] = v;
    j["params"] = p;
    j["objectives"] = t.objectives;
    j["status"] = t.failed ? "failed" : "complete";
    return j.dump();
}

void Tracker::log_run(const RunRecord& rec) {
    for (const auto& line : run_record_lines(rec)) log_line(line);
}

void Tracker::log_trial(const Trial& t) { log_line(trial_json(t)); }

// ---------------------------------------------------------------------------
// sampling

namespace {

double transform_fwd(const HpoDimension& d, double v) {
    return d.kind == HpoDimKind::log_uniform ? std::log(v) : v;
}

double transform_bwd(const HpoDimension& d, double v) {
    return d.kind == HpoDimKind::log_uniform ? std::exp(v) : v;
}

SampledValue finalize_value(const HpoDimension& d, double raw) {
    SampledValue s;
    if (d.kind == HpoDimKind::categorical) {
        size_t idx = std::min(d.choices.size() - 1, static_cast<size_t>(raw));
        s.num = static_cast<double>(idx);
        s.text = d.choices[idx];
        return s;
    }
    double v = transform_bwd(d, raw);
    if (d.kind == HpoDimKind::int_step) {
        const double k = std::round((v - d.lo) / d.step);
        v = d.lo + k * d.step;
        v = std::min(std::max(v, d.lo), d.hi);
        s.num = v;
        s.text = format("%.17g", v);
        return s;
    }
    v = std::min(std::max(v, d.lo), d.hi);
    s.num = v;
    s.text = format("%.17g", v);
    return s;
}

double draw_uniform_raw(const HpoDimension& d, Rng& rng) {
    switch (d.kind) {
        case HpoDimKind::categorical:
            return static_cast<double>(rng.next_below(d.choices.size()));
        case HpoDimKind::log_uniform:
            return rng.uniform(std::log(d.lo), std::log(d.hi));
        default:
            return rng.uniform(d.lo, d.hi);
    }
}

/// Rank-scalarized objective for sampler history: single objective uses the
/// signed value (minimization order); multi-objective uses Pareto rank.
std::vector<double> history_scores(const std::vector<Trial>& hist,
                                   const std::vector<HpoObjective>& objectives) {
    std::vector<double> scores(hist.size(), std::numeric_limits<double>::infinity());
    if (objectives.size() <= 1) {
        const bool maximize = !objectives.empty() && objectives[0].direction == HpoDirection::maximize;
        for (size_t i = 0; i < hist.size(); ++i) {
            if (hist[i].failed || hist[i].objectives.empty()) continue; // +inf: always bad
            scores[i] = maximize ? -hist[i].objectives[0] : hist[i].objectives[0];
        }
        return scores;
    }
    // Pareto rank: members of the front get 0, then peeled layer by layer
    std::vector<Trial> pool = hist;
    std::vector<size_t> alive;
    for (size_t i = 0; i < hist.size(); ++i)
        if (!hist[i].failed && !hist[i].objectives.empty()) alive.push_back(i);
    int rank = 0;
    std::vector<bool> taken(hist.size(), false);
    while (!alive.empty()) {
        std::vector<Trial> sub;
        for (size_t i : alive) sub.push_back(hist[i]);
        auto front = pareto_front(sub, objectives);
        std::vector<bool> in_front(alive.size(), false);
        for (size_t f : front) in_front[f] = true;
        std::vector<size_t> next;
        for (size_t k = 0; k < alive.size(); ++k) {
            if (in_front[k]) {
                scores[alive[k]] = rank;
                taken[alive[k]] = true;
            } else {
                next.push_back(alive[k]);
            }
        }
        alive = std::move(next);
        ++rank;
    }
    return scores;
}

double silverman_bandwidth(const std::vector<double>& xs, double span) {
    if (xs.size() < 2) return span > 0 ? span * 0.1 : 1.0;
    double mean = 0;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(xs.size());
    double var = 0;
    for (double v : xs) var += (v - mean) * (v - mean);
    var /= static_cast<double>(xs.size() - 1);
    double sigma = std::sqrt(var);
    if (sigma <= 0) sigma = span > 0 ? span * 0.01 : 1e-3;
    return 1.06 * sigma * std::pow(static_cast<double>(xs.size()), -0.2);
}

double kde_density(const std::vector<double>& xs, double h, double x) {
    if (xs.empty()) return 1e-12;
    double acc = 0;
    for (double v : xs) {
        const double z = (x - v) / h;
        acc += std::exp(-0.5 * z * z);
    }
    return acc / (static_cast<double>(xs.size()) * h * 2.5066282746310002) + 1e-12;
}

} // namespace

std::map<std::string, SampledValue> sample_trial(const HpoConfig& cfg,
                                                 const std::vector<Trial>& history, Rng& rng) {
    if (cfg.space.empty()) throw ConfigError("hpo: empty search space");
    std::map<std::string, SampledValue> out;

    std::vector<const Trial*> complete;
    for (const auto& t : history)
        if (!t.failed && !t.objectives.empty()) complete.push_back(&t);

    const bool use_tpe = cfg.sampler == "tpe_lite" && complete.size() >= 4;
    std::vector<double> scores;
    std::vector<size_t> order; // indices into history, best first
    if (use_tpe) {
        scores = history_scores(history, cfg.objectives);
        for (size_t i = 0; i < history.size(); ++i)
            if (std::isfinite(scores[i])) order.push_back(i);
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    }

    for (const auto& [name, dim] : cfg.space) {
        if (!use_tpe) {
            out[name] = finalize_value(dim, draw_uniform_raw(dim, rng));
            continue;
        }
        // gamma split at 25%
        const size_t n_good = std::max<size_t>(1, order.size() / 4);
        std::vector<double> good, bad;
        for (size_t k = 0; k < order.size(); ++k) {
            const Trial& t = history[order[k]];
            auto it = t.params.find(name);
            if (it == t.params.end()) continue;
            double raw;
            if (dim.kind == HpoDimKind::categorical) {
                raw = 0;
                for (size_t c = 0; c < dim.choices.size(); ++c)
                    if (dim.choices[c] == it->second) raw = static_cast<double>(c);
            } else {
                raw = transform_fwd(dim, std::stod(it->second));
            }
            (k < n_good ? good : bad).push_back(raw);
        }
        if (good.empty()) {
            out[name] = finalize_value(dim, draw_uniform_raw(dim, rng));
            continue;
        }
        if (dim.kind == HpoDimKind::categorical) {
            // count-based densities with add-one smoothing
            std::vector<double> pg(dim.choices.size(), 1.0), pb(dim.choices.size(), 1.0);
            for (double g : good) pg[static_cast<size_t>(g)] += 1.0;
            for (double b : bad) pb[static_cast<size_t>(b)] += 1.0;
            size_t best = 0;
            double best_ratio = -1;
            for (int c = 0; c < 24; ++c) {
                const size_t cand = rng.next_below(dim.choices.size());
                const double ratio = pg[cand] / pb[cand];
                if (ratio > best_ratio) {
                    best_ratio = ratio;
                    best = cand;
                }
            }
            out[name] = finalize_value(dim, static_cast<double>(best));
            continue;
        }
        const double span = transform_fwd(dim, dim.hi) - transform_fwd(dim, dim.lo);
        const double hg = silverman_bandwidth(good, span);
        const double hb = silverman_bandwidth(bad, span);
        double best_raw = good[0];
        double best_ratio = -1;
        for (int c = 0; c < 24; ++c) {
            const double base = good[rng.next_below(good.size())];
            double cand = base + hg * rng.normal();
            cand = std::min(std::max(cand, transform_fwd(dim, dim.lo)), transform_fwd(dim, dim.hi));
            const double ratio = kde_density(good, hg, cand) / kde_density(bad, hb, cand);
            if (ratio > best_ratio) {
                best_ratio = ratio;
                best_raw = cand;
            }
        }
        out[name] = finalize_value(dim, best_raw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// pareto

namespace {

bool dominates(const std::vector<double>& a, const std::vector<double>& b,
               const std::vector<HpoObjective>& obj) {
    bool strict = false;
    for (size_t k = 0; k < obj.size(); ++k) {
        const double av = obj[k].direction == HpoDirection::maximize ? a[k] : -a[k];
        const double bv = obj[k].direction == HpoDirection::maximize ? b[k] : -b[k];
        if (av < bv) return false;
        if (av > bv) strict = true;
    }
    return strict;
}

} // namespace

std::vector<size_t> pareto_front(const std::vector<Trial>& trials,
                                 const std::vector<HpoObjective>& objectives) {
    std::vector<size_t> front;
    for (size_t i = 0; i < trials.size(); ++i) {
        if (trials[i].failed || trials[i].objectives.size() != objectives.size()) continue;
        bool dominated = false;
        for (size_t j = 0; j < trials.size() && !dominated; ++j) {
            if (j == i || trials[j].failed || trials[j].objectives.size() != objectives.size())
                continue;
            if (dominates(trials[j].objectives, trials[i].objectives, objectives)) dominated = true;
        }
        if (!dominated) front.push_back(i);
    }
    return front;
}

// ---------------------------------------------------------------------------
// study

StudyResult run_study(const HpoConfig& cfg,
                      const std::function<std::vector<double>(
                          const std::map<std::string, std::string>& params, int trial_id)>& objective,
                      Tracker* tracker) {
    if (cfg.n_trials <= 0) throw ConfigError("hpo: n_trials must be >= 1 to run a study");
    if (cfg.objectives.empty()) throw ConfigError("hpo: at least one objective is required");
    StudyResult res;
    res.trials.resize(cfg.n_trials);

    std::mutex mu; // guards history view and next-trial counter
    int next_id = 0;
    int completed = 0;

    auto worker = [&]() {
        for (;;) {
            int id;
            std::map<std::string, SampledValue> sampled;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next_id >= cfg.n_trials) return;
                id = next_id++;
                std::vector<Trial> hist(res.trials.begin(), res.trials.begin() + completed);
                Rng rng(cfg.seed, format("trial-%d", id));
                sampled = sample_trial(cfg, hist, rng);
            }
            Trial t;
            t.id = id;
            for (const auto& [k, v] : sampled) t.params[k] = v.text;
            try {
                t.objectives = objective(t.params, id);
                for (double v : t.objectives)
                    if (!std::isfinite(v)) throw DataError("objective returned a non-finite value");
            } catch (const std::exception& e) {
                t.failed = true;
                t.objectives.clear();
                log_info(format("hpo: trial %d failed: %s", id, e.what()));
            }
            {
                std::lock_guard<std::mutex> lock(mu);
                res.trials[id] = t;
                if (completed <= id) completed = id + 1;
            }
            if (tracker) tracker->log_trial(t);
        }
    };

    const int workers = std::max(1, cfg.workers);
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    if (cfg.objectives.size() >= 2) {
        res.front = pareto_front(res.trials, cfg.objectives);
    } else {
        const bool maximize = cfg.objectives[0].direction == HpoDirection::maximize;
        double best = maximize ? -std::numeric_limits<double>::infinity()
                               : std::numeric_limits<double>::infinity();
        for (const auto& t : res.trials) {
            if (t.failed || t.objectives.empty()) continue;
            if ((maximize && t.objectives[0] > best) || (!maximize && t.objectives[0] < best)) {
                best = t.objectives[0];
                res.best = t.id;
            }
        }
    }
    return res;
}

} // namespace pqforge
