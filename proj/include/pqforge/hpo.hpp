#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "pqforge/config.hpp"
#include "pqforge/train.hpp"

namespace pqforge {

/// One sampled configuration and its outcome.
struct Trial {
    int id = 0;
    std::map<std::string, std::string> params; // config path -> YAML value
    std::vector<double> objectives;
    bool failed = false;
};

/// Append-only JSON-lines experiment log. A single writer lock serializes
/// appends, so concurrent workers never tear lines.
class Tracker {
public:
    explicit Tracker(const std::string& path);
    ~Tracker();
    Tracker(const Tracker&) = delete;
    Tracker& operator=(const Tracker&) = delete;

    void log_run(const RunRecord& rec);
    void log_trial(const Trial& t);
    void log_line(const std::string& json_object_line);
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::mutex mu_;
    int fd_ = -1;
};

std::string run_summary_json(const RunRecord& rec);
std::vector<std::string> run_record_lines(const RunRecord& rec);
std::string trial_json(const Trial& t);

/// Numeric view of one sampled parameter (categoricals carry an index).
struct SampledValue {
    double num = 0.0;
    std::string text;
};

/// Draw one assignment from the space. `random` draws each dimension
/// independently; `tpe_lite` splits the history at the 25% quantile of the
/// (rank-scalarized) objective, fits Gaussian kernels with Silverman
/// bandwidth to the good set, and keeps the candidate with the best
/// good/bad density ratio out of 24 draws.
std::map<std::string, SampledValue> sample_trial(const HpoConfig& cfg,
                                                 const std::vector<Trial>& history, Rng& rng);

/// Indices of the non-dominated complete trials under the objective
/// directions. Exactly the O(n^2) dominance relation.
std::vector<size_t> pareto_front(const std::vector<Trial>& trials,
                                 const std::vector<HpoObjective>& objectives);

struct StudyResult {
    std::vector<Trial> trials;
    std::vector<size_t> front; // indices into trials (multi-objective)
    int best = -1;             // single-objective winner
};

/// Run a study: n_trials evaluations of the objective function over sampled
/// configurations, optionally in parallel workers. A throwing objective
/// marks its trial failed and the study continues.
StudyResult run_study(const HpoConfig& cfg,
                      const std::function<std::vector<double>(
                          const std::map<std::string, std::string>& params, int trial_id)>& objective,
                      Tracker* tracker);

} // namespace pqforge
