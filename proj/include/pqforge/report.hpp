#pragma once

#include <map>
#include <string>
#include <vector>

namespace pqforge {

/// Terminal summary of one run, parsed back from a JSONL log.
struct RunSummary {
    std::string method;
    std::string granularity; // rendered as t/c/w
    std::string status;
    double accuracy = 0.0;
    double sparsity = 0.0;
    double ebops = 0.0;
    std::map<std::string, double> layer_sparsity;
    std::string config_hash;
    std::string bundle_hash;
};

/// All summary lines of a JSONL run log (skips epoch/trial lines).
std::vector<RunSummary> read_run_log(const std::string& path);

/// Short tag for the granularity column: t, c or w.
std::string granularity_tag(const std::string& granularity);

/// One row per run: method, granularity tag, accuracy, overall sparsity,
/// per-layer sparsity columns, EBOPs.
std::string metrics_report_markdown(const std::vector<RunSummary>& runs);
std::string metrics_report_csv(const std::vector<RunSummary>& runs);

} // namespace pqforge
