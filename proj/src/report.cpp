#include "pqforge/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "pqforge/util.hpp"

namespace pqforge {

using nlohmann::json;

std::vector<RunSummary> read_run_log(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open run log \"" + path + "\"");
    std::vector<RunSummary> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(format("%s:%zu: bad JSON line: %s", path.c_str(), line_no, e.what()));
        }
        if (!j.contains("type") || j["type"] != "summary") continue;
        RunSummary s;
        s.method = j.value("method", "?");
        s.granularity = j.value("granularity", "per_tensor");
        s.status = j.value("status", "?");
        s.accuracy = j.value("final_accuracy", 0.0);
        s.sparsity = j.value("final_sparsity", 0.0);
        s.ebops = j.value("final_ebops", 0.0);
        s.config_hash = j.value("config_hash", "");
        s.bundle_hash = j.value("bundle_hash", "");
        if (j.contains("layer_sparsity"))
            for (const auto& [k, v] : j["layer_sparsity"].items())
                s.layer_sparsity[k] = v.get<double>();
        out.push_back(std::move(s));
    }
    return out;
}

std::string granularity_tag(const std::string& granularity) {
    if (granularity == "per_tensor") return "t";
    if (granularity == "per_channel") return "c";
    if (granularity == "per_weight") return "w";
    return "?";
}

namespace {

std::vector<std::string> layer_columns(const std::vector<RunSummary>& runs) {
    std::set<std::string> names;
    for (const auto& r : runs)
        for (const auto& [k, v] : r.layer_sparsity) names.insert(k);
    return {names.begin(), names.end()};
}

} // namespace

std::string metrics_report_markdown(const std::vector<RunSummary>& runs) {
    if (runs.empty()) throw DataError("report: no terminal run summaries found");
    auto layers = layer_columns(runs);
    std::ostringstream o;
    o << "| method | gran | accuracy | sparsity | EBOPs |";
    for (const auto& l : layers) o << " sp(" << l << ") |";
    o << "\n|---|---|---|---|---|";
    for (size_t i = 0; i < layers.size(); ++i) o << "---|";
    o << "\n";
    for (const auto& r : runs) {
        o << "| " << r.method << " | " << granularity_tag(r.granularity) << " | "
          << format("%.4f", r.accuracy) << " | " << format("%.4f", r.sparsity) << " | "
          << format("%.0f", r.ebops) << " |";
        for (const auto& l : layers) {
            auto it = r.layer_sparsity.find(l);
            o << " " << (it == r.layer_sparsity.end() ? "-" : format("%.4f", it->second)) << " |";
        }
        o << "\n";
    }
    return o.str();
}

std::string metrics_report_csv(const std::vector<RunSummary>& runs) {
    if (runs.empty()) throw DataError("report: no terminal run summaries found");
    auto layers = layer_columns(runs);
    std::ostringstream o;
    o << "method,gran,accuracy,sparsity,ebops";
    for (const auto& l : layers) o << ",sp_" << l;
    o << "\n";
    for (const auto& r : runs) {
        o << r.method << "," << granularity_tag(r.granularity) << "," << format("%.6f", r.accuracy)
          << "," << format("%.6f", r.sparsity) << "," << format("%.0f", r.ebops);
        for (const auto& l : layers) {
            auto it = r.layer_sparsity.find(l);
            o << "," << (it == r.layer_sparsity.end() ? "" : format("%.6f", it->second));
        }
        o << "\n";
    }
    return o.str();
}

} // namespace pqforge
