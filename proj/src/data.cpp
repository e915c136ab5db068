#include "pqforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "pqforge/rng.hpp"

namespace pqforge {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    for (auto& s : out) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
    }
    return out;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end && *end == '\0';
}

void finish_split_and_normalize(Dataset& d, double val_fraction, uint64_t seed) {
    const size_t n = d.y.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed, "split");
    rng.shuffle(order);
    const size_t n_val = static_cast<size_t>(std::llround(val_fraction * static_cast<double>(n)));
    const size_t n_train = n - n_val;
    d.train_idx.assign(order.begin(), order.begin() + n_train);
    d.val_idx.assign(order.begin() + n_train, order.end());

    d.mean.assign(d.features, 0.0);
    d.stddev.assign(d.features, 0.0);
    for (size_t i : d.train_idx)
        for (size_t f = 0; f < d.features; ++f) d.mean[f] += d.X[i * d.features + f];
    for (size_t f = 0; f < d.features; ++f) d.mean[f] /= static_cast<double>(d.train_idx.size());
    for (size_t i : d.train_idx)
        for (size_t f = 0; f < d.features; ++f) {
            const double diff = d.X[i * d.features + f] - d.mean[f];
            d.stddev[f] += diff * diff;
        }
    for (size_t f = 0; f < d.features; ++f) {
        d.stddev[f] = std::sqrt(d.stddev[f] / static_cast<double>(d.train_idx.size()));
        if (d.stddev[f] == 0.0) d.stddev[f] = 1.0;
    }
    for (size_t i = 0; i < n; ++i)
        for (size_t f = 0; f < d.features; ++f)
            d.X[i * d.features + f] = (d.X[i * d.features + f] - d.mean[f]) / d.stddev[f];
}

} // namespace

Dataset load_hlf_csv(const std::string& path, double val_fraction, uint64_t seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw ConfigError("load_hlf_csv: val_fraction must lie in [0,1)");
    std::ifstream f(path);
    if (!f) throw DataError("cannot open dataset \"" + path + "\"");

    std::string line;
    size_t line_no = 0;
    size_t n_cols = 0;
    bool first_content = true;
    std::vector<double> values;
    std::vector<std::string> raw_labels;

    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (first_content) {
            n_cols = cells.size();
            if (n_cols < 2)
                throw DataError(format("%s:%zu: expected feature columns plus a label column",
                                       path.c_str(), line_no));
            // header if any cell is non-numeric and the row is not label-only-text
            double tmp;
            bool numeric_first = parse_double(cells[0], tmp);
            first_content = false;
            if (!numeric_first) continue; // header row
        }
        if (cells.size() != n_cols)
            throw DataError(format("%s:%zu: expected %zu columns, found %zu", path.c_str(), line_no,
                                   n_cols, cells.size()));
        for (size_t c = 0; c + 1 < n_cols; ++c) {
            double v;
            if (!parse_double(cells[c], v))
                throw DataError(format("%s:%zu: column %zu is not numeric: \"%s\"", path.c_str(),
                                       line_no, c + 1, cells[c].c_str()));
            values.push_back(v);
        }
        raw_labels.push_back(cells[n_cols - 1]);
    }
    if (raw_labels.empty()) throw DataError("dataset \"" + path + "\" has no data rows");

    Dataset d;
    d.features = n_cols - 1;
    const size_t n = raw_labels.size();
    d.X = Tensor<double>({n, d.features}, std::move(values));
    d.y.resize(n);

    // integer labels pass through; strings map to sorted order
    bool all_int = true;
    for (const auto& s : raw_labels) {
        double v;
        if (!parse_double(s, v) || v != std::floor(v)) {
            all_int = false;
            break;
        }
    }
    if (all_int) {
        int max_label = 0;
        for (size_t i = 0; i < n; ++i) {
            d.y[i] = static_cast<int>(std::stod(raw_labels[i]));
            if (d.y[i] < 0) throw DataError("dataset: negative class label");
            max_label = std::max(max_label, d.y[i]);
        }
        d.classes = static_cast<size_t>(max_label) + 1;
    } else {
        std::vector<std::string> names = raw_labels;
        std::sort(names.begin(), names.end());
        names.erase(std::unique(names.begin(), names.end()), names.end());
        std::map<std::string, int> index;
        for (size_t i = 0; i < names.size(); ++i) index[names[i]] = static_cast<int>(i);
        for (size_t i = 0; i < n; ++i) d.y[i] = index[raw_labels[i]];
        d.class_names = names;
        d.classes = names.size();
    }

    finish_split_and_normalize(d, val_fraction, seed);
    return d;
}

Dataset synth_dataset(size_t n, size_t features, size_t classes, uint64_t seed,
                      double val_fraction) {
    if (classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
    if (n < classes * 10) throw ConfigError("synth_dataset: need at least 10 samples per class");

    Rng rng(seed, "synth");
    // near-orthogonal unit directions for the class centers
    std::vector<std::vector<double>> dirs(classes, std::vector<double>(features));
    for (size_t c = 0; c < classes; ++c) {
        for (size_t f = 0; f < features; ++f) dirs[c][f] = rng.normal();
        for (size_t p = 0; p < c && p < features; ++p) { // Gram-Schmidt
            double dot = 0;
            for (size_t f = 0; f < features; ++f) dot += dirs[c][f] * dirs[p][f];
            for (size_t f = 0; f < features; ++f) dirs[c][f] -= dot * dirs[p][f];
        }
        double norm = 0;
        for (size_t f = 0; f < features; ++f) norm += dirs[c][f] * dirs[c][f];
        norm = std::sqrt(std::max(norm, 1e-12));
        for (size_t f = 0; f < features; ++f) dirs[c][f] /= norm;
    }

    // center radius sized for roughly 90% linear separability
    const double radius = 2.9;
    Dataset d;
    d.features = features;
    d.classes = classes;
    d.X = Tensor<double>({n, features});
    d.y.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const size_t cls = i % classes; // balanced within one sample
        d.y[i] = static_cast<int>(cls);
        for (size_t f = 0; f < features; ++f)
            d.X[i * features + f] = radius * dirs[cls][f] + rng.normal();
    }
    finish_split_and_normalize(d, val_fraction, seed);
    return d;
}

Tensor<double> load_feature_csv(const std::string& path, size_t expected_features,
                                std::vector<int>* labels_out,
                                const std::vector<std::string>& class_names) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open \"" + path + "\"");
    std::string line;
    size_t line_no = 0;
    std::vector<double> values;
    std::vector<int> labels;
    bool first_content = true;
    bool has_label_col = false;
    std::map<std::string, int> name_index;
    for (size_t i = 0; i < class_names.size(); ++i) name_index[class_names[i]] = static_cast<int>(i);

    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (first_content) {
            double tmp;
            first_content = false;
            if (!parse_double(cells[0], tmp)) {
                if (cells.size() != expected_features && cells.size() != expected_features + 1)
                    throw DataError(format("%s:%zu: expected %zu (+1 label) columns, found %zu",
                                           path.c_str(), line_no, expected_features, cells.size()));
                has_label_col = cells.size() == expected_features + 1;
                continue;
            }
            has_label_col = cells.size() == expected_features + 1;
        }
        const size_t want = expected_features + (has_label_col ? 1 : 0);
        if (cells.size() != want)
            throw DataError(format("%s:%zu: expected %zu columns, found %zu", path.c_str(), line_no,
                                   want, cells.size()));
        for (size_t c = 0; c < expected_features; ++c) {
            double v;
            if (!parse_double(cells[c], v))
                throw DataError(format("%s:%zu: column %zu is not numeric", path.c_str(), line_no, c + 1));
            values.push_back(v);
        }
        if (has_label_col) {
            const std::string& s = cells[expected_features];
            double v;
            if (parse_double(s, v))
                labels.push_back(static_cast<int>(v));
            else if (name_index.count(s))
                labels.push_back(name_index[s]);
            else
                labels.push_back(-1);
        }
    }
    if (values.empty()) throw DataError("\"" + path + "\" has no data rows");
    const size_t n = values.size() / expected_features;
    if (labels_out) *labels_out = has_label_col ? labels : std::vector<int>();
    return Tensor<double>({n, expected_features}, std::move(values));
}

void write_csv(const Dataset& d, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write \"" + path + "\"");
    for (size_t c = 0; c < d.features; ++c) f << "f" << c << ",";
    f << "label\n";
    for (size_t i = 0; i < d.y.size(); ++i) {
        for (size_t c = 0; c < d.features; ++c) f << format("%.9g", d.X[i * d.features + c]) << ",";
        if (!d.class_names.empty())
            f << d.class_names[d.y[i]] << "\n";
        else
            f << d.y[i] << "\n";
    }
}

} // namespace pqforge
