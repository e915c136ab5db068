#pragma once

#include <string>
#include <vector>

#include "pqforge/train.hpp"

namespace pqforge {

/// Loaded classification dataset with a seeded train/val split and
/// z-score normalization computed on the train split only.
struct Dataset {
    Tensor<double> X; // [N,F], already normalized
    std::vector<int> y;
    size_t features = 0;
    size_t classes = 0;
    std::vector<std::string> class_names; // string-labeled files, sorted
    std::vector<size_t> train_idx, val_idx;
    std::vector<double> mean, stddev; // train-split statistics

    template <class T>
    DataSplit<T> split(const std::vector<size_t>& idx) const {
        DataSplit<T> d;
        d.X = Tensor<T>({idx.size(), features});
        d.y.resize(idx.size());
        for (size_t r = 0; r < idx.size(); ++r) {
            for (size_t f = 0; f < features; ++f)
                d.X[r * features + f] = static_cast<T>(X[idx[r] * features + f]);
            d.y[r] = y[idx[r]];
        }
        return d;
    }
    template <class T>
    DataSplit<T> train_split() const {
        return split<T>(train_idx);
    }
    template <class T>
    DataSplit<T> val_split() const {
        return split<T>(val_idx);
    }
};

/// Parse a delimited file of numeric feature columns plus a trailing label
/// column (integers or class names; names map to indices in sorted order).
/// Rows are shuffled with the seed before the split.
Dataset load_hlf_csv(const std::string& path, double val_fraction, uint64_t seed);

/// Gaussian-mixture fallback when no real dataset is available: one
/// component per class, separations sized so a linear model reaches about
/// 90% accuracy. Balanced labels, seeded, same split/normalization pipeline.
Dataset synth_dataset(size_t n, size_t features, size_t classes, uint64_t seed,
                      double val_fraction = 0.2);

void write_csv(const Dataset& d, const std::string& path); // fixture generation

/// Raw feature rows for inference: no shuffling, no normalization. A file
/// with one extra column is treated as features plus a label column; labels
/// (when present and integer or known class names) land in labels_out.
Tensor<double> load_feature_csv(const std::string& path, size_t expected_features,
                                std::vector<int>* labels_out,
                                const std::vector<std::string>& class_names = {});

} // namespace pqforge
