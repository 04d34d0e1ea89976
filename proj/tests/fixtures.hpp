#pragma once

// Synthetic corpora with known ground truth, shared by unit and acceptance tests.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "mmhdit/datapipe.hpp"
#include "mmhdit/rng.hpp"

namespace mmh::test {

struct PlantedCorpus {
    EmbeddingSet set;
    std::vector<int> label;  // per row; groups are 0..groups-1, singletons follow
    int groups = 0;
};

inline std::vector<float> unit(std::vector<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    std::vector<float> out;
    for (double x : v) out.push_back(static_cast<float>(x / n));
    return out;
}

/// `groups` clusters of `group_size` near-duplicates (pairwise cosine > 0.95)
/// plus `singletons`, all built around mutually orthogonal centers so any two
/// items from different clusters have cosine < 0.5. Ids are "r000", "r001", ...
/// in sorted order; `straddle` lists sorted positions where a whole group is
/// placed contiguously (use it to put groups across chunk boundaries).
inline PlantedCorpus planted_corpus(std::uint64_t seed, int groups, int group_size, int singletons,
                                    const std::vector<int>& straddle = {}, int dim = 96) {
    Rng rng(seed);
    const int centers = groups + singletons;
    // Gram-Schmidt over random vectors: exact orthogonal centers.
    std::vector<std::vector<double>> basis;
    while (static_cast<int>(basis.size()) < centers) {
        std::vector<double> v(static_cast<std::size_t>(dim));
        for (auto& x : v) x = rng.normal();
        for (const auto& b : basis) {
            double d = 0;
            for (int i = 0; i < dim; ++i) d += v[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(i)];
            for (int i = 0; i < dim; ++i) v[static_cast<std::size_t>(i)] -= d * b[static_cast<std::size_t>(i)];
        }
        double n = 0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        for (auto& x : v) x /= n;
        basis.push_back(v);
    }

    // Unpinned items are shuffled; pinned groups are then spliced in as
    // contiguous blocks at their requested positions (ascending).
    const int pinned = static_cast<int>(straddle.size());
    std::vector<int> labels;
    for (int g = pinned; g < groups; ++g) labels.insert(labels.end(), static_cast<std::size_t>(group_size), g);
    for (int s = 0; s < singletons; ++s) labels.push_back(groups + s);
    for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);
    for (int k = 0; k < pinned; ++k) {
        labels.insert(labels.begin() + straddle[static_cast<std::size_t>(k)], static_cast<std::size_t>(group_size), k);
    }
    const std::size_t total = labels.size();

    PlantedCorpus out;
    out.groups = groups;
    for (std::size_t i = 0; i < total; ++i) {
        const auto& c = basis[static_cast<std::size_t>(labels[i])];
        std::vector<double> v(c);
        if (labels[i] < groups) {
            std::vector<double> noise(static_cast<std::size_t>(dim));
            double n = 0;
            for (auto& x : noise) n += (x = rng.normal()) * x;
            n = std::sqrt(n);
            for (int d = 0; d < dim; ++d) v[static_cast<std::size_t>(d)] += 0.12 * noise[static_cast<std::size_t>(d)] / n;
        }
        char id[32];
        std::snprintf(id, sizeof id, "r%03zu", i);
        out.set.add(id, unit(v));
        out.label.push_back(labels[i]);
    }
    return out;
}

}  // namespace mmh::test
