#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "tpl/common.hpp"
#include "tpl/tensor.hpp"

namespace tpl {

// Stage-1 selection output. Index lists are sorted ascending and disjoint;
// `all` is their union and has exactly min(R1, N_v) entries.
struct SelectionResult {
    std::vector<std::size_t> informative;
    std::vector<std::size_t> diverse;
    std::vector<std::size_t> all;
    bool clamped = false;  // requested more tokens than exist
};

// Indices of the `count` highest scores, ties broken toward the lower index,
// returned sorted ascending. Requests beyond N clamp with a warning flag.
inline std::vector<std::size_t> select_informative(const std::vector<double>& scores,
                                                   std::size_t count, bool* clamped = nullptr) {
    if (clamped) *clamped = count > scores.size();
    count = std::min(count, scores.size());
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

// Greedy smallest-maximum-cosine-similarity selection: each round adds the
// candidate whose largest cosine similarity to the already-selected set is
// smallest (ties toward the lower index). Returns indices in selection order.
inline std::vector<std::size_t> select_diverse(const Tensor& tokens,
                                               const std::vector<std::size_t>& already,
                                               std::size_t count) {
    detail::require_rank2(tokens, "select_diverse");
    if (already.empty()) throw ContractError("select_diverse: seed set is empty");
    const std::size_t n = tokens.rows(), d = tokens.cols();

    // Unit-normalize once; cosine similarity becomes a plain dot product.
    std::vector<double> unit(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += tokens.at(i, j) * tokens.at(i, j);
        if (sq == 0.0)
            throw ContractError("select_diverse: token " + std::to_string(i) + " has zero norm");
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = tokens.at(i, j) * inv;
    }
    auto cos = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += unit[a * d + j] * unit[b * d + j];
        return s;
    };

    std::vector<bool> taken(n, false);
    std::vector<double> maxsim(n, kNegInf);
    for (std::size_t s : already) {
        if (s >= n) throw ContractError("select_diverse: seed index " + std::to_string(s) + " out of range");
        taken[s] = true;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        for (std::size_t s : already) maxsim[i] = std::max(maxsim[i], cos(i, s));
    }

    std::vector<std::size_t> picked;
    picked.reserve(count);
    while (picked.size() < count) {
        std::size_t best = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) continue;
            if (best == n || maxsim[i] < maxsim[best]) best = i;
        }
        if (best == n) break;  // candidates exhausted
        picked.push_back(best);
        taken[best] = true;
        for (std::size_t i = 0; i < n; ++i)
            if (!taken[i]) maxsim[i] = std::max(maxsim[i], cos(i, best));
    }
    return picked;
}

// Stage-1 pruning: top-(R1 - c_div) tokens by score plus c_div diversity
// tokens, c_div = round-half-up(lambda_div * R1). When the rounding leaves no
// informative seed (lambda_div -> 1) the single best-scoring token seeds the
// diverse phase so the greedy loop has a reference set.
inline SelectionResult stage1_select(const std::vector<double>& scores, const Tensor& tokens,
                                     std::size_t r1, double lambda_div) {
    if (r1 < 1) throw ContractError("stage1_select: R1 must be >= 1");
    if (lambda_div < 0.0 || lambda_div > 1.0)
        throw ContractError("stage1_select: lambda_div must lie in [0, 1]");
    if (scores.size() != tokens.rows())
        throw ShapeError("stage1_select: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(tokens.rows()) + " tokens");
    const std::size_t n = scores.size();

    SelectionResult res;
    if (r1 >= n) {
        res.clamped = r1 > n;
        res.informative.resize(n);
        std::iota(res.informative.begin(), res.informative.end(), 0);
        res.all = res.informative;
        return res;
    }

    std::size_t c_div = static_cast<std::size_t>(std::floor(lambda_div * static_cast<double>(r1) + 0.5));
    std::size_t c_inf = r1 - c_div;
    if (c_inf == 0) {
        c_inf = 1;
        c_div = r1 - 1;
    }
    res.informative = select_informative(scores, c_inf);
    res.diverse = select_diverse(tokens, res.informative, c_div);
    std::sort(res.diverse.begin(), res.diverse.end());
    res.all.reserve(r1);
    std::merge(res.informative.begin(), res.informative.end(), res.diverse.begin(), res.diverse.end(),
               std::back_inserter(res.all));
    return res;
}

}  // namespace tpl
