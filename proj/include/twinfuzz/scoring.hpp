#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twinfuzz/coverage.hpp"

namespace twinfuzz::scoring {

struct ScoringParams {
    double alpha = 0.1;    // weight for re-covered points
    double beta_w = 1.0;   // base weight for newly covered points
    double factor = 1e-5;  // frequency penalty slope

    bool valid() const { return alpha > 0 && alpha < beta_w && factor >= 0; }
};

// Scores are kept in integer nanounits so winner/loser selection is exact and
// reproducible across platforms.
constexpr int64_t kNanoUnit = 1'000'000'000;
int64_t to_nanos(double v);

// Per-point count of prior test cases (other than the current one) that
// covered the point. Single-writer: evaluations score against a snapshot,
// commits are applied serially at iteration end.
class FrequencyMap {
public:
    explicit FrequencyMap(uint32_t universe = cov::CoverageModel::instance().size())
        : counts_(universe, 0) {}

    uint32_t count(uint32_t point_id) const { return counts_[point_id]; }
    uint32_t universe() const { return static_cast<uint32_t>(counts_.size()); }

    // f(x) += 1 for every covered point; called once per completed test case.
    void commit_test_case(const cov::CoverageSet& coverage);

    std::string to_csv() const;  // sorted (id,count) rows
    static FrequencyMap from_csv(const std::string& text, uint32_t universe);

private:
    std::vector<uint32_t> counts_;
};

// max(beta - f(x) * factor, alpha)
double adjusted_beta(uint32_t point_id, const FrequencyMap& freq, const ScoringParams& p);
int64_t adjusted_beta_nanos(uint32_t freq_count, const ScoringParams& p);

struct TransitionScore {
    int64_t nanos = 0;
    cov::CoverageSet new_points;   // G(b_i,i+1): coverage of the concatenation
    cov::CoverageSet prior_points; // H_{b_i}

    double value() const { return static_cast<double>(nanos) / kNanoUnit; }
};

// Each x in cov_concat contributes alpha if x was already revealed by the
// prefix, else the frequency-adjusted beta.
TransitionScore score_transition(const cov::CoverageSet& prefix_coverage,
                                 const cov::CoverageSet& cov_concat,
                                 const FrequencyMap& freq, const ScoringParams& p);

}  // namespace twinfuzz::scoring
