#include "twinfuzz/scoring.hpp"

#include <cmath>
#include <sstream>

namespace twinfuzz::scoring {

int64_t to_nanos(double v) { return std::llround(v * kNanoUnit); }

void FrequencyMap::commit_test_case(const cov::CoverageSet& coverage) {
    for (uint32_t id : coverage.ids()) ++counts_[id];
}

std::string FrequencyMap::to_csv() const {
    std::ostringstream out;
    out << "point_id,count\n";
    for (uint32_t id = 0; id < counts_.size(); ++id)
        if (counts_[id]) out << id << "," << counts_[id] << "\n";
    return out.str();
}

FrequencyMap FrequencyMap::from_csv(const std::string& text, uint32_t universe) {
    FrequencyMap fm(universe);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        const uint32_t id = static_cast<uint32_t>(std::stoul(line.substr(0, comma)));
        fm.counts_[id] = static_cast<uint32_t>(std::stoul(line.substr(comma + 1)));
    }
    return fm;
}

int64_t adjusted_beta_nanos(uint32_t freq_count, const ScoringParams& p) {
    const int64_t alpha = to_nanos(p.alpha);
    const int64_t beta = to_nanos(p.beta_w);
    const int64_t penalty = static_cast<int64_t>(freq_count) * to_nanos(p.factor);
    return std::max(beta - penalty, alpha);
}

double adjusted_beta(uint32_t point_id, const FrequencyMap& freq, const ScoringParams& p) {
    return static_cast<double>(adjusted_beta_nanos(freq.count(point_id), p)) / kNanoUnit;
}

TransitionScore score_transition(const cov::CoverageSet& prefix_coverage,
                                 const cov::CoverageSet& cov_concat,
                                 const FrequencyMap& freq, const ScoringParams& p) {
    TransitionScore score;
    score.new_points = cov_concat;
    score.prior_points = prefix_coverage;
    const int64_t alpha = to_nanos(p.alpha);
    for (uint32_t id : cov_concat.ids()) {
        score.nanos += prefix_coverage.contains(id)
                           ? alpha
                           : adjusted_beta_nanos(freq.count(id), p);
    }
    return score;
}

}  // namespace twinfuzz::scoring
