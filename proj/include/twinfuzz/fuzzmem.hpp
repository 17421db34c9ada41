#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "twinfuzz/coverage.hpp"
#include "twinfuzz/isa.hpp"
#include "twinfuzz/policy.hpp"
#include "twinfuzz/rng.hpp"

namespace twinfuzz::fuzzmem {

// An extendable prefix: the full lineage concatenation so far, plus the
// cached evaluation context the engine needs to extend it.
struct StoredBlock {
    std::vector<isa::TokenId> tokens;        // lineage token form, <eoi> after each instruction
    std::vector<isa::Instruction> program;   // parsed logical instructions
    uint32_t depth = 0;                      // blocks concatenated so far
    uint64_t register_seed = 0;              // shared by GRM/DUT runs of this lineage
    uint64_t root_id = 0;
    cov::CoverageSet coverage;               // DUT coverage of the prefix run (DUT stage)
};

struct MemoryEntry {
    uint32_t iteration = 0;
    std::vector<StoredBlock> blocks;
    std::vector<policy::PreferencePair> pairs;
};

class MemoryError : public std::exception {
public:
    explicit MemoryError(std::string msg) : msg_(std::move(msg)) {}
    const char* what() const noexcept override { return msg_.c_str(); }

private:
    std::string msg_;
};

// Rolling FIFO window of per-iteration exemplars with exponential recency
// weighting: an entry whose iteration is `a` behind the newest is drawn with
// weight recency_lambda^a; blocks (or pairs) are uniform within an entry.
class FuzzMemory {
public:
    FuzzMemory(uint32_t window, double recency_lambda)
        : window_(window), lambda_(recency_lambda) {}

    void update(MemoryEntry entry);  // throws MemoryError on out-of-order iteration

    bool empty() const { return entries_.empty(); }
    size_t size() const { return entries_.size(); }
    const std::deque<MemoryEntry>& entries() const { return entries_; }
    uint32_t newest_iteration() const;
    double recency_lambda() const { return lambda_; }
    uint32_t window() const { return window_; }
    void clear() { entries_.clear(); }

    const StoredBlock& sample_block(Xoshiro256pp& rng) const;  // throws when empty
    std::vector<const StoredBlock*> sample_blocks(size_t k, Xoshiro256pp& rng) const;

    bool has_pairs() const;
    const policy::PreferencePair& sample_pair(Xoshiro256pp& rng) const;  // throws when none
    std::vector<const policy::PreferencePair*> sample_pairs(size_t k, Xoshiro256pp& rng) const;

private:
    template <typename Picker>
    auto weighted_entry(Xoshiro256pp& rng, Picker has_payload) const -> const MemoryEntry*;

    uint32_t window_;
    double lambda_;
    std::deque<MemoryEntry> entries_;
};

}  // namespace twinfuzz::fuzzmem
