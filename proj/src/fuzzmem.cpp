#include "twinfuzz/fuzzmem.hpp"

#include <cmath>

namespace twinfuzz::fuzzmem {

void FuzzMemory::update(MemoryEntry entry) {
    if (!entries_.empty() && entry.iteration <= entries_.back().iteration)
        throw MemoryError("fuzzing memory: out-of-order iteration " +
                          std::to_string(entry.iteration));
    if (entry.blocks.empty())
        throw MemoryError("fuzzing memory: entry without blocks");
    entries_.push_back(std::move(entry));
    if (entries_.size() > window_) entries_.pop_front();
}

uint32_t FuzzMemory::newest_iteration() const {
    if (entries_.empty()) throw MemoryError("fuzzing memory: empty");
    return entries_.back().iteration;
}

template <typename Picker>
auto FuzzMemory::weighted_entry(Xoshiro256pp& rng, Picker has_payload) const
    -> const MemoryEntry* {
    const uint32_t newest = entries_.back().iteration;
    std::vector<double> weights;
    std::vector<const MemoryEntry*> eligible;
    for (const auto& e : entries_) {
        if (!has_payload(e)) continue;
        const uint32_t age = newest - e.iteration;
        eligible.push_back(&e);
        weights.push_back(std::pow(lambda_, static_cast<double>(age)));
    }
    if (eligible.empty()) return nullptr;
    return eligible[rng.weighted(weights)];
}

const StoredBlock& FuzzMemory::sample_block(Xoshiro256pp& rng) const {
    if (entries_.empty()) throw MemoryError("fuzzing memory: empty");
    const MemoryEntry* entry =
        weighted_entry(rng, [](const MemoryEntry& e) { return !e.blocks.empty(); });
    if (!entry) throw MemoryError("fuzzing memory: no blocks stored");
    return entry->blocks[rng.below(entry->blocks.size())];
}

std::vector<const StoredBlock*> FuzzMemory::sample_blocks(size_t k, Xoshiro256pp& rng) const {
    std::vector<const StoredBlock*> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) out.push_back(&sample_block(rng));
    return out;
}

bool FuzzMemory::has_pairs() const {
    for (const auto& e : entries_)
        if (!e.pairs.empty()) return true;
    return false;
}

const policy::PreferencePair& FuzzMemory::sample_pair(Xoshiro256pp& rng) const {
    if (entries_.empty()) throw MemoryError("fuzzing memory: empty");
    const MemoryEntry* entry =
        weighted_entry(rng, [](const MemoryEntry& e) { return !e.pairs.empty(); });
    if (!entry) throw MemoryError("fuzzing memory: no pairs stored");
    return entry->pairs[rng.below(entry->pairs.size())];
}

std::vector<const policy::PreferencePair*> FuzzMemory::sample_pairs(size_t k,
                                                                    Xoshiro256pp& rng) const {
    std::vector<const policy::PreferencePair*> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) out.push_back(&sample_pair(rng));
    return out;
}

}  // namespace twinfuzz::fuzzmem
