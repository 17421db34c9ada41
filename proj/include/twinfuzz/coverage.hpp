#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twinfuzz/isa.hpp"

namespace twinfuzz::cov {

enum class PointKind : uint8_t { Line, CondTrue, CondFalse, FsmEdge };

struct CoveragePoint {
    uint32_t id;
    PointKind kind;
    std::string site;
};

// Interpreter-level analog of RTL line/condition/FSM instrumentation. The
// table is enumerated once in a fixed order, so ids are dense and stable for
// a given build.
class CoverageModel {
public:
    static const CoverageModel& instance();

    const std::vector<CoveragePoint>& points() const { return points_; }
    uint32_t size() const { return static_cast<uint32_t>(points_.size()); }
    uint64_t table_hash() const;

    // Site id computations used by the interpreter. Privilege index is
    // U=0, S=1, M=2.
    uint32_t exec(isa::Mnemonic m, unsigned priv_idx) const;
    uint32_t alu_writeback(isa::Mnemonic m) const;
    uint32_t load_action(isa::Mnemonic m, unsigned action) const;   // 0 addr, 1 access, 2 wb
    uint32_t store_action(isa::Mnemonic m, unsigned action) const;  // 0 addr, 1 access
    uint32_t jump_action(isa::Mnemonic m, unsigned action) const;   // 0 link, 1 redirect
    uint32_t csrop_action(isa::Mnemonic m, unsigned action) const;  // 0 read, 1 write, 2 wb
    uint32_t system_effect(isa::Mnemonic m) const;
    uint32_t csr_read_site(isa::Csr c) const;
    uint32_t csr_write_site(isa::Csr c) const;
    uint32_t trap_site(unsigned which) const;  // 0 entry_m, 1 entry_s, 2 ret_m, 3 ret_s
    uint32_t mem_width(bool is_write, uint8_t width) const;
    uint32_t byteswap(bool is_store) const;

    // Condition predicates; TRUE point when taken, FALSE point otherwise.
    enum Pred : uint32_t {
        kPredCsrPriv = 0,                      // + csr index (18)
        kPredCsrWriteTrim = kPredCsrPriv + 18, // + csr index (18)
        kPredEndianBigM = kPredCsrWriteTrim + 18,
        kPredEndianBigS,
        kPredDelegBase,                        // + cause slot {2,5,7,8,9} (5)
        kPredMipMaskBase = kPredDelegBase + 5, // + bit slot {1,5,9} (3)
        kPredPmpActive = kPredMipMaskBase + 3,
        kPredPmpMatch,
        kPredPmpGrant,
        kPredBranchBase,                       // + branch index (6)
        kPredTvecVectoredM = kPredBranchBase + 6,
        kPredTvecVectoredS,
        kPredTvmGate,
        kPredTwGate,
        kPredTsrGate,
        kPredMemMisaligned,
        kPredMemInWindow,
        kPredRdIsX0,
        kPredCount
    };
    uint32_t cond(uint32_t pred, bool taken) const;

    // FSM edges over (privilege x {trap-entry, trap-return}).
    uint32_t fsm_edge(unsigned from_idx, unsigned to_idx, unsigned event) const;  // event: 0 trap, 1 mret, 2 sret

    static unsigned deleg_slot(uint8_t cause);    // cause -> 0..4, or UINT_MAX
    static unsigned mip_bit_slot(unsigned bit);   // bit -> 0..2, or UINT_MAX

private:
    CoverageModel();
    std::vector<CoveragePoint> points_;
    uint32_t exec_base_ = 0, alu_base_ = 0, load_base_ = 0, store_base_ = 0;
    uint32_t jump_base_ = 0, csrop_base_ = 0, sys_base_ = 0, csr_rw_base_ = 0;
    uint32_t trap_base_ = 0, memw_base_ = 0, swap_base_ = 0;
    uint32_t cond_base_ = 0, fsm_base_ = 0;
};

// Fixed-universe bitset with exact set algebra.
class CoverageSet {
public:
    CoverageSet() : CoverageSet(CoverageModel::instance().size()) {}
    explicit CoverageSet(uint32_t universe)
        : universe_(universe), bits_((universe + 63) / 64, 0) {}

    void add(uint32_t id) { bits_[id >> 6] |= uint64_t{1} << (id & 63); }
    bool contains(uint32_t id) const {
        return (bits_[id >> 6] >> (id & 63)) & 1;
    }
    uint32_t universe() const { return universe_; }

    size_t count() const;
    CoverageSet& operator|=(const CoverageSet& other);
    // Points in this set absent from other.
    CoverageSet minus(const CoverageSet& other) const;
    bool subset_of(const CoverageSet& other) const;
    bool operator==(const CoverageSet& other) const {
        return universe_ == other.universe_ && bits_ == other.bits_;
    }

    std::vector<uint32_t> ids() const;  // sorted
    std::string to_json() const;        // sorted id array
    static CoverageSet from_json(const std::string& text, uint32_t universe);

private:
    uint32_t universe_;
    std::vector<uint64_t> bits_;
};

class CoverageSink {
public:
    virtual void hit(uint32_t point_id) = 0;

protected:
    ~CoverageSink() = default;
};

class SetSink final : public CoverageSink {
public:
    explicit SetSink(CoverageSet& set) : set_(set) {}
    void hit(uint32_t point_id) override { set_.add(point_id); }

private:
    CoverageSet& set_;
};

}  // namespace twinfuzz::cov
