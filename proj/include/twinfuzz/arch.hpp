#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "twinfuzz/coverage.hpp"
#include "twinfuzz/isa.hpp"

namespace twinfuzz::arch {

enum class Privilege : uint8_t { U = 0, S = 1, M = 3 };

constexpr unsigned priv_index(Privilege p) {
    return p == Privilege::M ? 2 : static_cast<unsigned>(p);
}
std::string_view privilege_name(Privilege p);

// mstatus field positions
namespace mstatus {
constexpr uint64_t kSie = 1ull << 1;
constexpr uint64_t kMie = 1ull << 3;
constexpr uint64_t kSpie = 1ull << 5;
constexpr uint64_t kMpie = 1ull << 7;
constexpr uint64_t kSpp = 1ull << 8;
constexpr unsigned kMppShift = 11;
constexpr uint64_t kMpp = 3ull << kMppShift;
constexpr uint64_t kTvm = 1ull << 20;
constexpr uint64_t kTw = 1ull << 21;
constexpr uint64_t kTsr = 1ull << 22;
constexpr uint64_t kSbe = 1ull << 36;
constexpr uint64_t kMbe = 1ull << 37;
}  // namespace mstatus

// Exception causes used by the subset.
namespace cause {
constexpr uint8_t kIllegalInstruction = 2;
constexpr uint8_t kLoadAccessFault = 5;
constexpr uint8_t kStoreAccessFault = 7;
constexpr uint8_t kEcallFromU = 8;
constexpr uint8_t kEcallFromS = 9;
constexpr uint8_t kEcallFromM = 11;
}  // namespace cause

struct ArchConfig {
    uint64_t prog_base = 0x80000000;
    uint64_t mem_size = 1ull << 20;  // data window is [0, mem_size)
    // reset() scatters pointer-flavored register values across this region
    uint64_t reset_pointer_region = 1024;
    // mepc/sepc reset to one of this many word slots above prog_base
    uint32_t reset_epc_slots = 32;
    // bytes of data memory scattered with seeded values at reset
    uint64_t reset_memory_bytes = 1024;
};

// Sparse byte-addressable data memory.
class Memory {
public:
    uint8_t read_byte(uint64_t addr) const;
    void write_byte(uint64_t addr, uint8_t value);

private:
    static constexpr uint64_t kPageBits = 12;
    std::map<uint64_t, std::array<uint8_t, 1 << kPageBits>> pages_;
};

struct ArchState {
    uint64_t pc = 0;
    std::array<uint64_t, 32> xregs{};
    Privilege privilege = Privilege::M;
    std::array<uint64_t, isa::kCsrCount> csrs{};
    Memory memory;

    uint64_t csr(isa::Csr c) const { return csrs[static_cast<size_t>(c)]; }
    void set_csr(isa::Csr c, uint64_t v) { csrs[static_cast<size_t>(c)] = v; }
};

struct RegWrite {
    uint8_t index;
    uint64_t value;
    bool operator==(const RegWrite&) const = default;
};

struct MemAccess {
    uint64_t addr;
    uint8_t width;
    uint64_t value;  // architectural value (store source / load result)
    bool is_write;
    bool operator==(const MemAccess&) const = default;
};

struct Exception {
    uint8_t cause;
    uint64_t tval;  // value written to mtval/stval
    bool operator==(const Exception&) const = default;
};

struct TraceEntry {
    uint32_t seq = 0;
    uint64_t pc = 0;
    uint32_t insn = 0;
    Privilege privilege = Privilege::M;  // privilege the instruction executed at
    std::optional<RegWrite> reg;
    std::optional<MemAccess> mem;
    std::optional<Exception> exc;
    bool operator==(const TraceEntry&) const = default;
};

std::string trace_entry_json(const TraceEntry& e);
std::string trace_jsonl(std::span<const TraceEntry> trace);

enum class Outcome : uint8_t { Completed, Exception, Terminated, FuelExhausted };
std::string_view outcome_name(Outcome o);

struct ExecResult {
    std::vector<TraceEntry> trace;
    Outcome outcome = Outcome::Completed;
    uint8_t exception_cause = 0;
    ArchState final_state;
};

// Bug-injection layer configuration. Empty config leaves the interpreter
// exactly ISA-faithful (refmodel semantics).
struct BugConfig {
    bool v1_mbe_ignored = false;
    bool v2_sbe_ignored = false;
    bool v3_delegated_sti_visible = false;
    bool v4_stval_one = false;
    bool v5_mbe_sbe_writable = false;

    bool any() const {
        return v1_mbe_ignored || v2_sbe_ignored || v3_delegated_sti_visible ||
               v4_stval_one || v5_mbe_sbe_writable;
    }
    static std::optional<BugConfig> from_names(std::span<const std::string> names);
    std::vector<std::string> names() const;
};

// x1..x31 seeded (mix of small data pointers and raw 64-bit values); CSRs at
// ISA reset values, with the ISA-unspecified mepc/sepc pointed at random word
// slots near the program base; privilege M; pc at the program base.
ArchState reset(uint64_t seed, const ArchConfig& cfg = {});

// Executes one instruction word. Mutates state, returns the retirement
// record. Traps are performed (CSR/privilege/pc updates) and reported in the
// entry, never thrown.
TraceEntry step_word(ArchState& state, uint32_t word, uint32_t seq,
                     const ArchConfig& cfg, const BugConfig& bugs = {},
                     cov::CoverageSink* sink = nullptr);

// Pure single-instruction form.
std::pair<ArchState, TraceEntry> step(const ArchState& state, const isa::Instruction& inst,
                                      const ArchConfig& cfg = {});

// Runs an assembled program placed at cfg.prog_base. Control flow is followed
// while targets stay inside [base, end]; reaching end is Completed, leaving
// the window is Terminated, the first trap is Exception.
ExecResult run_block(ArchState state, const isa::Program& prog, uint64_t fuel,
                     const ArchConfig& cfg = {}, const BugConfig& bugs = {},
                     cov::CoverageSink* sink = nullptr);

enum class DeadReason : uint8_t { None, Syntax, Exception, Terminated, Fuel, Underrun };
std::string_view dead_reason_name(DeadReason r);

struct Classification {
    bool valid = false;
    DeadReason reason = DeadReason::None;
};

// A block is extendable iff it parsed, completed without trap/terminator/fuel
// exhaustion, and (branch allowance) retired at least min_retire_fraction of
// its words before completing.
Classification classify_block(const ExecResult& result, bool syntax_ok,
                              size_t total_words, double min_retire_fraction = 0.5);

}  // namespace twinfuzz::arch
