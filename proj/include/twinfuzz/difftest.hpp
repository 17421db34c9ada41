#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "twinfuzz/arch.hpp"

namespace twinfuzz::diff {

enum class DivergenceKind : uint8_t { RegValue, MemAddr, MemData, Pc, Exception, Csr };
std::string_view divergence_kind_name(DivergenceKind k);
std::optional<DivergenceKind> divergence_kind_from_name(std::string_view name);

enum class MnemonicClass : uint8_t { Alu, Load, Store, Branch, Jump, CsrOp, System, Fence, Unknown };
std::string_view mnemonic_class_name(MnemonicClass c);
MnemonicClass mnemonic_class_of(uint32_t insn_word);

// Value-free environmental context of a divergence; recurrences with
// different data still match.
struct Signature {
    arch::Privilege privilege = arch::Privilege::M;
    MnemonicClass mclass = MnemonicClass::Unknown;
    DivergenceKind kind = DivergenceKind::RegValue;
    std::optional<isa::Csr> csr;
    std::optional<uint8_t> exc_cause;

    bool operator==(const Signature&) const = default;
    std::string key() const;  // stable string form, also the filter map key
};

struct Divergence {
    uint32_t seq = 0;
    DivergenceKind kind = DivergenceKind::RegValue;
    uint64_t grm_value = 0;
    uint64_t dut_value = 0;
    Signature signature;
};

struct MismatchRecord {
    std::string testcase_id;
    Divergence divergence;
    // replay payload
    std::string program_text;
    uint64_t register_seed = 0;
    uint64_t program_hash = 0;
    uint32_t skip_prefix = 0;

    std::string to_jsonl() const;
    static std::optional<MismatchRecord> from_json(const std::string& line);
};

uint64_t program_hash(std::string_view program_text, uint64_t register_seed);

struct TraceView {
    std::span<const arch::TraceEntry> trace;
    uint64_t program_hash = 0;
};

class TraceMismatchError : public std::exception {
public:
    const char* what() const noexcept override {
        return "compare_traces: traces come from different programs";
    }
};

// Entry-by-entry comparison after skipping the initialization prefix. Returns
// the first field-level divergence; a length mismatch after alignment is a
// divergence at the shorter trace's end. Throws TraceMismatchError if the
// program hashes differ.
std::optional<Divergence> compare_traces(const TraceView& grm, const TraceView& dut,
                                         uint32_t skip_prefix);

enum class Classification : uint8_t { ConfirmedBug, FalsePositive };
std::string_view classification_name(Classification c);

struct FilterOutcome {
    bool known = false;
    Classification classification = Classification::ConfirmedBug;  // valid when known
};

class TriageConflictError : public std::exception {
public:
    const char* what() const noexcept override {
        return "triage: conflicting reclassification without override";
    }
};

class MismatchFilter {
public:
    // KNOWN => stored classification returned, per-signature counter bumped.
    FilterOutcome filter_mismatch(const Signature& sig);

    // Idempotent for an identical (signature, classification); conflicting
    // reclassification throws unless override is set.
    void triage_record(const Signature& sig, Classification c, bool override_existing = false);

    bool knows(const Signature& sig) const;
    size_t size() const { return entries_.size(); }
    uint64_t recurrences(const Signature& sig) const;

    std::string to_json() const;  // human-editable persistence
    static MismatchFilter from_json(const std::string& text);

private:
    struct Entry {
        Signature signature;
        Classification classification;
        uint64_t count = 0;
    };
    std::map<std::string, Entry> entries_;  // keyed by Signature::key()
};

}  // namespace twinfuzz::diff
