#pragma once

#include "twinfuzz/arch.hpp"
#include "twinfuzz/coverage.hpp"

namespace twinfuzz::dut {

// The device under test: refmodel semantics wrapped with deterministic
// coverage instrumentation and the bug-injection layer. With an empty
// BugConfig the trace is bit-identical to the reference model's.

struct DutRun {
    arch::ExecResult result;
    cov::CoverageSet coverage;
};

DutRun dut_run_block(arch::ArchState state, const isa::Program& prog, uint64_t fuel,
                     const arch::BugConfig& bugs, const arch::ArchConfig& cfg = {});

const std::vector<cov::CoveragePoint>& coverage_universe();
uint32_t coverage_universe_size();
uint64_t coverage_table_hash();

}  // namespace twinfuzz::dut
