#include "twinfuzz/dut.hpp"

namespace twinfuzz::dut {

DutRun dut_run_block(arch::ArchState state, const isa::Program& prog, uint64_t fuel,
                     const arch::BugConfig& bugs, const arch::ArchConfig& cfg) {
    DutRun run;
    cov::SetSink sink(run.coverage);
    run.result = arch::run_block(std::move(state), prog, fuel, cfg, bugs, &sink);
    return run;
}

const std::vector<cov::CoveragePoint>& coverage_universe() {
    return cov::CoverageModel::instance().points();
}

uint32_t coverage_universe_size() { return cov::CoverageModel::instance().size(); }

uint64_t coverage_table_hash() { return cov::CoverageModel::instance().table_hash(); }

}  // namespace twinfuzz::dut
