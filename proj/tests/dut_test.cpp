#include <doctest.h>

#include <fstream>
#include <sstream>

#include "twinfuzz/corpus.hpp"
#include "twinfuzz/difftest.hpp"
#include "twinfuzz/dut.hpp"

using namespace twinfuzz;
using namespace twinfuzz::arch;
using isa::Csr;

namespace {

const ArchConfig kCfg{};

std::string read_witness(const char* name) {
    std::ifstream in(std::string(TWINFUZZ_TESTDATA_DIR) + "/witnesses/" + name);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct WitnessRun {
    ExecResult grm;
    dut::DutRun dut;
    std::optional<diff::Divergence> divergence;
};

WitnessRun run_witness(const char* name, const BugConfig& bugs, uint64_t seed = 1) {
    const std::string text = read_witness(name);
    const auto parsed = isa::parse_program(text);
    REQUIRE(parsed.ok());
    const auto prog = isa::assemble(parsed.instructions);
    WitnessRun out;
    out.grm = run_block(reset(seed, kCfg), prog, 512, kCfg);
    out.dut = dut::dut_run_block(reset(seed, kCfg), prog, 512, bugs, kCfg);
    const uint64_t hash = diff::program_hash(text, seed);
    out.divergence = diff::compare_traces({out.grm.trace, hash},
                                          {out.dut.result.trace, hash}, 0);
    return out;
}

}  // namespace

TEST_CASE("coverage universe") {
    const auto& points = dut::coverage_universe();
    SUBCASE("size in the declared range, ids dense") {
        CHECK(points.size() >= 400);
        CHECK(points.size() <= 800);
        for (uint32_t i = 0; i < points.size(); ++i) CHECK(points[i].id == i);
    }
    SUBCASE("every COND predicate contributes a TRUE and a FALSE point") {
        size_t cond_true = 0, cond_false = 0;
        for (const auto& p : points) {
            if (p.kind == cov::PointKind::CondTrue) ++cond_true;
            if (p.kind == cov::PointKind::CondFalse) ++cond_false;
        }
        CHECK(cond_true == cond_false);
        CHECK(cond_true == cov::CoverageModel::kPredCount);
    }
    SUBCASE("FSM edges include M->S via mret") {
        bool found = false;
        for (const auto& p : points)
            if (p.kind == cov::PointKind::FsmEdge && p.site == "fsm/M->S/mret") found = true;
        CHECK(found);
    }
    SUBCASE("table hash stable") {
        CHECK(dut::coverage_table_hash() == cov::CoverageModel::instance().table_hash());
        CHECK(dut::coverage_table_hash() != 0);
    }
}

TEST_CASE("clean DUT equals the reference model") {
    // empty BugConfig: identical traces over randomized programs
    const auto vocab = isa::Vocabulary::build(isa::SubsetConfig::standard());
    corpus::InstructionSampler sampler(vocab);
    Xoshiro256pp rng(0xC1EA);
    int divergences = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        const auto program = sampler.random_program(10, 0.3, rng);
        const auto prog = isa::assemble(program);
        const uint64_t seed = rng.next();
        const auto grm = run_block(reset(seed, kCfg), prog, 256, kCfg);
        const auto dut = dut::dut_run_block(reset(seed, kCfg), prog, 256, BugConfig{}, kCfg);
        if (trace_jsonl(grm.trace) != trace_jsonl(dut.result.trace)) ++divergences;
    }
    CHECK(divergences == 0);
}

TEST_CASE("coverage determinism and monotonicity") {
    const auto vocab = isa::Vocabulary::build(isa::SubsetConfig::standard());
    corpus::InstructionSampler sampler(vocab);
    Xoshiro256pp rng(0xC07E);
    for (int trial = 0; trial < 200; ++trial) {
        const auto program = sampler.random_program(8, 0.3, rng);
        const auto full = isa::assemble(program);
        const uint64_t seed = rng.next();

        const auto a = dut::dut_run_block(reset(seed, kCfg), full, 256, BugConfig{}, kCfg);
        const auto b = dut::dut_run_block(reset(seed, kCfg), full, 256, BugConfig{}, kCfg);
        CHECK(a.coverage == b.coverage);

        // prefix run covers a subset of the full run
        std::vector<isa::Instruction> head(program.begin(), program.begin() + 4);
        const auto prefix =
            dut::dut_run_block(reset(seed, kCfg), isa::assemble(head), 256, BugConfig{}, kCfg);
        CHECK(prefix.coverage.subset_of(a.coverage));
    }
}

TEST_CASE("witness: V1 MBE ignored") {
    BugConfig bugs;
    bugs.v1_mbe_ignored = true;
    const auto run = run_witness("v1_mbe.asm", bugs);
    REQUIRE(run.divergence.has_value());
    // the documented behavior class: expected 0x12, observed 0x78 at the lb
    CHECK(run.divergence->kind == diff::DivergenceKind::RegValue);
    CHECK(run.divergence->grm_value == 0x12);
    CHECK(run.divergence->dut_value == 0x78);
    CHECK(run.divergence->signature.privilege == Privilege::M);
    CHECK(run.divergence->signature.mclass == diff::MnemonicClass::Load);
}

TEST_CASE("witness: V2 SBE ignored") {
    BugConfig bugs;
    bugs.v2_sbe_ignored = true;
    const auto run = run_witness("v2_sbe.asm", bugs);
    REQUIRE(run.divergence.has_value());
    CHECK(run.divergence->kind == diff::DivergenceKind::RegValue);
    CHECK(run.divergence->grm_value == 0x12);
    CHECK(run.divergence->dut_value == 0x78);
    CHECK(run.divergence->signature.privilege == Privilege::S);
    CHECK(run.divergence->signature.mclass == diff::MnemonicClass::Load);
}

TEST_CASE("witness: V3 delegated STI visible") {
    BugConfig bugs;
    bugs.v3_delegated_sti_visible = true;
    const auto run = run_witness("v3_sti.asm", bugs);
    REQUIRE(run.divergence.has_value());
    CHECK(run.divergence->kind == diff::DivergenceKind::Csr);
    CHECK((run.divergence->grm_value & 32) == 0);
    CHECK((run.divergence->dut_value & 32) == 32);
    CHECK(run.divergence->signature.privilege == Privilege::M);
    REQUIRE(run.divergence->signature.csr.has_value());
    CHECK(*run.divergence->signature.csr == Csr::Mip);
}

TEST_CASE("witness: V4 stval set to 0x1") {
    BugConfig bugs;
    bugs.v4_stval_one = true;
    const auto run = run_witness("v4_stval.asm", bugs);
    REQUIRE(run.divergence.has_value());
    CHECK(run.divergence->kind == diff::DivergenceKind::Exception);
    CHECK(run.divergence->grm_value == 0x62000073);  // the faulting instruction word
    CHECK(run.divergence->dut_value == 0x1);
    CHECK(run.divergence->signature.privilege == Privilege::S);
    REQUIRE(run.divergence->signature.exc_cause.has_value());
    CHECK(*run.divergence->signature.exc_cause == cause::kIllegalInstruction);
    // both sides trapped with the same cause; only the written tval differs
    CHECK(run.grm.outcome == Outcome::Exception);
    CHECK(run.dut.result.outcome == Outcome::Exception);
    CHECK(run.grm.final_state.csr(Csr::Stval) == 0x62000073);
    CHECK(run.dut.result.final_state.csr(Csr::Stval) == 0x1);
}

TEST_CASE("witness: V5 endianness bits writable through sstatus") {
    BugConfig bugs;
    bugs.v5_mbe_sbe_writable = true;
    const auto run = run_witness("v5_sstatus.asm", bugs);
    REQUIRE(run.divergence.has_value());
    CHECK(run.divergence->kind == diff::DivergenceKind::Csr);
    CHECK((run.divergence->grm_value & mstatus::kMbe) == 0);
    CHECK((run.divergence->dut_value & mstatus::kMbe) == mstatus::kMbe);
    CHECK(run.divergence->signature.privilege == Privilege::S);
    REQUIRE(run.divergence->signature.csr.has_value());
    CHECK(*run.divergence->signature.csr == Csr::Sstatus);
    // the write really lands in the DUT's mstatus and stays masked in the GRM
    CHECK((run.dut.result.final_state.csr(Csr::Mstatus) & mstatus::kMbe) != 0);
    CHECK((run.grm.final_state.csr(Csr::Mstatus) & mstatus::kMbe) == 0);
}

TEST_CASE("all five witnesses have distinct signatures") {
    const std::pair<const char*, BugConfig> cases[] = {
        {"v1_mbe.asm", {.v1_mbe_ignored = true}},
        {"v2_sbe.asm", {.v2_sbe_ignored = true}},
        {"v3_sti.asm", {.v3_delegated_sti_visible = true}},
        {"v4_stval.asm", {.v4_stval_one = true}},
        {"v5_sstatus.asm", {.v5_mbe_sbe_writable = true}},
    };
    std::vector<std::string> keys;
    for (const auto& [name, bugs] : cases) {
        const auto run = run_witness(name, bugs);
        REQUIRE(run.divergence.has_value());
        keys.push_back(run.divergence->signature.key());
    }
    for (size_t i = 0; i < keys.size(); ++i)
        for (size_t j = i + 1; j < keys.size(); ++j) CHECK(keys[i] != keys[j]);
}

TEST_CASE("witnesses stay quiet on a clean DUT") {
    for (const char* name :
         {"v1_mbe.asm", "v2_sbe.asm", "v3_sti.asm", "v4_stval.asm", "v5_sstatus.asm"}) {
        CAPTURE(name);
        const auto run = run_witness(name, BugConfig{});
        CHECK(!run.divergence.has_value());
    }
}

TEST_CASE("witnesses fire under the all-bugs config") {
    BugConfig all;
    all.v1_mbe_ignored = all.v2_sbe_ignored = all.v3_delegated_sti_visible = true;
    all.v4_stval_one = all.v5_mbe_sbe_writable = true;
    for (const char* name :
         {"v1_mbe.asm", "v2_sbe.asm", "v3_sti.asm", "v4_stval.asm", "v5_sstatus.asm"}) {
        CAPTURE(name);
        const auto run = run_witness(name, all);
        CHECK(run.divergence.has_value());
    }
}
