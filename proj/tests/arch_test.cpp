#include <doctest.h>

#include "twinfuzz/arch.hpp"
#include "twinfuzz/corpus.hpp"
#include "twinfuzz/rng.hpp"

using namespace twinfuzz;
using namespace twinfuzz::arch;
using isa::Csr;
using isa::Mnemonic;

namespace {

const ArchConfig kCfg{};

isa::Program assemble_text(const char* text) {
    const auto parsed = isa::parse_program(text);
    REQUIRE(parsed.ok());
    return isa::assemble(parsed.instructions);
}

ExecResult run_text(const char* text, uint64_t seed, uint64_t fuel = 256) {
    return run_block(reset(seed, kCfg), assemble_text(text), fuel, kCfg);
}

}  // namespace

TEST_CASE("reset") {
    SUBCASE("deterministic per seed") {
        const ArchState a = reset(42, kCfg);
        const ArchState b = reset(42, kCfg);
        CHECK(a.pc == b.pc);
        CHECK(a.xregs == b.xregs);
        CHECK(a.csrs == b.csrs);
        const ArchState c = reset(43, kCfg);
        CHECK(a.xregs != c.xregs);
    }
    SUBCASE("x0 hardwired, M mode, pc at base") {
        const ArchState st = reset(7, kCfg);
        CHECK(st.xregs[0] == 0);
        CHECK(st.privilege == Privilege::M);
        CHECK(st.pc == kCfg.prog_base);
        CHECK(((st.csr(Csr::Mstatus) >> mstatus::kMppShift) & 3) == 3);
    }
}

TEST_CASE("step basics") {
    ArchState st = reset(1, kCfg);

    SUBCASE("addi writes rd and advances pc") {
        auto [next, entry] = step(st, {Mnemonic::Addi, 1, 0, 0, Csr::Mstatus, 5}, kCfg);
        CHECK(next.xregs[1] == 5);
        CHECK(next.pc == st.pc + 4);
        REQUIRE(entry.reg.has_value());
        CHECK(entry.reg->index == 1);
        CHECK(entry.reg->value == 5);
        CHECK(!entry.exc);
    }
    SUBCASE("writes to x0 are discarded") {
        auto [next, entry] = step(st, {Mnemonic::Addi, 0, 0, 0, Csr::Mstatus, 5}, kCfg);
        CHECK(next.xregs[0] == 0);
        CHECK(!entry.reg);
    }
    SUBCASE("undecodable word traps as illegal instruction") {
        ArchState s = st;
        const TraceEntry e = step_word(s, 0xFFFFFFFF, 0, kCfg);
        REQUIRE(e.exc.has_value());
        CHECK(e.exc->cause == cause::kIllegalInstruction);
        CHECK(e.exc->tval == 0xFFFFFFFF);
        CHECK(s.csr(Csr::Mepc) == st.pc);
    }
}

TEST_CASE("x0 invariance under random instruction fuzz") {
    Xoshiro256pp rng(0x0F0F);
    const auto vocab = isa::Vocabulary::build(isa::SubsetConfig::standard());
    corpus::InstructionSampler sampler(vocab);
    ArchState st = reset(99, kCfg);
    for (int i = 0; i < 20000; ++i) {
        const auto prog = sampler.random_program(1, 0.3, rng);
        if (prog[0].mnemonic == Mnemonic::Li) continue;
        step_word(st, isa::encode(prog[0]), 0, kCfg);
        REQUIRE(st.xregs[0] == 0);
        st.pc = kCfg.prog_base;  // keep pc sane across control flow
    }
}

TEST_CASE("endianness") {
    SUBCASE("MBE=1 in M-mode: lb of a stored word sees the high byte") {
        // the documented expected value: store 0x12345678, set MBE, reload
        auto res = run_text(
            "li t1, 256\n"
            "li t2, 0x12345678\n"
            "li t0, 0x2000000000\n"
            "csrs mstatus, t0\n"
            "sw t2, 0(t1)\n"
            "lb t3, 0(t1)\n",
            5);
        CHECK(res.outcome == Outcome::Completed);
        CHECK(res.final_state.xregs[28] == 0x12);
    }
    SUBCASE("store-then-load round trip, matching endianness") {
        Xoshiro256pp rng(0xE11D);
        for (int trial = 0; trial < 200; ++trial) {
            const uint64_t value = rng.next();
            const bool big = rng.chance(0.5);
            ArchState st = reset(trial, kCfg);
            if (big) st.set_csr(Csr::Mstatus, st.csr(Csr::Mstatus) | mstatus::kMbe);
            st.xregs[1] = 8 * rng.below(1000);
            st.xregs[2] = value;
            auto [stored, e1] = step(st, {Mnemonic::Sd, 0, 1, 2, Csr::Mstatus, 0}, kCfg);
            REQUIRE(!e1.exc);
            auto [after, e2] = step(stored, {Mnemonic::Ld, 3, 1, 0, Csr::Mstatus, 0}, kCfg);
            CHECK(after.xregs[3] == value);
        }
    }
    SUBCASE("flipped endianness returns the byteswap") {
        ArchState st = reset(3, kCfg);
        st.xregs[1] = 64;
        st.xregs[2] = 0x0102030405060708ull;
        auto [st1, e1] = step(st, {Mnemonic::Sd, 0, 1, 2, Csr::Mstatus, 0}, kCfg);
        REQUIRE(!e1.exc);
        st1.set_csr(Csr::Mstatus, st1.csr(Csr::Mstatus) | mstatus::kMbe);
        auto [st2, e2] = step(st1, {Mnemonic::Ld, 3, 1, 0, Csr::Mstatus, 0}, kCfg);
        CHECK(st2.xregs[3] == 0x0807060504030201ull);
    }
}

TEST_CASE("mip delegation visibility") {
    // delegated pending bits are masked at the delegator privilege level
    auto res = run_text(
        "li t0, 32\n"
        "csrs mideleg, t0\n"
        "csrs mip, t0\n"
        "csrr t1, mip\n"
        "csrr t2, sip\n",
        11);
    CHECK(res.outcome == Outcome::Completed);
    CHECK((res.final_state.xregs[6] & 32) == 0);   // t1: STI masked in mip
    CHECK((res.final_state.xregs[7] & 32) == 32);  // t2: visible through sip
}

TEST_CASE("run_block outcomes") {
    SUBCASE("six straight-line ALU instructions complete") {
        auto res = run_text(
            "addi x1, x0, 1\naddi x2, x0, 2\nadd x3, x1, x2\nxor x4, x3, x1\n"
            "sub x5, x4, x2\nori x6, x5, 7\n",
            21, 100);
        CHECK(res.outcome == Outcome::Completed);
        CHECK(res.trace.size() == 6);
    }
    SUBCASE("ret terminates when the target leaves the window") {
        ArchState st = reset(22, kCfg);
        st.xregs[1] = 0x500000;  // outside the program window
        auto prog = assemble_text("addi x2, x0, 1\njalr x0, 0(x1)\n");
        auto res = run_block(std::move(st), prog, 100, kCfg);
        CHECK(res.outcome == Outcome::Terminated);
        CHECK(res.trace.size() == 2);
    }
    SUBCASE("self-loop exhausts fuel after exactly `fuel` entries") {
        auto res = run_text("beq x0, x0, 0\n", 23, 50);
        CHECK(res.outcome == Outcome::FuelExhausted);
        CHECK(res.trace.size() == 50);
    }
    SUBCASE("access fault becomes an exception outcome") {
        ArchState st = reset(24, kCfg);
        st.xregs[1] = 0xFFFFFFFF00000000ull;
        auto res = run_block(std::move(st), assemble_text("lw x2, 0(x1)\n"), 10, kCfg);
        CHECK(res.outcome == Outcome::Exception);
        CHECK(res.exception_cause == cause::kLoadAccessFault);
        REQUIRE(!res.trace.empty());
        CHECK(res.trace.back().exc.has_value());
    }
    SUBCASE("empty program completes immediately") {
        auto res = run_block(reset(1, kCfg), isa::Program{}, 10, kCfg);
        CHECK(res.outcome == Outcome::Completed);
        CHECK(res.trace.empty());
    }
    SUBCASE("forward branch to the end completes") {
        // beq skips one instruction and lands exactly on the end address
        auto res = run_text("beq x0, x0, 8\naddi x1, x0, 1\n", 25, 10);
        CHECK(res.outcome == Outcome::Completed);
        CHECK(res.trace.size() == 1);
    }
}

TEST_CASE("classify_block") {
    const auto completed = run_text("addi x1, x0, 1\naddi x2, x0, 2\n", 31);
    SUBCASE("valid straight-line block") {
        const auto c = classify_block(completed, true, 2);
        CHECK(c.valid);
    }
    SUBCASE("syntax failure dominates") {
        const auto c = classify_block(completed, false, 2);
        CHECK(!c.valid);
        CHECK(c.reason == DeadReason::Syntax);
    }
    SUBCASE("exception is dead") {
        auto res = run_text("ecall\n", 32);
        const auto c = classify_block(res, true, 1);
        CHECK(!c.valid);
        CHECK(c.reason == DeadReason::Exception);
    }
    SUBCASE("fuel exhaustion is dead") {
        auto res = run_text("beq x0, x0, 0\n", 33, 8);
        CHECK(!classify_block(res, true, 1).valid);
    }
    SUBCASE("in-window taken branch retiring half the block stays valid") {
        // 6 words; branch at w0 skips to w3: retires w0,w3,w4,w5 = 4/6
        auto res = run_text(
            "beq x0, x0, 12\naddi x1, x0, 1\naddi x2, x0, 2\n"
            "addi x3, x0, 3\naddi x4, x0, 4\naddi x5, x0, 5\n",
            34);
        REQUIRE(res.outcome == Outcome::Completed);
        CHECK(res.trace.size() == 4);
        CHECK(classify_block(res, true, 6).valid);
        // retiring only 2 of 6 misses the 50% bar
        auto res2 = run_text(
            "beq x0, x0, 20\naddi x1, x0, 1\naddi x2, x0, 2\n"
            "addi x3, x0, 3\naddi x4, x0, 4\naddi x5, x0, 5\n",
            34);
        REQUIRE(res2.outcome == Outcome::Completed);
        CHECK(res2.trace.size() == 2);
        const auto c = classify_block(res2, true, 6);
        CHECK(!c.valid);
        CHECK(c.reason == DeadReason::Underrun);
    }
}

TEST_CASE("privilege transitions") {
    SUBCASE("mret target equals MPP at entry; MPP then clears to U") {
        // route: MPP=S, mepc -> next word, mret lands in S-mode
        auto res = run_text(
            "li t0, 0x1000\ncsrc mstatus, t0\nauipc t3, 0\naddi t3, t3, 16\n"
            "csrw mepc, t3\nmret\naddi x1, x0, 7\n",
            41);
        CHECK(res.outcome == Outcome::Completed);
        CHECK(res.final_state.privilege == Privilege::S);
        CHECK(((res.final_state.csr(Csr::Mstatus) >> mstatus::kMppShift) & 3) == 0);
        CHECK(res.final_state.xregs[1] == 7);
        // the retired mret carries the S privilege only from the next entry
        CHECK(res.trace.back().privilege == Privilege::S);
    }
    SUBCASE("sret from S never raises privilege above S") {
        for (const bool spp_set : {false, true}) {
            ArchState st = reset(42, kCfg);
            st.privilege = Privilege::S;
            uint64_t ms = st.csr(Csr::Mstatus);
            if (spp_set) ms |= mstatus::kSpp;
            st.set_csr(Csr::Mstatus, ms);
            auto [next, entry] = step(st, {Mnemonic::Sret, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
            CHECK(!entry.exc);
            CHECK(next.privilege == (spp_set ? Privilege::S : Privilege::U));
        }
    }
    SUBCASE("ecall from U with no delegation lands in M with mepc at the fault") {
        ArchState st = reset(43, kCfg);
        st.privilege = Privilege::U;
        const uint64_t fault_pc = st.pc;
        auto [next, entry] = step(st, {Mnemonic::Ecall, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
        REQUIRE(entry.exc.has_value());
        CHECK(entry.exc->cause == cause::kEcallFromU);
        CHECK(next.privilege == Privilege::M);
        CHECK(next.csr(Csr::Mepc) == fault_pc);
        CHECK(next.pc == (next.csr(Csr::Mtvec) & ~3ull));
    }
    SUBCASE("delegated ecall from U lands in S and writes the s-counterparts") {
        ArchState st = reset(44, kCfg);
        st.set_csr(Csr::Medeleg, 1ull << cause::kEcallFromU);
        st.privilege = Privilege::U;
        const uint64_t fault_pc = st.pc;
        auto [next, entry] = step(st, {Mnemonic::Ecall, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
        CHECK(next.privilege == Privilege::S);
        CHECK(next.csr(Csr::Sepc) == fault_pc);
        CHECK(next.csr(Csr::Scause) == cause::kEcallFromU);
        CHECK(next.csr(Csr::Mepc) != fault_pc);
    }
    SUBCASE("mret outside M is illegal") {
        ArchState st = reset(45, kCfg);
        st.privilege = Privilege::S;
        auto [next, entry] = step(st, {Mnemonic::Mret, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
        REQUIRE(entry.exc.has_value());
        CHECK(entry.exc->cause == cause::kIllegalInstruction);
    }
    SUBCASE("S-mode access to an M CSR is illegal") {
        ArchState st = reset(46, kCfg);
        st.privilege = Privilege::S;
        auto [next, entry] =
            step(st, {Mnemonic::Csrrs, 5, 0, 0, Csr::Mstatus, 0}, kCfg);
        REQUIRE(entry.exc.has_value());
        CHECK(entry.exc->cause == cause::kIllegalInstruction);
    }
}

TEST_CASE("TVM and fence gating") {
    SUBCASE("sfence.vma legal in M, TVM-gated in S") {
        ArchState m = reset(51, kCfg);
        auto [m2, em] = step(m, {Mnemonic::SfenceVma, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
        CHECK(!em.exc);

        ArchState s = reset(51, kCfg);
        s.privilege = Privilege::S;
        auto [s2, es] = step(s, {Mnemonic::SfenceVma, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
        CHECK(!es.exc);

        s2.set_csr(Csr::Mstatus, s2.csr(Csr::Mstatus) | mstatus::kTvm);
        auto [s3, es2] = step(s2, {Mnemonic::SfenceVma, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
        REQUIRE(es2.exc.has_value());
        CHECK(es2.exc->cause == cause::kIllegalInstruction);
        CHECK(es2.exc->tval == 0x12000073);
    }
    SUBCASE("hfence.gvma illegal outside M") {
        ArchState s = reset(52, kCfg);
        s.privilege = Privilege::S;
        auto [s2, e] = step(s, {Mnemonic::HfenceGvma, 0, 0, 0, Csr::Mstatus, 0}, kCfg);
        REQUIRE(e.exc.has_value());
        CHECK(e.exc->tval == 0x62000073);
    }
}

TEST_CASE("pmp") {
    SUBCASE("unconfigured entry is permissive for S") {
        ArchState st = reset(61, kCfg);
        st.privilege = Privilege::S;
        st.xregs[1] = 128;
        auto [next, e] = step(st, {Mnemonic::Lw, 2, 1, 0, Csr::Mstatus, 0}, kCfg);
        CHECK(!e.exc);
    }
    SUBCASE("NAPOT entry restricts S to the granted range") {
        ArchState st = reset(62, kCfg);
        // NAPOT over [0x1000, 0x2000): addr field (0x1000>>2)|((0x1000/8)-1 bits)
        const uint64_t napot = (0x1000ull >> 2) | ((0x1000ull >> 3) - 1);
        st.set_csr(Csr::Pmpaddr0, napot);
        st.set_csr(Csr::Pmpcfg0, 0x19);  // NAPOT | R w/o W
        st.privilege = Privilege::S;
        st.xregs[1] = 0x1800;
        auto [a, e1] = step(st, {Mnemonic::Lw, 2, 1, 0, Csr::Mstatus, 0}, kCfg);
        CHECK(!e1.exc);  // read granted
        auto [b, e2] = step(st, {Mnemonic::Sw, 0, 1, 2, Csr::Mstatus, 0}, kCfg);
        REQUIRE(e2.exc.has_value());  // write not granted
        CHECK(e2.exc->cause == cause::kStoreAccessFault);
        st.xregs[1] = 0x4000;  // out of range
        auto [c, e3] = step(st, {Mnemonic::Lw, 2, 1, 0, Csr::Mstatus, 0}, kCfg);
        REQUIRE(e3.exc.has_value());
        CHECK(e3.exc->cause == cause::kLoadAccessFault);
    }
}

TEST_CASE("trace determinism") {
    const char* text =
        "li t0, 0x800\ncsrs mstatus, t0\nadd x3, x1, x2\nsw x3, 8(x0)\nlw x4, 8(x0)\n"
        "beq x4, x3, 4\naddi x5, x0, 1\n";
    const auto a = run_text(text, 77);
    const auto b = run_text(text, 77);
    CHECK(trace_jsonl(a.trace) == trace_jsonl(b.trace));
    const auto c = run_text(text, 78);
    CHECK(trace_jsonl(a.trace) != trace_jsonl(c.trace));
}
