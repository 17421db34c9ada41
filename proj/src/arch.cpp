#include "twinfuzz/arch.hpp"

#include <cassert>

#include <json.hpp>

#include "twinfuzz/rng.hpp"

namespace twinfuzz::arch {

namespace {

using isa::Csr;
using isa::Mnemonic;
using M = cov::CoverageModel;

const uint32_t kSfenceWord = isa::encode({Mnemonic::SfenceVma, 0, 0, 0, Csr::Mstatus, 0});
const uint32_t kHfenceWord = isa::encode({Mnemonic::HfenceGvma, 0, 0, 0, Csr::Mstatus, 0});

constexpr uint64_t kMstatusWriteMask =
    mstatus::kSie | mstatus::kMie | mstatus::kSpie | mstatus::kMpie |
    mstatus::kSpp | mstatus::kMpp | mstatus::kTvm | mstatus::kTw |
    mstatus::kTsr | mstatus::kSbe | mstatus::kMbe;
constexpr uint64_t kSstatusBaseMask = mstatus::kSie | mstatus::kSpie | mstatus::kSpp;
constexpr uint64_t kMedelegMask = (1ull << cause::kIllegalInstruction) |
                                  (1ull << cause::kLoadAccessFault) |
                                  (1ull << cause::kStoreAccessFault) |
                                  (1ull << cause::kEcallFromU) |
                                  (1ull << cause::kEcallFromS);
constexpr uint64_t kMidelegMask = 0x222;  // SSI, STI, SEI
constexpr uint64_t kMieMask = 0xAAA;
constexpr uint64_t kMipWriteMask = 0x222;
constexpr uint64_t kPmpaddrMask = 0x3FFFFFFFFFFFFFull;

struct Ctx {
    ArchState& st;
    const ArchConfig& cfg;
    const BugConfig& bugs;
    cov::CoverageSink* sink;
    TraceEntry& entry;
    bool trapped = false;

    void hit(uint32_t id) const {
        if (sink) sink->hit(id);
    }
    void cond(uint32_t pred, bool taken) const {
        if (sink) sink->hit(M::instance().cond(pred, taken));
    }
};

uint64_t sstatus_mask(const BugConfig& bugs) {
    uint64_t mask = kSstatusBaseMask;
    if (bugs.v5_mbe_sbe_writable) mask |= mstatus::kSbe | mstatus::kMbe;
    return mask;
}

void raise(Ctx& c, uint8_t cause_, uint64_t tval) {
    ArchState& st = c.st;
    const Privilege from = st.privilege;
    const unsigned from_idx = priv_index(from);
    const bool may_delegate = from != Privilege::M;
    const bool delegated =
        may_delegate && ((st.csr(Csr::Medeleg) >> cause_) & 1);
    if (may_delegate) {
        const unsigned slot = M::deleg_slot(cause_);
        if (slot != UINT32_MAX) c.cond(M::kPredDelegBase + slot, delegated);
    }
    uint64_t written_tval = tval;
    if (delegated) {
        if (c.bugs.v4_stval_one && cause_ == cause::kIllegalInstruction &&
            (tval == kSfenceWord || tval == kHfenceWord))
            written_tval = 1;
        st.set_csr(Csr::Scause, cause_);
        st.set_csr(Csr::Stval, written_tval);
        st.set_csr(Csr::Sepc, c.entry.pc);
        uint64_t ms = st.csr(Csr::Mstatus);
        ms = (ms & ~mstatus::kSpp) | (from == Privilege::S ? mstatus::kSpp : 0);
        ms = (ms & ~mstatus::kSpie) | ((ms & mstatus::kSie) ? mstatus::kSpie : 0);
        ms &= ~mstatus::kSie;
        st.set_csr(Csr::Mstatus, ms);
        st.privilege = Privilege::S;
        c.cond(M::kPredTvecVectoredS, st.csr(Csr::Stvec) & 1);
        st.pc = st.csr(Csr::Stvec) & ~3ull;
        c.hit(M::instance().trap_site(1));
        c.hit(M::instance().fsm_edge(from_idx, 1, 0));
    } else {
        st.set_csr(Csr::Mcause, cause_);
        st.set_csr(Csr::Mtval, written_tval);
        st.set_csr(Csr::Mepc, c.entry.pc);
        uint64_t ms = st.csr(Csr::Mstatus);
        ms = (ms & ~mstatus::kMpp) |
             (static_cast<uint64_t>(from) << mstatus::kMppShift);
        ms = (ms & ~mstatus::kMpie) | ((ms & mstatus::kMie) ? mstatus::kMpie : 0);
        ms &= ~mstatus::kMie;
        st.set_csr(Csr::Mstatus, ms);
        st.privilege = Privilege::M;
        c.cond(M::kPredTvecVectoredM, st.csr(Csr::Mtvec) & 1);
        st.pc = st.csr(Csr::Mtvec) & ~3ull;
        c.hit(M::instance().trap_site(0));
        c.hit(M::instance().fsm_edge(from_idx, 2, 0));
    }
    c.entry.exc = Exception{cause_, written_tval};
    c.trapped = true;
}

void write_rd(Ctx& c, uint8_t rd, uint64_t value) {
    c.cond(M::kPredRdIsX0, rd == 0);
    if (rd == 0) return;
    c.st.xregs[rd] = value;
    c.entry.reg = RegWrite{rd, value};
}

bool big_endian_effective(Ctx& c) {
    const uint64_t ms = c.st.csr(Csr::Mstatus);
    switch (c.st.privilege) {
        case Privilege::M: {
            const bool big = (ms & mstatus::kMbe) && !c.bugs.v1_mbe_ignored;
            c.cond(M::kPredEndianBigM, big);
            return big;
        }
        case Privilege::S: {
            const bool big = (ms & mstatus::kSbe) && !c.bugs.v2_sbe_ignored;
            c.cond(M::kPredEndianBigS, big);
            return big;
        }
        case Privilege::U:
            return false;
    }
    return false;
}

bool pmp_allows(Ctx& c, uint64_t addr, uint8_t width, bool is_write) {
    const uint64_t cfg = c.st.csr(Csr::Pmpcfg0) & 0xFF;
    const unsigned mode = (cfg >> 3) & 3;
    const bool active = mode != 0;
    c.cond(M::kPredPmpActive, active);
    if (!active) return true;  // unconfigured entry: permissive analog

    const uint64_t a = c.st.csr(Csr::Pmpaddr0);
    uint64_t lo = 0, hi = 0;
    switch (mode) {
        case 1:  // TOR with no preceding entry: [0, pmpaddr<<2)
            lo = 0;
            hi = a << 2;
            break;
        case 2:  // NA4
            lo = a << 2;
            hi = lo + 4;
            break;
        case 3: {  // NAPOT
            const unsigned t = std::countr_one(a);
            const uint64_t size = 1ull << (t + 3);
            lo = (a & ~((1ull << t) - 1)) << 2;
            hi = lo + size;
            break;
        }
    }
    const bool match = addr >= lo && addr + width <= hi && hi > lo;
    c.cond(M::kPredPmpMatch, match);
    const bool locked = cfg & 0x80;
    if (c.st.privilege == Privilege::M && !locked) return true;
    if (!match) return c.st.privilege == Privilege::M;
    const bool grant = is_write ? (cfg & 2) : (cfg & 1);
    c.cond(M::kPredPmpGrant, grant);
    return grant;
}

// Returns nullopt and raises on fault.
std::optional<uint64_t> mem_read(Ctx& c, uint64_t addr, uint8_t width) {
    const bool in_window = addr < c.cfg.mem_size && addr + width <= c.cfg.mem_size;
    c.cond(M::kPredMemInWindow, in_window);
    if (!in_window || !pmp_allows(c, addr, width, false)) {
        raise(c, cause::kLoadAccessFault, addr);
        return std::nullopt;
    }
    if (width > 1) c.cond(M::kPredMemMisaligned, addr % width != 0);
    const bool big = big_endian_effective(c);
    uint64_t value = 0;
    for (uint8_t i = 0; i < width; ++i) {
        const uint8_t b = c.st.memory.read_byte(addr + i);
        const unsigned shift = big ? 8u * (width - 1 - i) : 8u * i;
        value |= static_cast<uint64_t>(b) << shift;
    }
    if (big && width > 1) c.hit(M::instance().byteswap(false));
    c.hit(M::instance().mem_width(false, width));
    return value;
}

bool mem_write(Ctx& c, uint64_t addr, uint8_t width, uint64_t value) {
    const bool in_window = addr < c.cfg.mem_size && addr + width <= c.cfg.mem_size;
    c.cond(M::kPredMemInWindow, in_window);
    if (!in_window || !pmp_allows(c, addr, width, true)) {
        raise(c, cause::kStoreAccessFault, addr);
        return false;
    }
    if (width > 1) c.cond(M::kPredMemMisaligned, addr % width != 0);
    const bool big = big_endian_effective(c);
    for (uint8_t i = 0; i < width; ++i) {
        const unsigned shift = big ? 8u * (width - 1 - i) : 8u * i;
        c.st.memory.write_byte(addr + i, static_cast<uint8_t>(value >> shift));
    }
    if (big && width > 1) c.hit(M::instance().byteswap(true));
    c.hit(M::instance().mem_width(true, width));
    return true;
}

uint64_t csr_effective_write_mask(const Ctx& c, Csr csr) {
    switch (csr) {
        case Csr::Mstatus: return kMstatusWriteMask;
        case Csr::Sstatus: return sstatus_mask(c.bugs);
        case Csr::Medeleg: return kMedelegMask;
        case Csr::Mideleg: return kMidelegMask;
        case Csr::Mie: return kMieMask;
        case Csr::Sie: return c.st.csr(Csr::Mideleg) & kMieMask;
        case Csr::Mip: return kMipWriteMask;
        case Csr::Sip: return c.st.csr(Csr::Mideleg) & 0x2;
        case Csr::Mtvec: case Csr::Stvec: return ~2ull;
        case Csr::Mepc: case Csr::Sepc: return ~1ull;
        case Csr::Pmpcfg0: return 0x9F;
        case Csr::Pmpaddr0: return kPmpaddrMask;
        default: return ~0ull;
    }
}

uint64_t csr_read(Ctx& c, Csr csr) {
    c.hit(M::instance().csr_read_site(csr));
    const ArchState& st = c.st;
    switch (csr) {
        case Csr::Sstatus:
            return st.csr(Csr::Mstatus) & sstatus_mask(c.bugs);
        case Csr::Sie:
            return st.csr(Csr::Mie) & st.csr(Csr::Mideleg);
        case Csr::Sip:
            return st.csr(Csr::Mip) & st.csr(Csr::Mideleg);
        case Csr::Mip: {
            const uint64_t raw = st.csr(Csr::Mip);
            const uint64_t mideleg = st.csr(Csr::Mideleg);
            for (unsigned bit : {1u, 5u, 9u}) {
                if ((raw >> bit) & 1) {
                    const bool masked = ((mideleg >> bit) & 1) &&
                                        !c.bugs.v3_delegated_sti_visible;
                    c.cond(M::kPredMipMaskBase + M::mip_bit_slot(bit), masked);
                }
            }
            // Delegated pending bits are masked at the delegator level.
            if (c.bugs.v3_delegated_sti_visible) return raw;
            return raw & ~mideleg;
        }
        default:
            return st.csr(csr);
    }
}

void csr_write(Ctx& c, Csr csr, uint64_t value) {
    c.hit(M::instance().csr_write_site(csr));
    const uint64_t mask = csr_effective_write_mask(c, csr);
    c.cond(M::kPredCsrWriteTrim + static_cast<uint32_t>(csr), (value & ~mask) != 0);
    ArchState& st = c.st;
    switch (csr) {
        case Csr::Sstatus: {
            const uint64_t ms = st.csr(Csr::Mstatus);
            st.set_csr(Csr::Mstatus, (ms & ~mask) | (value & mask));
            return;
        }
        case Csr::Sie: {
            const uint64_t mie = st.csr(Csr::Mie);
            st.set_csr(Csr::Mie, (mie & ~mask) | (value & mask));
            return;
        }
        case Csr::Sip: {
            const uint64_t mip = st.csr(Csr::Mip);
            st.set_csr(Csr::Mip, (mip & ~mask) | (value & mask));
            return;
        }
        case Csr::Mstatus: {
            uint64_t v = value & mask;
            if (((v >> mstatus::kMppShift) & 3) == 2)  // MPP=2 is reserved; WARL to U
                v &= ~mstatus::kMpp;
            st.set_csr(Csr::Mstatus, v);
            return;
        }
        case Csr::Mip: {
            const uint64_t mip = st.csr(Csr::Mip);
            st.set_csr(Csr::Mip, (mip & ~mask) | (value & mask));
            return;
        }
        default:
            st.set_csr(csr, value & mask);
            return;
    }
}

Privilege csr_required_privilege(Csr csr) {
    return (isa::csr_address(csr) & 0x300) == 0x300 ? Privilege::M : Privilege::S;
}

int64_t sext32(uint64_t v) { return static_cast<int64_t>(static_cast<int32_t>(v)); }

}  // namespace

std::string_view privilege_name(Privilege p) {
    switch (p) {
        case Privilege::U: return "U";
        case Privilege::S: return "S";
        case Privilege::M: return "M";
    }
    return "?";
}

std::string_view outcome_name(Outcome o) {
    switch (o) {
        case Outcome::Completed: return "COMPLETED";
        case Outcome::Exception: return "EXCEPTION";
        case Outcome::Terminated: return "TERMINATED";
        case Outcome::FuelExhausted: return "FUEL_EXHAUSTED";
    }
    return "?";
}

std::string_view dead_reason_name(DeadReason r) {
    switch (r) {
        case DeadReason::None: return "none";
        case DeadReason::Syntax: return "syntax";
        case DeadReason::Exception: return "exception";
        case DeadReason::Terminated: return "terminated";
        case DeadReason::Fuel: return "fuel";
        case DeadReason::Underrun: return "underrun";
    }
    return "?";
}

uint8_t Memory::read_byte(uint64_t addr) const {
    auto it = pages_.find(addr >> kPageBits);
    if (it == pages_.end()) return 0;
    return it->second[addr & ((1 << kPageBits) - 1)];
}

void Memory::write_byte(uint64_t addr, uint8_t value) {
    auto& page = pages_[addr >> kPageBits];
    page[addr & ((1 << kPageBits) - 1)] = value;
}

std::optional<BugConfig> BugConfig::from_names(std::span<const std::string> names) {
    BugConfig cfg;
    for (const auto& n : names) {
        if (n == "V1") cfg.v1_mbe_ignored = true;
        else if (n == "V2") cfg.v2_sbe_ignored = true;
        else if (n == "V3") cfg.v3_delegated_sti_visible = true;
        else if (n == "V4") cfg.v4_stval_one = true;
        else if (n == "V5") cfg.v5_mbe_sbe_writable = true;
        else return std::nullopt;
    }
    return cfg;
}

std::vector<std::string> BugConfig::names() const {
    std::vector<std::string> out;
    if (v1_mbe_ignored) out.push_back("V1");
    if (v2_sbe_ignored) out.push_back("V2");
    if (v3_delegated_sti_visible) out.push_back("V3");
    if (v4_stval_one) out.push_back("V4");
    if (v5_mbe_sbe_writable) out.push_back("V5");
    return out;
}

ArchState reset(uint64_t seed, const ArchConfig& cfg) {
    ArchState st;
    st.pc = cfg.prog_base;
    st.privilege = Privilege::M;
    Xoshiro256pp rng(derive_seed(seed, 0x5E5E7));
    for (unsigned r = 1; r < 32; ++r) {
        if (rng.chance(0.5)) {
            st.xregs[r] = rng.below(cfg.reset_pointer_region / 8) * 8;
        } else {
            st.xregs[r] = rng.next();
        }
    }
    st.set_csr(Csr::Mstatus, 3ull << mstatus::kMppShift);  // MPP=M, everything else clear
    st.set_csr(Csr::Mepc, cfg.prog_base + 4 * rng.below(cfg.reset_epc_slots));
    st.set_csr(Csr::Sepc, cfg.prog_base + 4 * rng.below(cfg.reset_epc_slots));
    for (uint64_t addr = 0; addr + 8 <= cfg.reset_memory_bytes; addr += 8) {
        const uint64_t v = rng.next();
        for (unsigned i = 0; i < 8; ++i)
            st.memory.write_byte(addr + i, static_cast<uint8_t>(v >> (8 * i)));
    }
    return st;
}

TraceEntry step_word(ArchState& state, uint32_t word, uint32_t seq,
                     const ArchConfig& cfg, const BugConfig& bugs,
                     cov::CoverageSink* sink) {
    TraceEntry entry;
    entry.seq = seq;
    entry.pc = state.pc;
    entry.insn = word;
    entry.privilege = state.privilege;

    Ctx c{state, cfg, bugs, sink, entry};

    const auto decoded = isa::decode(word);
    if (!decoded) {
        raise(c, cause::kIllegalInstruction, word);
        return entry;
    }
    const isa::Instruction& in = *decoded;
    const Mnemonic m = in.mnemonic;
    c.hit(M::instance().exec(m, priv_index(state.privilege)));

    const uint64_t rs1v = state.xregs[in.rs1];
    const uint64_t rs2v = state.xregs[in.rs2];
    const auto immu = static_cast<uint64_t>(in.imm);
    uint64_t next_pc = state.pc + 4;

    auto alu_result = [&](uint64_t value) {
        write_rd(c, in.rd, value);
        c.hit(M::instance().alu_writeback(m));
    };
    auto do_load = [&](uint8_t width, bool sign) {
        const uint64_t addr = rs1v + immu;
        c.hit(M::instance().load_action(m, 0));
        auto v = mem_read(c, addr, width);
        if (!v) return;
        c.hit(M::instance().load_action(m, 1));
        uint64_t value = *v;
        if (sign && width < 8) {
            const unsigned shift = 64 - 8 * width;
            value = static_cast<uint64_t>(static_cast<int64_t>(value << shift) >> shift);
        }
        entry.mem = MemAccess{addr, width, value, false};
        write_rd(c, in.rd, value);
        c.hit(M::instance().load_action(m, 2));
    };
    auto do_store = [&](uint8_t width) {
        const uint64_t addr = rs1v + immu;
        c.hit(M::instance().store_action(m, 0));
        const uint64_t value =
            width == 8 ? rs2v : rs2v & ((1ull << (8 * width)) - 1);
        if (!mem_write(c, addr, width, value)) return;
        entry.mem = MemAccess{addr, width, value, true};
        c.hit(M::instance().store_action(m, 1));
    };
    auto do_branch = [&](bool taken) {
        c.cond(M::kPredBranchBase + static_cast<uint32_t>(m) -
                   static_cast<uint32_t>(Mnemonic::Beq),
               taken);
        if (taken) next_pc = entry.pc + immu;
    };
    auto do_csr = [&] {
        const Privilege required = csr_required_privilege(in.csr);
        const bool ok = static_cast<uint8_t>(state.privilege) >=
                        static_cast<uint8_t>(required);
        c.cond(M::kPredCsrPriv + static_cast<uint32_t>(in.csr), ok);
        if (!ok) {
            raise(c, cause::kIllegalInstruction, word);
            return;
        }
        const uint64_t old = csr_read(c, in.csr);
        c.hit(M::instance().csrop_action(m, 0));
        const bool is_imm = m == Mnemonic::Csrrwi || m == Mnemonic::Csrrsi ||
                            m == Mnemonic::Csrrci;
        const uint64_t operand = is_imm ? immu : rs1v;
        bool writes = true;
        uint64_t next = operand;
        switch (m) {
            case Mnemonic::Csrrw: case Mnemonic::Csrrwi:
                break;
            case Mnemonic::Csrrs: case Mnemonic::Csrrsi:
                writes = is_imm ? operand != 0 : in.rs1 != 0;
                next = old | operand;
                break;
            default:  // csrrc / csrrci
                writes = is_imm ? operand != 0 : in.rs1 != 0;
                next = old & ~operand;
                break;
        }
        if (writes) {
            csr_write(c, in.csr, next);
            c.hit(M::instance().csrop_action(m, 1));
        }
        write_rd(c, in.rd, old);
        c.hit(M::instance().csrop_action(m, 2));
    };

    switch (m) {
        case Mnemonic::Add: alu_result(rs1v + rs2v); break;
        case Mnemonic::Sub: alu_result(rs1v - rs2v); break;
        case Mnemonic::Sll: alu_result(rs1v << (rs2v & 63)); break;
        case Mnemonic::Slt:
            alu_result(static_cast<int64_t>(rs1v) < static_cast<int64_t>(rs2v));
            break;
        case Mnemonic::Sltu: alu_result(rs1v < rs2v); break;
        case Mnemonic::Xor: alu_result(rs1v ^ rs2v); break;
        case Mnemonic::Srl: alu_result(rs1v >> (rs2v & 63)); break;
        case Mnemonic::Sra:
            alu_result(static_cast<uint64_t>(static_cast<int64_t>(rs1v) >> (rs2v & 63)));
            break;
        case Mnemonic::Or: alu_result(rs1v | rs2v); break;
        case Mnemonic::And: alu_result(rs1v & rs2v); break;
        case Mnemonic::Addw: alu_result(static_cast<uint64_t>(sext32(rs1v + rs2v))); break;
        case Mnemonic::Subw: alu_result(static_cast<uint64_t>(sext32(rs1v - rs2v))); break;
        case Mnemonic::Sllw:
            alu_result(static_cast<uint64_t>(sext32(static_cast<uint32_t>(rs1v) << (rs2v & 31))));
            break;
        case Mnemonic::Srlw:
            alu_result(static_cast<uint64_t>(sext32(static_cast<uint32_t>(rs1v) >> (rs2v & 31))));
            break;
        case Mnemonic::Sraw:
            alu_result(static_cast<uint64_t>(
                static_cast<int64_t>(static_cast<int32_t>(rs1v) >> (rs2v & 31))));
            break;
        case Mnemonic::Addi: alu_result(rs1v + immu); break;
        case Mnemonic::Slti:
            alu_result(static_cast<int64_t>(rs1v) < in.imm);
            break;
        case Mnemonic::Sltiu: alu_result(rs1v < immu); break;
        case Mnemonic::Xori: alu_result(rs1v ^ immu); break;
        case Mnemonic::Ori: alu_result(rs1v | immu); break;
        case Mnemonic::Andi: alu_result(rs1v & immu); break;
        case Mnemonic::Slli: alu_result(rs1v << (immu & 63)); break;
        case Mnemonic::Srli: alu_result(rs1v >> (immu & 63)); break;
        case Mnemonic::Srai:
            alu_result(static_cast<uint64_t>(static_cast<int64_t>(rs1v) >> (immu & 63)));
            break;
        case Mnemonic::Addiw: alu_result(static_cast<uint64_t>(sext32(rs1v + immu))); break;
        case Mnemonic::Slliw:
            alu_result(static_cast<uint64_t>(sext32(static_cast<uint32_t>(rs1v) << (immu & 31))));
            break;
        case Mnemonic::Srliw:
            alu_result(static_cast<uint64_t>(sext32(static_cast<uint32_t>(rs1v) >> (immu & 31))));
            break;
        case Mnemonic::Sraiw:
            alu_result(static_cast<uint64_t>(
                static_cast<int64_t>(static_cast<int32_t>(rs1v) >> (immu & 31))));
            break;
        case Mnemonic::Lui:
            alu_result(static_cast<uint64_t>(sext32(immu << 12)));
            break;
        case Mnemonic::Auipc:
            alu_result(entry.pc + static_cast<uint64_t>(sext32(immu << 12)));
            break;
        case Mnemonic::Lb: do_load(1, true); break;
        case Mnemonic::Lh: do_load(2, true); break;
        case Mnemonic::Lw: do_load(4, true); break;
        case Mnemonic::Ld: do_load(8, true); break;
        case Mnemonic::Lbu: do_load(1, false); break;
        case Mnemonic::Lhu: do_load(2, false); break;
        case Mnemonic::Lwu: do_load(4, false); break;
        case Mnemonic::Sb: do_store(1); break;
        case Mnemonic::Sh: do_store(2); break;
        case Mnemonic::Sw: do_store(4); break;
        case Mnemonic::Sd: do_store(8); break;
        case Mnemonic::Beq: do_branch(rs1v == rs2v); break;
        case Mnemonic::Bne: do_branch(rs1v != rs2v); break;
        case Mnemonic::Blt:
            do_branch(static_cast<int64_t>(rs1v) < static_cast<int64_t>(rs2v));
            break;
        case Mnemonic::Bge:
            do_branch(static_cast<int64_t>(rs1v) >= static_cast<int64_t>(rs2v));
            break;
        case Mnemonic::Bltu: do_branch(rs1v < rs2v); break;
        case Mnemonic::Bgeu: do_branch(rs1v >= rs2v); break;
        case Mnemonic::Jal:
            write_rd(c, in.rd, entry.pc + 4);
            c.hit(M::instance().jump_action(m, 0));
            next_pc = entry.pc + immu;
            c.hit(M::instance().jump_action(m, 1));
            break;
        case Mnemonic::Jalr: {
            const uint64_t target = (rs1v + immu) & ~1ull;
            write_rd(c, in.rd, entry.pc + 4);
            c.hit(M::instance().jump_action(m, 0));
            next_pc = target;
            c.hit(M::instance().jump_action(m, 1));
            break;
        }
        case Mnemonic::Csrrw: case Mnemonic::Csrrs: case Mnemonic::Csrrc:
        case Mnemonic::Csrrwi: case Mnemonic::Csrrsi: case Mnemonic::Csrrci:
            do_csr();
            break;
        case Mnemonic::Mret: {
            if (state.privilege != Privilege::M) {
                raise(c, cause::kIllegalInstruction, word);
                break;
            }
            c.hit(M::instance().system_effect(m));
            uint64_t ms = state.csr(Csr::Mstatus);
            const unsigned mpp = (ms >> mstatus::kMppShift) & 3;
            const Privilege target = static_cast<Privilege>(mpp);
            ms = (ms & ~mstatus::kMie) | ((ms & mstatus::kMpie) ? mstatus::kMie : 0);
            ms |= mstatus::kMpie;
            ms &= ~mstatus::kMpp;  // MPP <- U
            state.set_csr(Csr::Mstatus, ms);
            state.privilege = target;
            next_pc = state.csr(Csr::Mepc);
            c.hit(M::instance().trap_site(2));
            c.hit(M::instance().fsm_edge(2, priv_index(target), 1));
            break;
        }
        case Mnemonic::Sret: {
            if (state.privilege == Privilege::U) {
                raise(c, cause::kIllegalInstruction, word);
                break;
            }
            if (state.privilege == Privilege::S) {
                const bool tsr = state.csr(Csr::Mstatus) & mstatus::kTsr;
                c.cond(M::kPredTsrGate, tsr);
                if (tsr) {
                    raise(c, cause::kIllegalInstruction, word);
                    break;
                }
            }
            c.hit(M::instance().system_effect(m));
            const unsigned from_idx = priv_index(state.privilege);
            uint64_t ms = state.csr(Csr::Mstatus);
            const Privilege target =
                (ms & mstatus::kSpp) ? Privilege::S : Privilege::U;
            ms = (ms & ~mstatus::kSie) | ((ms & mstatus::kSpie) ? mstatus::kSie : 0);
            ms |= mstatus::kSpie;
            ms &= ~mstatus::kSpp;  // SPP <- U
            state.set_csr(Csr::Mstatus, ms);
            state.privilege = target;
            next_pc = state.csr(Csr::Sepc);
            c.hit(M::instance().trap_site(3));
            c.hit(M::instance().fsm_edge(from_idx, priv_index(target), 2));
            break;
        }
        case Mnemonic::Ecall:
            switch (state.privilege) {
                case Privilege::U: raise(c, cause::kEcallFromU, 0); break;
                case Privilege::S: raise(c, cause::kEcallFromS, 0); break;
                case Privilege::M: raise(c, cause::kEcallFromM, 0); break;
            }
            break;
        case Mnemonic::Wfi: {
            if (state.privilege == Privilege::U) {
                raise(c, cause::kIllegalInstruction, word);
                break;
            }
            if (state.privilege == Privilege::S) {
                const bool tw = state.csr(Csr::Mstatus) & mstatus::kTw;
                c.cond(M::kPredTwGate, tw);
                if (tw) {
                    raise(c, cause::kIllegalInstruction, word);
                    break;
                }
            }
            // No asynchronous interrupt delivery is modeled; wfi retires.
            c.hit(M::instance().system_effect(m));
            break;
        }
        case Mnemonic::Fence:
            c.hit(M::instance().system_effect(m));
            break;
        case Mnemonic::SfenceVma: {
            if (state.privilege == Privilege::U) {
                raise(c, cause::kIllegalInstruction, word);
                break;
            }
            if (state.privilege == Privilege::S) {
                const bool tvm = state.csr(Csr::Mstatus) & mstatus::kTvm;
                c.cond(M::kPredTvmGate, tvm);
                if (tvm) {
                    raise(c, cause::kIllegalInstruction, word);
                    break;
                }
            }
            c.hit(M::instance().system_effect(m));
            break;
        }
        case Mnemonic::HfenceGvma:
            // No hypervisor extension: only M-mode may retire it.
            if (state.privilege != Privilege::M) {
                raise(c, cause::kIllegalInstruction, word);
                break;
            }
            c.hit(M::instance().system_effect(m));
            break;
        default:
            raise(c, cause::kIllegalInstruction, word);
            break;
    }

    if (!c.trapped) state.pc = next_pc;
    state.xregs[0] = 0;
    return entry;
}

std::pair<ArchState, TraceEntry> step(const ArchState& state, const isa::Instruction& inst,
                                      const ArchConfig& cfg) {
    ArchState next = state;
    TraceEntry entry = step_word(next, isa::encode(inst), 0, cfg);
    return {std::move(next), entry};
}

ExecResult run_block(ArchState state, const isa::Program& prog, uint64_t fuel,
                     const ArchConfig& cfg, const BugConfig& bugs,
                     cov::CoverageSink* sink) {
    ExecResult res;
    const uint64_t base = cfg.prog_base;
    const uint64_t end = base + 4 * prog.words.size();
    uint32_t seq = 0;
    for (;;) {
        if (state.pc == end) {
            res.outcome = Outcome::Completed;
            break;
        }
        const bool in_window =
            state.pc >= base && state.pc < end && (state.pc - base) % 4 == 0;
        if (!in_window) {
            res.outcome = Outcome::Terminated;
            break;
        }
        if (res.trace.size() >= fuel) {
            res.outcome = Outcome::FuelExhausted;
            break;
        }
        const uint32_t word = prog.words[(state.pc - base) / 4];
        TraceEntry entry = step_word(state, word, seq++, cfg, bugs, sink);
        res.trace.push_back(entry);
        if (entry.exc) {
            res.outcome = Outcome::Exception;
            res.exception_cause = entry.exc->cause;
            break;
        }
    }
    res.final_state = std::move(state);
    return res;
}

Classification classify_block(const ExecResult& result, bool syntax_ok,
                              size_t total_words, double min_retire_fraction) {
    if (!syntax_ok) return {false, DeadReason::Syntax};
    switch (result.outcome) {
        case Outcome::Exception: return {false, DeadReason::Exception};
        case Outcome::Terminated: return {false, DeadReason::Terminated};
        case Outcome::FuelExhausted: return {false, DeadReason::Fuel};
        case Outcome::Completed: break;
    }
    const double need = min_retire_fraction * static_cast<double>(total_words);
    if (static_cast<double>(result.trace.size()) + 1e-9 < need)
        return {false, DeadReason::Underrun};
    return {true, DeadReason::None};
}

namespace {
std::string hex64(uint64_t v) {
    char buf[32];
    snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}
}  // namespace

std::string trace_entry_json(const TraceEntry& e) {
    nlohmann::json j;
    j["seq"] = e.seq;
    j["pc"] = hex64(e.pc);
    char insn[16];
    snprintf(insn, sizeof insn, "0x%08x", e.insn);
    j["insn"] = insn;
    j["priv"] = std::string(privilege_name(e.privilege));
    if (e.reg) j["reg"] = {{"i", e.reg->index}, {"v", hex64(e.reg->value)}};
    if (e.mem)
        j["mem"] = {{"a", hex64(e.mem->addr)},
                    {"w", e.mem->width},
                    {"v", hex64(e.mem->value)},
                    {"op", e.mem->is_write ? "W" : "R"}};
    if (e.exc) j["exc"] = {{"cause", e.exc->cause}, {"tval", hex64(e.exc->tval)}};
    return j.dump();
}

std::string trace_jsonl(std::span<const TraceEntry> trace) {
    std::string out;
    for (const auto& e : trace) {
        out += trace_entry_json(e);
        out += '\n';
    }
    return out;
}

}  // namespace twinfuzz::arch
