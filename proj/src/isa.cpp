#include "twinfuzz/isa.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "twinfuzz/rng.hpp"

namespace twinfuzz::isa {

namespace {

struct MnemonicInfo {
    std::string_view name;
    Signature sig;
};

constexpr Signature kSigR{{OperandSlot::Rd, OperandSlot::Rs1, OperandSlot::Rs2, OperandSlot::End}};
constexpr Signature kSigI{{OperandSlot::Rd, OperandSlot::Rs1, OperandSlot::Imm, OperandSlot::End}};
constexpr Signature kSigU{{OperandSlot::Rd, OperandSlot::Imm, OperandSlot::End}};
constexpr Signature kSigLoad{{OperandSlot::Rd, OperandSlot::Imm, OperandSlot::Rs1, OperandSlot::End}};
constexpr Signature kSigStore{{OperandSlot::Rs2, OperandSlot::Imm, OperandSlot::Rs1, OperandSlot::End}};
constexpr Signature kSigBranch{{OperandSlot::Rs1, OperandSlot::Rs2, OperandSlot::Imm, OperandSlot::End}};
constexpr Signature kSigJal{{OperandSlot::Rd, OperandSlot::Imm, OperandSlot::End}};
constexpr Signature kSigJalr{{OperandSlot::Rd, OperandSlot::Imm, OperandSlot::Rs1, OperandSlot::End}};
constexpr Signature kSigCsrReg{{OperandSlot::Rd, OperandSlot::CsrName, OperandSlot::Rs1, OperandSlot::End}};
constexpr Signature kSigCsrImm{{OperandSlot::Rd, OperandSlot::CsrName, OperandSlot::Imm, OperandSlot::End}};
constexpr Signature kSigNone{{OperandSlot::End}};
constexpr Signature kSigLi{{OperandSlot::Rd, OperandSlot::Imm, OperandSlot::End}};
constexpr Signature kSigMv{{OperandSlot::Rd, OperandSlot::Rs1, OperandSlot::End}};
constexpr Signature kSigJ{{OperandSlot::Imm, OperandSlot::End}};
constexpr Signature kSigCsrrAlias{{OperandSlot::Rd, OperandSlot::CsrName, OperandSlot::End}};
constexpr Signature kSigCsrwAlias{{OperandSlot::CsrName, OperandSlot::Rs1, OperandSlot::End}};

const std::array<MnemonicInfo, kMnemonicCount> kMnemonics = {{
    {"add", kSigR}, {"sub", kSigR}, {"sll", kSigR}, {"slt", kSigR},
    {"sltu", kSigR}, {"xor", kSigR}, {"srl", kSigR}, {"sra", kSigR},
    {"or", kSigR}, {"and", kSigR},
    {"addw", kSigR}, {"subw", kSigR}, {"sllw", kSigR}, {"srlw", kSigR}, {"sraw", kSigR},
    {"addi", kSigI}, {"slti", kSigI}, {"sltiu", kSigI}, {"xori", kSigI},
    {"ori", kSigI}, {"andi", kSigI}, {"slli", kSigI}, {"srli", kSigI}, {"srai", kSigI},
    {"addiw", kSigI}, {"slliw", kSigI}, {"srliw", kSigI}, {"sraiw", kSigI},
    {"lui", kSigU}, {"auipc", kSigU},
    {"lb", kSigLoad}, {"lh", kSigLoad}, {"lw", kSigLoad}, {"ld", kSigLoad},
    {"lbu", kSigLoad}, {"lhu", kSigLoad}, {"lwu", kSigLoad},
    {"sb", kSigStore}, {"sh", kSigStore}, {"sw", kSigStore}, {"sd", kSigStore},
    {"beq", kSigBranch}, {"bne", kSigBranch}, {"blt", kSigBranch},
    {"bge", kSigBranch}, {"bltu", kSigBranch}, {"bgeu", kSigBranch},
    {"jal", kSigJal}, {"jalr", kSigJalr},
    {"csrrw", kSigCsrReg}, {"csrrs", kSigCsrReg}, {"csrrc", kSigCsrReg},
    {"csrrwi", kSigCsrImm}, {"csrrsi", kSigCsrImm}, {"csrrci", kSigCsrImm},
    {"mret", kSigNone}, {"sret", kSigNone}, {"ecall", kSigNone},
    {"wfi", kSigNone}, {"fence", kSigNone},
    {"sfence.vma", kSigNone}, {"hfence.gvma", kSigNone},
    {"li", kSigLi},
    {"nop", kSigNone}, {"ret", kSigNone}, {"mv", kSigMv}, {"j", kSigJ},
    {"csrr", kSigCsrrAlias}, {"csrw", kSigCsrwAlias},
    {"csrs", kSigCsrwAlias}, {"csrc", kSigCsrwAlias},
}};

struct CsrInfo {
    std::string_view name;
    uint16_t addr;
};

const std::array<CsrInfo, kCsrCount> kCsrs = {{
    {"mstatus", 0x300}, {"medeleg", 0x302}, {"mideleg", 0x303},
    {"mie", 0x304}, {"mtvec", 0x305}, {"mepc", 0x341}, {"mcause", 0x342},
    {"mtval", 0x343}, {"mip", 0x344},
    {"pmpcfg0", 0x3A0}, {"pmpaddr0", 0x3B0},
    {"sstatus", 0x100}, {"sie", 0x104}, {"stvec", 0x105}, {"sepc", 0x141},
    {"scause", 0x142}, {"stval", 0x143}, {"sip", 0x144},
}};

constexpr int64_t sext(uint64_t value, unsigned bits) {
    const unsigned shift = 64 - bits;
    return static_cast<int64_t>(value << shift) >> shift;
}

bool is_real(Mnemonic m) {
    return static_cast<size_t>(m) < kRealMnemonicCount;
}

}  // namespace

size_t Signature::size() const {
    size_t n = 0;
    while (n < 5 && slots[n] != OperandSlot::End) ++n;
    return n;
}

uint16_t csr_address(Csr c) { return kCsrs[static_cast<size_t>(c)].addr; }
std::string_view csr_name(Csr c) { return kCsrs[static_cast<size_t>(c)].name; }

std::optional<Csr> csr_from_name(std::string_view name) {
    for (size_t i = 0; i < kCsrCount; ++i)
        if (kCsrs[i].name == name) return static_cast<Csr>(i);
    return std::nullopt;
}

std::string_view mnemonic_name(Mnemonic m) {
    return kMnemonics[static_cast<size_t>(m)].name;
}

const Signature& signature_of(Mnemonic m) {
    return kMnemonics[static_cast<size_t>(m)].sig;
}

std::optional<ImmRange> imm_range_of(Mnemonic m) {
    switch (m) {
        case Mnemonic::Addi: case Mnemonic::Slti: case Mnemonic::Sltiu:
        case Mnemonic::Xori: case Mnemonic::Ori: case Mnemonic::Andi:
        case Mnemonic::Addiw: case Mnemonic::Jalr:
        case Mnemonic::Lb: case Mnemonic::Lh: case Mnemonic::Lw: case Mnemonic::Ld:
        case Mnemonic::Lbu: case Mnemonic::Lhu: case Mnemonic::Lwu:
        case Mnemonic::Sb: case Mnemonic::Sh: case Mnemonic::Sw: case Mnemonic::Sd:
            return ImmRange{-2048, 2047, 1};
        case Mnemonic::Slli: case Mnemonic::Srli: case Mnemonic::Srai:
            return ImmRange{0, 63, 1};
        case Mnemonic::Slliw: case Mnemonic::Srliw: case Mnemonic::Sraiw:
            return ImmRange{0, 31, 1};
        case Mnemonic::Lui: case Mnemonic::Auipc:
            return ImmRange{0, 0xFFFFF, 1};
        case Mnemonic::Beq: case Mnemonic::Bne: case Mnemonic::Blt:
        case Mnemonic::Bge: case Mnemonic::Bltu: case Mnemonic::Bgeu:
            return ImmRange{-4096, 4094, 2};
        case Mnemonic::Jal: case Mnemonic::J:
            return ImmRange{-1048576, 1048574, 2};
        case Mnemonic::Csrrwi: case Mnemonic::Csrrsi: case Mnemonic::Csrrci:
            return ImmRange{0, 31, 1};
        case Mnemonic::Li:
            return ImmRange{INT64_MIN, INT64_MAX, 1};
        default:
            return std::nullopt;
    }
}

bool Instruction::operator==(const Instruction& other) const {
    if (mnemonic != other.mnemonic) return false;
    const Signature& sig = signature_of(mnemonic);
    for (size_t i = 0; i < sig.size(); ++i) {
        switch (sig.slots[i]) {
            case OperandSlot::Rd: if (rd != other.rd) return false; break;
            case OperandSlot::Rs1: if (rs1 != other.rs1) return false; break;
            case OperandSlot::Rs2: if (rs2 != other.rs2) return false; break;
            case OperandSlot::CsrName: if (csr != other.csr) return false; break;
            case OperandSlot::Imm: if (imm != other.imm) return false; break;
            case OperandSlot::End: break;
        }
    }
    return true;
}

SubsetConfig SubsetConfig::standard() {
    SubsetConfig cfg;
    for (size_t i = 0; i < kMnemonicCount; ++i)
        cfg.mnemonics.emplace_back(kMnemonics[i].name);
    for (size_t i = 0; i < kCsrCount; ++i)
        cfg.csrs.emplace_back(kCsrs[i].name);
    return cfg;
}

std::string_view parse_error_name(ParseError e) {
    switch (e) {
        case ParseError::None: return "None";
        case ParseError::UnknownMnemonic: return "UnknownMnemonic";
        case ParseError::UnknownRegister: return "UnknownRegister";
        case ParseError::UnknownCsr: return "UnknownCsr";
        case ParseError::BadImmediate: return "BadImmediate";
        case ParseError::ImmNotInPalette: return "ImmNotInPalette";
        case ParseError::ImmOutOfRange: return "ImmOutOfRange";
        case ParseError::BadOperandCount: return "BadOperandCount";
        case ParseError::BadOperandKind: return "BadOperandKind";
        case ParseError::ExpectedOpcode: return "ExpectedOpcode";
        case ParseError::TrailingTokens: return "TrailingTokens";
        case ParseError::EmptyLine: return "EmptyLine";
    }
    return "?";
}

std::optional<unsigned> parse_register(std::string_view name) {
    static const std::unordered_map<std::string_view, unsigned> aliases = {
        {"zero", 0}, {"ra", 1}, {"sp", 2}, {"gp", 3}, {"tp", 4},
        {"t0", 5}, {"t1", 6}, {"t2", 7}, {"s0", 8}, {"fp", 8}, {"s1", 9},
        {"a0", 10}, {"a1", 11}, {"a2", 12}, {"a3", 13}, {"a4", 14},
        {"a5", 15}, {"a6", 16}, {"a7", 17},
        {"s2", 18}, {"s3", 19}, {"s4", 20}, {"s5", 21}, {"s6", 22},
        {"s7", 23}, {"s8", 24}, {"s9", 25}, {"s10", 26}, {"s11", 27},
        {"t3", 28}, {"t4", 29}, {"t5", 30}, {"t6", 31},
    };
    if (name.size() >= 2 && name[0] == 'x') {
        unsigned v = 0;
        auto [p, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), v);
        if (ec == std::errc{} && p == name.data() + name.size() && v < 32) return v;
        return std::nullopt;
    }
    auto it = aliases.find(name);
    if (it != aliases.end()) return it->second;
    return std::nullopt;
}

// --- vocabulary ---

Vocabulary Vocabulary::build(const SubsetConfig& config) {
    Vocabulary v;
    std::unordered_set<std::string> seen;

    for (const auto& name : config.mnemonics) {
        if (!seen.insert(name).second)
            throw VocabError("duplicate mnemonic in subset config: " + name);
        Mnemonic m = Mnemonic::Count;
        for (size_t i = 0; i < kMnemonicCount; ++i)
            if (kMnemonics[i].name == name) m = static_cast<Mnemonic>(i);
        if (m == Mnemonic::Count)
            throw VocabError("unsupported mnemonic in subset config: " + name);
        v.mnemonics_.push_back(m);
        v.tokens_.push_back({name, TokenKind::Opcode, m, 0, Csr::Count, 0});
    }
    for (unsigned r = 0; r < 32; ++r) {
        std::string name = "x" + std::to_string(r);
        v.tokens_.push_back({name, TokenKind::Reg, Mnemonic::Count,
                             static_cast<uint8_t>(r), Csr::Count, 0});
    }
    for (const auto& name : config.csrs) {
        if (!seen.insert(name).second)
            throw VocabError("duplicate CSR in subset config: " + name);
        auto c = csr_from_name(name);
        if (!c) throw VocabError("unsupported CSR in subset config: " + name);
        v.csrs_.push_back(*c);
        v.tokens_.push_back({name, TokenKind::Csr, Mnemonic::Count, 0, *c, 0});
    }

    // Immediate palette: small constants, 2^k and 2^k-1 with complements,
    // sign-extension boundaries, then seeded filler up to the configured size.
    std::vector<int64_t> palette;
    std::unordered_set<int64_t> in_palette;
    auto add = [&](int64_t value) {
        if (in_palette.insert(value).second) palette.push_back(value);
    };
    for (int64_t c : {int64_t{0}, int64_t{1}, int64_t{-1}, int64_t{2}, int64_t{-2}}) add(c);
    for (unsigned k = 0; k < 64; ++k) {
        const int64_t p = static_cast<int64_t>(uint64_t{1} << k);
        const int64_t pm1 = static_cast<int64_t>((uint64_t{1} << k) - 1);
        add(p);
        add(pm1);
        add(~p);
        add(~pm1);
    }
    for (int64_t c : {int64_t{0x7F}, int64_t{0x80}, int64_t{0xFF}, int64_t{-0x80},
                      int64_t{0x7FF}, int64_t{0x800}, int64_t{-0x800},
                      int64_t{0x7FFF}, int64_t{0x8000}, int64_t{0xFFFF}, int64_t{-0x8000},
                      int64_t{0x7FFFFFFF}, int64_t{0x80000000}, int64_t{0xFFFFFFFF},
                      int64_t{-0x80000000}})
        add(c);
    if (config.imm_palette_size < palette.size())
        throw VocabError("imm_palette_size smaller than the core constant set");
    Xoshiro256pp rng(config.palette_seed);
    while (palette.size() < config.imm_palette_size)
        add(static_cast<int64_t>(rng.next()));

    v.palette_ = palette;
    for (int64_t value : palette) {
        std::string name;
        if (value >= -4096 && value < 4096) {
            name = std::to_string(value);
        } else {
            char buf[32];
            snprintf(buf, sizeof buf, "0x%llx",
                     static_cast<unsigned long long>(static_cast<uint64_t>(value)));
            name = buf;
        }
        v.tokens_.push_back({name, TokenKind::Imm, Mnemonic::Count, 0, Csr::Count, value});
    }

    v.eoi_ = static_cast<TokenId>(v.tokens_.size());
    v.tokens_.push_back({"<eoi>", TokenKind::Eoi, Mnemonic::Count, 0, Csr::Count, 0});

    v.by_mnemonic_.assign(kMnemonicCount, UINT32_MAX);
    v.by_reg_.assign(32, UINT32_MAX);
    v.by_csr_.assign(kCsrCount, UINT32_MAX);
    for (TokenId id = 0; id < v.tokens_.size(); ++id) {
        const TokenInfo& t = v.tokens_[id];
        switch (t.kind) {
            case TokenKind::Opcode: v.by_mnemonic_[static_cast<size_t>(t.mnemonic)] = id; break;
            case TokenKind::Reg: v.by_reg_[t.reg] = id; break;
            case TokenKind::Csr: v.by_csr_[static_cast<size_t>(t.csr)] = id; break;
            default: break;
        }
    }
    return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view surface) const {
    for (TokenId id = 0; id < tokens_.size(); ++id)
        if (tokens_[id].surface == surface) return id;
    return std::nullopt;
}

TokenId Vocabulary::opcode_token(Mnemonic m) const {
    TokenId id = by_mnemonic_[static_cast<size_t>(m)];
    if (id == UINT32_MAX) throw VocabError("mnemonic not in vocabulary");
    return id;
}

bool Vocabulary::has_mnemonic(Mnemonic m) const {
    return by_mnemonic_[static_cast<size_t>(m)] != UINT32_MAX;
}

TokenId Vocabulary::reg_token(unsigned reg) const { return by_reg_[reg]; }

TokenId Vocabulary::csr_token(Csr c) const {
    TokenId id = by_csr_[static_cast<size_t>(c)];
    if (id == UINT32_MAX) throw VocabError("CSR not in vocabulary");
    return id;
}

bool Vocabulary::has_csr(Csr c) const {
    return by_csr_[static_cast<size_t>(c)] != UINT32_MAX;
}

std::optional<TokenId> Vocabulary::imm_token(int64_t value) const {
    // Palette tokens sit in one contiguous id range after opcode/reg/csr.
    const TokenId first = static_cast<TokenId>(tokens_.size() - 1 - palette_.size());
    for (size_t i = 0; i < palette_.size(); ++i)
        if (palette_[i] == value) return first + static_cast<TokenId>(i);
    return std::nullopt;
}

uint64_t Vocabulary::hash() const {
    Fnv1a h;
    for (TokenId id = 0; id < tokens_.size(); ++id) {
        h.update_u64(id);
        h.update_str(tokens_[id].surface);
        h.update_u64(static_cast<uint64_t>(tokens_[id].kind));
        h.update_u64(static_cast<uint64_t>(tokens_[id].imm));
    }
    return h.value();
}

std::string Vocabulary::dump_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (TokenId id = 0; id < tokens_.size(); ++id) {
        const TokenInfo& t = tokens_[id];
        nlohmann::json e;
        e["id"] = id;
        e["surface"] = t.surface;
        switch (t.kind) {
            case TokenKind::Opcode: e["kind"] = "OPCODE"; break;
            case TokenKind::Reg: e["kind"] = "REG"; break;
            case TokenKind::Csr: e["kind"] = "CSR"; break;
            case TokenKind::Imm: e["kind"] = "IMM"; break;
            case TokenKind::Eoi: e["kind"] = "EOI"; break;
        }
        if (t.kind == TokenKind::Imm) {
            char buf[32];
            snprintf(buf, sizeof buf, "0x%016llx",
                     static_cast<unsigned long long>(static_cast<uint64_t>(t.imm)));
            e["constant"] = buf;
        }
        arr.push_back(std::move(e));
    }
    return arr.dump(2) + "\n";
}

// --- text parsing ---

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string& storage) {
    storage.assign(line);
    if (auto pos = storage.find('#'); pos != std::string::npos) storage.resize(pos);
    for (char& c : storage)
        if (c == ',' || c == '(' || c == ')' || c == '\t') c = ' ';
    std::vector<std::string_view> fields;
    std::string_view s = storage;
    size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && s[i] == ' ') ++i;
        size_t j = i;
        while (j < s.size() && s[j] != ' ') ++j;
        if (j > i) fields.push_back(s.substr(i, j - i));
        i = j;
    }
    return fields;
}

std::optional<int64_t> parse_imm_literal(std::string_view text) {
    bool neg = false;
    if (!text.empty() && (text[0] == '-' || text[0] == '+')) {
        neg = text[0] == '-';
        text.remove_prefix(1);
    }
    if (text.empty()) return std::nullopt;
    uint64_t value = 0;
    if (text.size() > 2 && text[0] == '0' && (text[1] == 'x' || text[1] == 'X')) {
        auto [p, ec] = std::from_chars(text.data() + 2, text.data() + text.size(), value, 16);
        if (ec != std::errc{} || p != text.data() + text.size()) return std::nullopt;
    } else {
        auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), value, 10);
        if (ec != std::errc{} || p != text.data() + text.size()) return std::nullopt;
    }
    int64_t v = static_cast<int64_t>(value);
    return neg ? -v : v;
}

// Lowers alias mnemonics to their canonical instruction.
Instruction lower_alias(const Instruction& inst) {
    Instruction out = inst;
    switch (inst.mnemonic) {
        case Mnemonic::Nop:
            out = {Mnemonic::Addi, 0, 0, 0, Csr::Mstatus, 0};
            break;
        case Mnemonic::Ret:
            out = {Mnemonic::Jalr, 0, 1, 0, Csr::Mstatus, 0};
            break;
        case Mnemonic::Mv:
            out.mnemonic = Mnemonic::Addi;
            out.imm = 0;
            break;
        case Mnemonic::J:
            out.mnemonic = Mnemonic::Jal;
            out.rd = 0;
            break;
        case Mnemonic::Csrr:
            out.mnemonic = Mnemonic::Csrrs;
            out.rs1 = 0;
            break;
        case Mnemonic::Csrw:
            out.mnemonic = Mnemonic::Csrrw;
            out.rd = 0;
            break;
        case Mnemonic::Csrs:
            out.mnemonic = Mnemonic::Csrrs;
            out.rd = 0;
            break;
        case Mnemonic::Csrc:
            out.mnemonic = Mnemonic::Csrrc;
            out.rd = 0;
            break;
        default:
            break;
    }
    return out;
}

ParseError check_imm_range(Mnemonic m, int64_t imm) {
    auto range = imm_range_of(m);
    if (!range) return ParseError::None;
    if (imm < range->min || imm > range->max || imm % range->align != 0)
        return ParseError::ImmOutOfRange;
    return ParseError::None;
}

}  // namespace

ParseResult parse_line(std::string_view line) {
    std::string storage;
    auto fields = split_fields(line, storage);
    if (fields.empty()) return {ParseError::EmptyLine};

    Mnemonic m = Mnemonic::Count;
    for (size_t i = 0; i < kMnemonicCount; ++i)
        if (kMnemonics[i].name == fields[0]) m = static_cast<Mnemonic>(i);
    if (m == Mnemonic::Count) return {ParseError::UnknownMnemonic};

    const Signature& sig = signature_of(m);
    if (fields.size() - 1 != sig.size()) return {ParseError::BadOperandCount};

    Instruction inst;
    inst.mnemonic = m;
    for (size_t i = 0; i < sig.size(); ++i) {
        std::string_view f = fields[i + 1];
        switch (sig.slots[i]) {
            case OperandSlot::Rd:
            case OperandSlot::Rs1:
            case OperandSlot::Rs2: {
                auto r = parse_register(f);
                if (!r) return {ParseError::UnknownRegister};
                if (sig.slots[i] == OperandSlot::Rd) inst.rd = static_cast<uint8_t>(*r);
                else if (sig.slots[i] == OperandSlot::Rs1) inst.rs1 = static_cast<uint8_t>(*r);
                else inst.rs2 = static_cast<uint8_t>(*r);
                break;
            }
            case OperandSlot::CsrName: {
                auto c = csr_from_name(f);
                if (!c) return {ParseError::UnknownCsr};
                inst.csr = *c;
                break;
            }
            case OperandSlot::Imm: {
                auto v = parse_imm_literal(f);
                if (!v) return {ParseError::BadImmediate};
                inst.imm = *v;
                break;
            }
            case OperandSlot::End:
                break;
        }
    }
    if (auto err = check_imm_range(m, inst.imm); err != ParseError::None) return {err};
    ParseResult res;
    res.inst = lower_alias(inst);
    return res;
}

std::string render(const Instruction& inst) {
    const Signature& sig = signature_of(inst.mnemonic);
    std::string out{mnemonic_name(inst.mnemonic)};
    auto imm_text = [&]() -> std::string {
        if (inst.imm >= -4096 && inst.imm < 4096) return std::to_string(inst.imm);
        char buf[32];
        snprintf(buf, sizeof buf, "0x%llx",
                 static_cast<unsigned long long>(static_cast<uint64_t>(inst.imm)));
        return buf;
    };
    // Loads/stores render with the offset(base) surface form.
    bool mem_form = sig.size() == 3 && sig.slots[1] == OperandSlot::Imm &&
                    sig.slots[2] == OperandSlot::Rs1 &&
                    inst.mnemonic != Mnemonic::Jalr;
    if (inst.mnemonic == Mnemonic::Jalr) mem_form = true;
    if (mem_form) {
        std::string first = sig.slots[0] == OperandSlot::Rd
                                ? "x" + std::to_string(inst.rd)
                                : "x" + std::to_string(inst.rs2);
        return out + " " + first + ", " + imm_text() + "(x" + std::to_string(inst.rs1) + ")";
    }
    for (size_t i = 0; i < sig.size(); ++i) {
        out += i == 0 ? " " : ", ";
        switch (sig.slots[i]) {
            case OperandSlot::Rd: out += "x" + std::to_string(inst.rd); break;
            case OperandSlot::Rs1: out += "x" + std::to_string(inst.rs1); break;
            case OperandSlot::Rs2: out += "x" + std::to_string(inst.rs2); break;
            case OperandSlot::CsrName: out += std::string(csr_name(inst.csr)); break;
            case OperandSlot::Imm: out += imm_text(); break;
            case OperandSlot::End: break;
        }
    }
    return out;
}

TokenizeResult tokenize(const Vocabulary& vocab, std::string_view line) {
    std::string storage;
    auto fields = split_fields(line, storage);
    if (fields.empty()) return {ParseError::EmptyLine, {}};

    Mnemonic m = Mnemonic::Count;
    for (Mnemonic cand : vocab.mnemonics())
        if (mnemonic_name(cand) == fields[0]) m = cand;
    if (m == Mnemonic::Count) return {ParseError::UnknownMnemonic, {}};

    const Signature& sig = signature_of(m);
    if (fields.size() - 1 != sig.size()) return {ParseError::BadOperandCount, {}};

    TokenizeResult res;
    res.tokens.push_back(vocab.opcode_token(m));
    int64_t imm = 0;
    bool has_imm = false;
    for (size_t i = 0; i < sig.size(); ++i) {
        std::string_view f = fields[i + 1];
        switch (sig.slots[i]) {
            case OperandSlot::Rd:
            case OperandSlot::Rs1:
            case OperandSlot::Rs2: {
                auto r = parse_register(f);
                if (!r) return {ParseError::UnknownRegister, {}};
                res.tokens.push_back(vocab.reg_token(*r));
                break;
            }
            case OperandSlot::CsrName: {
                auto c = csr_from_name(f);
                if (!c || !vocab.has_csr(*c)) return {ParseError::UnknownCsr, {}};
                res.tokens.push_back(vocab.csr_token(*c));
                break;
            }
            case OperandSlot::Imm: {
                auto v = parse_imm_literal(f);
                if (!v) return {ParseError::BadImmediate, {}};
                auto tok = vocab.imm_token(*v);
                if (!tok) return {ParseError::ImmNotInPalette, {}};
                res.tokens.push_back(*tok);
                imm = *v;
                has_imm = true;
                break;
            }
            case OperandSlot::End:
                break;
        }
    }
    if (has_imm)
        if (auto err = check_imm_range(m, imm); err != ParseError::None) return {err, {}};
    return res;
}

ParseResult detokenize(const Vocabulary& vocab, std::span<const TokenId> tokens) {
    if (tokens.empty()) return {ParseError::EmptyLine};
    if (vocab.kind(tokens[0]) != TokenKind::Opcode) return {ParseError::ExpectedOpcode};

    const Mnemonic m = vocab.mnemonic_of(tokens[0]);
    const Signature& sig = signature_of(m);
    if (tokens.size() - 1 < sig.size()) return {ParseError::BadOperandCount};
    if (tokens.size() - 1 > sig.size()) return {ParseError::TrailingTokens};

    Instruction inst;
    inst.mnemonic = m;
    for (size_t i = 0; i < sig.size(); ++i) {
        const TokenId tok = tokens[i + 1];
        const TokenKind k = vocab.kind(tok);
        switch (sig.slots[i]) {
            case OperandSlot::Rd:
            case OperandSlot::Rs1:
            case OperandSlot::Rs2:
                if (k != TokenKind::Reg) return {ParseError::BadOperandKind};
                if (sig.slots[i] == OperandSlot::Rd) inst.rd = static_cast<uint8_t>(vocab.reg_of(tok));
                else if (sig.slots[i] == OperandSlot::Rs1) inst.rs1 = static_cast<uint8_t>(vocab.reg_of(tok));
                else inst.rs2 = static_cast<uint8_t>(vocab.reg_of(tok));
                break;
            case OperandSlot::CsrName:
                if (k != TokenKind::Csr) return {ParseError::BadOperandKind};
                inst.csr = vocab.csr_of(tok);
                break;
            case OperandSlot::Imm:
                if (k != TokenKind::Imm) return {ParseError::BadOperandKind};
                inst.imm = vocab.imm_value(tok);
                break;
            case OperandSlot::End:
                break;
        }
    }
    if (auto err = check_imm_range(m, inst.imm); err != ParseError::None) return {err};
    ParseResult res;
    res.inst = lower_alias(inst);
    return res;
}

std::optional<std::vector<TokenId>> tokens_of(const Vocabulary& vocab,
                                              const Instruction& inst) {
    if (!vocab.has_mnemonic(inst.mnemonic)) return std::nullopt;
    std::vector<TokenId> out;
    out.push_back(vocab.opcode_token(inst.mnemonic));
    const Signature& sig = signature_of(inst.mnemonic);
    for (size_t i = 0; i < sig.size(); ++i) {
        switch (sig.slots[i]) {
            case OperandSlot::Rd: out.push_back(vocab.reg_token(inst.rd)); break;
            case OperandSlot::Rs1: out.push_back(vocab.reg_token(inst.rs1)); break;
            case OperandSlot::Rs2: out.push_back(vocab.reg_token(inst.rs2)); break;
            case OperandSlot::CsrName:
                if (!vocab.has_csr(inst.csr)) return std::nullopt;
                out.push_back(vocab.csr_token(inst.csr));
                break;
            case OperandSlot::Imm: {
                auto tok = vocab.imm_token(inst.imm);
                if (!tok) return std::nullopt;
                out.push_back(*tok);
                break;
            }
            case OperandSlot::End:
                break;
        }
    }
    return out;
}

// --- encoding ---

namespace {

struct EncStub {
    uint32_t opcode;
    uint32_t funct3;
    uint32_t funct7;
};

std::optional<EncStub> r_stub(Mnemonic m) {
    switch (m) {
        case Mnemonic::Add: return EncStub{0x33, 0, 0x00};
        case Mnemonic::Sub: return EncStub{0x33, 0, 0x20};
        case Mnemonic::Sll: return EncStub{0x33, 1, 0x00};
        case Mnemonic::Slt: return EncStub{0x33, 2, 0x00};
        case Mnemonic::Sltu: return EncStub{0x33, 3, 0x00};
        case Mnemonic::Xor: return EncStub{0x33, 4, 0x00};
        case Mnemonic::Srl: return EncStub{0x33, 5, 0x00};
        case Mnemonic::Sra: return EncStub{0x33, 5, 0x20};
        case Mnemonic::Or: return EncStub{0x33, 6, 0x00};
        case Mnemonic::And: return EncStub{0x33, 7, 0x00};
        case Mnemonic::Addw: return EncStub{0x3B, 0, 0x00};
        case Mnemonic::Subw: return EncStub{0x3B, 0, 0x20};
        case Mnemonic::Sllw: return EncStub{0x3B, 1, 0x00};
        case Mnemonic::Srlw: return EncStub{0x3B, 5, 0x00};
        case Mnemonic::Sraw: return EncStub{0x3B, 5, 0x20};
        default: return std::nullopt;
    }
}

std::optional<uint32_t> load_funct3(Mnemonic m) {
    switch (m) {
        case Mnemonic::Lb: return 0;
        case Mnemonic::Lh: return 1;
        case Mnemonic::Lw: return 2;
        case Mnemonic::Ld: return 3;
        case Mnemonic::Lbu: return 4;
        case Mnemonic::Lhu: return 5;
        case Mnemonic::Lwu: return 6;
        default: return std::nullopt;
    }
}

std::optional<uint32_t> store_funct3(Mnemonic m) {
    switch (m) {
        case Mnemonic::Sb: return 0;
        case Mnemonic::Sh: return 1;
        case Mnemonic::Sw: return 2;
        case Mnemonic::Sd: return 3;
        default: return std::nullopt;
    }
}

std::optional<uint32_t> branch_funct3(Mnemonic m) {
    switch (m) {
        case Mnemonic::Beq: return 0;
        case Mnemonic::Bne: return 1;
        case Mnemonic::Blt: return 4;
        case Mnemonic::Bge: return 5;
        case Mnemonic::Bltu: return 6;
        case Mnemonic::Bgeu: return 7;
        default: return std::nullopt;
    }
}

std::optional<uint32_t> csr_funct3(Mnemonic m) {
    switch (m) {
        case Mnemonic::Csrrw: return 1;
        case Mnemonic::Csrrs: return 2;
        case Mnemonic::Csrrc: return 3;
        case Mnemonic::Csrrwi: return 5;
        case Mnemonic::Csrrsi: return 6;
        case Mnemonic::Csrrci: return 7;
        default: return std::nullopt;
    }
}

constexpr uint32_t kWordEcall = 0x00000073;
constexpr uint32_t kWordMret = 0x30200073;
constexpr uint32_t kWordSret = 0x10200073;
constexpr uint32_t kWordWfi = 0x10500073;
constexpr uint32_t kWordFence = 0x0FF0000F;
constexpr uint32_t kWordSfenceVma = 0x12000073;
constexpr uint32_t kWordHfenceGvma = 0x62000073;

}  // namespace

uint32_t encode(const Instruction& inst) {
    const uint32_t rd = inst.rd, rs1 = inst.rs1, rs2 = inst.rs2;
    const auto uimm = static_cast<uint64_t>(inst.imm);
    if (auto err = check_imm_range(inst.mnemonic, inst.imm); err != ParseError::None)
        throw VocabError("encode: immediate out of field range for " +
                         std::string(mnemonic_name(inst.mnemonic)));
    if (auto st = r_stub(inst.mnemonic))
        return st->funct7 << 25 | rs2 << 20 | rs1 << 15 | st->funct3 << 12 | rd << 7 | st->opcode;
    switch (inst.mnemonic) {
        case Mnemonic::Addi: case Mnemonic::Slti: case Mnemonic::Sltiu:
        case Mnemonic::Xori: case Mnemonic::Ori: case Mnemonic::Andi: {
            uint32_t f3 = 0;
            switch (inst.mnemonic) {
                case Mnemonic::Addi: f3 = 0; break;
                case Mnemonic::Slti: f3 = 2; break;
                case Mnemonic::Sltiu: f3 = 3; break;
                case Mnemonic::Xori: f3 = 4; break;
                case Mnemonic::Ori: f3 = 6; break;
                default: f3 = 7; break;
            }
            return static_cast<uint32_t>(uimm & 0xFFF) << 20 | rs1 << 15 | f3 << 12 | rd << 7 | 0x13;
        }
        case Mnemonic::Addiw:
            return static_cast<uint32_t>(uimm & 0xFFF) << 20 | rs1 << 15 | rd << 7 | 0x1B;
        case Mnemonic::Slli:
            return static_cast<uint32_t>(uimm & 0x3F) << 20 | rs1 << 15 | 1u << 12 | rd << 7 | 0x13;
        case Mnemonic::Srli:
            return static_cast<uint32_t>(uimm & 0x3F) << 20 | rs1 << 15 | 5u << 12 | rd << 7 | 0x13;
        case Mnemonic::Srai:
            return 0x10u << 26 | static_cast<uint32_t>(uimm & 0x3F) << 20 | rs1 << 15 | 5u << 12 | rd << 7 | 0x13;
        case Mnemonic::Slliw:
            return static_cast<uint32_t>(uimm & 0x1F) << 20 | rs1 << 15 | 1u << 12 | rd << 7 | 0x1B;
        case Mnemonic::Srliw:
            return static_cast<uint32_t>(uimm & 0x1F) << 20 | rs1 << 15 | 5u << 12 | rd << 7 | 0x1B;
        case Mnemonic::Sraiw:
            return 0x20u << 25 | static_cast<uint32_t>(uimm & 0x1F) << 20 | rs1 << 15 | 5u << 12 | rd << 7 | 0x1B;
        case Mnemonic::Lui:
            return static_cast<uint32_t>(uimm & 0xFFFFF) << 12 | rd << 7 | 0x37;
        case Mnemonic::Auipc:
            return static_cast<uint32_t>(uimm & 0xFFFFF) << 12 | rd << 7 | 0x17;
        case Mnemonic::Jal: {
            const uint32_t imm = static_cast<uint32_t>(uimm);
            uint32_t w = 0x6F | rd << 7;
            w |= ((imm >> 20) & 1) << 31;
            w |= ((imm >> 1) & 0x3FF) << 21;
            w |= ((imm >> 11) & 1) << 20;
            w |= ((imm >> 12) & 0xFF) << 12;
            return w;
        }
        case Mnemonic::Jalr:
            return static_cast<uint32_t>(uimm & 0xFFF) << 20 | rs1 << 15 | rd << 7 | 0x67;
        case Mnemonic::Mret: return kWordMret;
        case Mnemonic::Sret: return kWordSret;
        case Mnemonic::Ecall: return kWordEcall;
        case Mnemonic::Wfi: return kWordWfi;
        case Mnemonic::Fence: return kWordFence;
        case Mnemonic::SfenceVma: return kWordSfenceVma;
        case Mnemonic::HfenceGvma: return kWordHfenceGvma;
        default:
            break;
    }
    if (auto f3 = load_funct3(inst.mnemonic))
        return static_cast<uint32_t>(uimm & 0xFFF) << 20 | rs1 << 15 | *f3 << 12 | rd << 7 | 0x03;
    if (auto f3 = store_funct3(inst.mnemonic)) {
        const uint32_t imm = static_cast<uint32_t>(uimm);
        return ((imm >> 5) & 0x7F) << 25 | rs2 << 20 | rs1 << 15 | *f3 << 12 | (imm & 0x1F) << 7 | 0x23;
    }
    if (auto f3 = branch_funct3(inst.mnemonic)) {
        const uint32_t imm = static_cast<uint32_t>(uimm);
        uint32_t w = 0x63 | *f3 << 12 | rs1 << 15 | rs2 << 20;
        w |= ((imm >> 12) & 1) << 31;
        w |= ((imm >> 5) & 0x3F) << 25;
        w |= ((imm >> 1) & 0xF) << 8;
        w |= ((imm >> 11) & 1) << 7;
        return w;
    }
    if (auto f3 = csr_funct3(inst.mnemonic)) {
        const uint32_t addr = csr_address(inst.csr);
        const uint32_t field = *f3 >= 5 ? static_cast<uint32_t>(uimm & 0x1F) : rs1;
        return addr << 20 | field << 15 | *f3 << 12 | rd << 7 | 0x73;
    }
    throw VocabError("encode: not an encodable instruction: " +
                     std::string(mnemonic_name(inst.mnemonic)));
}

std::optional<Instruction> decode(uint32_t word) {
    Instruction inst;
    const uint32_t opcode = word & 0x7F;
    const uint32_t rd = (word >> 7) & 0x1F;
    const uint32_t f3 = (word >> 12) & 7;
    const uint32_t rs1 = (word >> 15) & 0x1F;
    const uint32_t rs2 = (word >> 20) & 0x1F;
    const uint32_t f7 = word >> 25;
    inst.rd = static_cast<uint8_t>(rd);
    inst.rs1 = static_cast<uint8_t>(rs1);
    inst.rs2 = static_cast<uint8_t>(rs2);

    auto itype_imm = [&] { return sext(word >> 20, 12); };

    switch (opcode) {
        case 0x33: case 0x3B:
            for (size_t i = 0; i < kRealMnemonicCount; ++i) {
                auto st = r_stub(static_cast<Mnemonic>(i));
                if (st && st->opcode == opcode && st->funct3 == f3 && st->funct7 == f7) {
                    inst.mnemonic = static_cast<Mnemonic>(i);
                    return inst;
                }
            }
            return std::nullopt;
        case 0x13: {
            inst.imm = itype_imm();
            switch (f3) {
                case 0: inst.mnemonic = Mnemonic::Addi; return inst;
                case 2: inst.mnemonic = Mnemonic::Slti; return inst;
                case 3: inst.mnemonic = Mnemonic::Sltiu; return inst;
                case 4: inst.mnemonic = Mnemonic::Xori; return inst;
                case 6: inst.mnemonic = Mnemonic::Ori; return inst;
                case 7: inst.mnemonic = Mnemonic::Andi; return inst;
                case 1:
                    if ((word >> 26) != 0) return std::nullopt;
                    inst.mnemonic = Mnemonic::Slli;
                    inst.imm = (word >> 20) & 0x3F;
                    return inst;
                case 5: {
                    const uint32_t f6 = word >> 26;
                    if (f6 == 0x00) inst.mnemonic = Mnemonic::Srli;
                    else if (f6 == 0x10) inst.mnemonic = Mnemonic::Srai;
                    else return std::nullopt;
                    inst.imm = (word >> 20) & 0x3F;
                    return inst;
                }
            }
            return std::nullopt;
        }
        case 0x1B: {
            switch (f3) {
                case 0:
                    inst.mnemonic = Mnemonic::Addiw;
                    inst.imm = itype_imm();
                    return inst;
                case 1:
                    if (f7 != 0) return std::nullopt;
                    inst.mnemonic = Mnemonic::Slliw;
                    inst.imm = rs2;
                    return inst;
                case 5:
                    if (f7 == 0x00) inst.mnemonic = Mnemonic::Srliw;
                    else if (f7 == 0x20) inst.mnemonic = Mnemonic::Sraiw;
                    else return std::nullopt;
                    inst.imm = rs2;
                    return inst;
            }
            return std::nullopt;
        }
        case 0x37: case 0x17:
            inst.mnemonic = opcode == 0x37 ? Mnemonic::Lui : Mnemonic::Auipc;
            inst.imm = (word >> 12) & 0xFFFFF;
            return inst;
        case 0x03: {
            static constexpr Mnemonic map[8] = {Mnemonic::Lb, Mnemonic::Lh, Mnemonic::Lw,
                                                Mnemonic::Ld, Mnemonic::Lbu, Mnemonic::Lhu,
                                                Mnemonic::Lwu, Mnemonic::Count};
            if (map[f3] == Mnemonic::Count) return std::nullopt;
            inst.mnemonic = map[f3];
            inst.imm = itype_imm();
            return inst;
        }
        case 0x23: {
            static constexpr Mnemonic map[8] = {Mnemonic::Sb, Mnemonic::Sh, Mnemonic::Sw,
                                                Mnemonic::Sd, Mnemonic::Count, Mnemonic::Count,
                                                Mnemonic::Count, Mnemonic::Count};
            if (map[f3] == Mnemonic::Count) return std::nullopt;
            inst.mnemonic = map[f3];
            inst.imm = sext((f7 << 5) | rd, 12);
            return inst;
        }
        case 0x63: {
            static constexpr Mnemonic map[8] = {Mnemonic::Beq, Mnemonic::Bne, Mnemonic::Count,
                                                Mnemonic::Count, Mnemonic::Blt, Mnemonic::Bge,
                                                Mnemonic::Bltu, Mnemonic::Bgeu};
            if (map[f3] == Mnemonic::Count) return std::nullopt;
            inst.mnemonic = map[f3];
            uint64_t imm = ((word >> 31) & 1) << 12;
            imm |= ((word >> 25) & 0x3F) << 5;
            imm |= ((word >> 8) & 0xF) << 1;
            imm |= ((word >> 7) & 1) << 11;
            inst.imm = sext(imm, 13);
            return inst;
        }
        case 0x6F: {
            inst.mnemonic = Mnemonic::Jal;
            uint64_t imm = ((word >> 31) & 1) << 20;
            imm |= ((word >> 21) & 0x3FF) << 1;
            imm |= ((word >> 20) & 1) << 11;
            imm |= ((word >> 12) & 0xFF) << 12;
            inst.imm = sext(imm, 21);
            return inst;
        }
        case 0x67:
            if (f3 != 0) return std::nullopt;
            inst.mnemonic = Mnemonic::Jalr;
            inst.imm = itype_imm();
            return inst;
        case 0x73: {
            if (f3 == 0) {
                switch (word) {
                    case kWordEcall: inst = {}; inst.mnemonic = Mnemonic::Ecall; return inst;
                    case kWordMret: inst = {}; inst.mnemonic = Mnemonic::Mret; return inst;
                    case kWordSret: inst = {}; inst.mnemonic = Mnemonic::Sret; return inst;
                    case kWordWfi: inst = {}; inst.mnemonic = Mnemonic::Wfi; return inst;
                    case kWordSfenceVma: inst = {}; inst.mnemonic = Mnemonic::SfenceVma; return inst;
                    case kWordHfenceGvma: inst = {}; inst.mnemonic = Mnemonic::HfenceGvma; return inst;
                    default: return std::nullopt;
                }
            }
            if (f3 == 4) return std::nullopt;
            const uint16_t addr = static_cast<uint16_t>(word >> 20);
            Csr csr = Csr::Count;
            for (size_t i = 0; i < kCsrCount; ++i)
                if (kCsrs[i].addr == addr) csr = static_cast<Csr>(i);
            if (csr == Csr::Count) return std::nullopt;
            inst.csr = csr;
            switch (f3) {
                case 1: inst.mnemonic = Mnemonic::Csrrw; break;
                case 2: inst.mnemonic = Mnemonic::Csrrs; break;
                case 3: inst.mnemonic = Mnemonic::Csrrc; break;
                case 5: inst.mnemonic = Mnemonic::Csrrwi; break;
                case 6: inst.mnemonic = Mnemonic::Csrrsi; break;
                case 7: inst.mnemonic = Mnemonic::Csrrci; break;
            }
            if (f3 >= 5) {
                inst.imm = rs1;
                inst.rs1 = 0;
            }
            return inst;
        }
        case 0x0F:
            if (word != kWordFence) return std::nullopt;
            inst = {};
            inst.mnemonic = Mnemonic::Fence;
            return inst;
    }
    return std::nullopt;
}

std::vector<Instruction> expand_li(uint8_t rd, int64_t imm) {
    std::vector<Instruction> out;
    auto fits12 = [](int64_t v) { return v >= -2048 && v <= 2047; };
    auto fits32 = [](int64_t v) {
        return v == static_cast<int64_t>(static_cast<int32_t>(v));
    };

    auto emit32 = [&](int64_t v) {
        if (fits12(v)) {
            out.push_back({Mnemonic::Addi, rd, 0, 0, Csr::Mstatus, v});
            return;
        }
        const int64_t hi = ((v + 0x800) >> 12) & 0xFFFFF;
        const int64_t lo = sext(static_cast<uint64_t>(v) & 0xFFF, 12);
        out.push_back({Mnemonic::Lui, rd, 0, 0, Csr::Mstatus, hi});
        if (lo != 0)
            out.push_back({Mnemonic::Addiw, rd, rd, 0, Csr::Mstatus, lo});
    };

    // Recursive materialization: shift out matched low chunks, lui/addiw the
    // 32-bit head, rebuild with slli/addi.
    auto emit = [&](auto&& self, int64_t v) -> void {
        if (fits32(v)) {
            emit32(v);
            return;
        }
        const int tz = std::countr_zero(static_cast<uint64_t>(v));
        if (tz > 0 && fits32(v >> tz)) {
            emit32(v >> tz);
            out.push_back({Mnemonic::Slli, rd, rd, 0, Csr::Mstatus, tz});
            return;
        }
        const int64_t lo = sext(static_cast<uint64_t>(v) & 0xFFF, 12);
        const int64_t head = (v - lo) >> 12;
        self(self, head);
        out.push_back({Mnemonic::Slli, rd, rd, 0, Csr::Mstatus, 12});
        if (lo != 0)
            out.push_back({Mnemonic::Addi, rd, rd, 0, Csr::Mstatus, lo});
    };

    emit(emit, imm);
    return out;
}

Program assemble(std::span<const Instruction> instructions) {
    Program prog;
    for (const Instruction& inst : instructions) {
        prog.word_index.push_back(static_cast<uint32_t>(prog.words.size()));
        if (inst.mnemonic == Mnemonic::Li) {
            for (const Instruction& part : expand_li(inst.rd, inst.imm))
                prog.words.push_back(encode(part));
        } else {
            prog.words.push_back(encode(inst));
        }
    }
    return prog;
}

AssembleTextResult parse_program(std::string_view text) {
    AssembleTextResult res;
    size_t line_no = 0;
    size_t start = 0;
    while (start <= text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        ++line_no;
        ParseResult pr = parse_line(line);
        if (pr.ok()) {
            res.instructions.push_back(pr.inst);
        } else if (pr.error != ParseError::EmptyLine) {
            res.error = pr.error;
            res.error_line = line_no;
            return res;
        }
        if (end == text.size()) break;
        start = end + 1;
    }
    return res;
}

}  // namespace twinfuzz::isa
