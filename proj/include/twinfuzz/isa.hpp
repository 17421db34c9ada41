#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace twinfuzz::isa {

using TokenId = uint32_t;

enum class TokenKind : uint8_t { Opcode, Reg, Csr, Imm, Eoi };

// Canonical mnemonics. Pseudo forms that carry their own operand signature in
// token space (li, csrs, ...) are first-class vocabulary opcodes; detokenize
// lowers the aliases to canonical instructions, while li survives as a logical
// instruction that the assembler expands.
enum class Mnemonic : uint8_t {
    // R-type
    Add, Sub, Sll, Slt, Sltu, Xor, Srl, Sra, Or, And,
    Addw, Subw, Sllw, Srlw, Sraw,
    // I-type ALU / shifts
    Addi, Slti, Sltiu, Xori, Ori, Andi, Slli, Srli, Srai,
    Addiw, Slliw, Srliw, Sraiw,
    // Upper immediates
    Lui, Auipc,
    // Loads / stores
    Lb, Lh, Lw, Ld, Lbu, Lhu, Lwu,
    Sb, Sh, Sw, Sd,
    // Branches / jumps
    Beq, Bne, Blt, Bge, Bltu, Bgeu,
    Jal, Jalr,
    // Zicsr
    Csrrw, Csrrs, Csrrc, Csrrwi, Csrrsi, Csrrci,
    // System
    Mret, Sret, Ecall, Wfi, Fence, SfenceVma, HfenceGvma,
    // Logical pseudo retained through assembly (one logical instruction)
    Li,
    // Pure aliases, lowered at parse/detokenize time
    Nop, Ret, Mv, J, Csrr, Csrw, Csrs, Csrc,
    Count
};

constexpr size_t kMnemonicCount = static_cast<size_t>(Mnemonic::Count);
constexpr size_t kRealMnemonicCount = static_cast<size_t>(Mnemonic::Li);  // encodable subset

enum class Csr : uint8_t {
    Mstatus, Medeleg, Mideleg, Mie, Mtvec, Mepc, Mcause, Mtval, Mip,
    Pmpcfg0, Pmpaddr0,
    Sstatus, Sie, Stvec, Sepc, Scause, Stval, Sip,
    Count
};

constexpr size_t kCsrCount = static_cast<size_t>(Csr::Count);

uint16_t csr_address(Csr c);
std::string_view csr_name(Csr c);
std::optional<Csr> csr_from_name(std::string_view name);
std::string_view mnemonic_name(Mnemonic m);

// Operand layout of a mnemonic in surface/token order.
enum class OperandSlot : uint8_t { Rd, Rs1, Rs2, CsrName, Imm, End };

// Up to four slots; End-terminated.
struct Signature {
    OperandSlot slots[5];
    size_t size() const;
};

const Signature& signature_of(Mnemonic m);

// Immediate field constraints per mnemonic; detokenize and the assembler both
// enforce these (the "out of field range after palette expansion" error).
struct ImmRange {
    int64_t min;
    int64_t max;
    int64_t align;  // value must be a multiple of this
};
std::optional<ImmRange> imm_range_of(Mnemonic m);

struct Instruction {
    Mnemonic mnemonic = Mnemonic::Nop;
    uint8_t rd = 0;
    uint8_t rs1 = 0;
    uint8_t rs2 = 0;
    Csr csr = Csr::Mstatus;
    int64_t imm = 0;

    bool operator==(const Instruction& other) const;
};

struct SubsetConfig {
    std::vector<std::string> mnemonics;  // surface names
    std::vector<std::string> csrs;
    uint32_t imm_palette_size = 512;
    uint64_t palette_seed = 0x90DEC0DEULL;

    static SubsetConfig standard();
};

enum class ParseError : uint8_t {
    None,
    UnknownMnemonic,
    UnknownRegister,
    UnknownCsr,
    BadImmediate,       // unparseable literal
    ImmNotInPalette,    // tokenize only
    ImmOutOfRange,      // field range after palette expansion
    BadOperandCount,
    BadOperandKind,
    ExpectedOpcode,
    TrailingTokens,
    EmptyLine,
};

std::string_view parse_error_name(ParseError e);

struct ParseResult {
    ParseError error = ParseError::None;
    Instruction inst{};
    bool ok() const { return error == ParseError::None; }
};

class VocabError : public std::exception {
public:
    explicit VocabError(std::string msg) : msg_(std::move(msg)) {}
    const char* what() const noexcept override { return msg_.c_str(); }

private:
    std::string msg_;
};

class Vocabulary {
public:
    static Vocabulary build(const SubsetConfig& config);

    size_t size() const { return tokens_.size(); }
    TokenKind kind(TokenId id) const { return tokens_[id].kind; }
    std::string_view surface(TokenId id) const { return tokens_[id].surface; }
    std::optional<TokenId> find(std::string_view surface) const;

    TokenId opcode_token(Mnemonic m) const;
    bool has_mnemonic(Mnemonic m) const;
    Mnemonic mnemonic_of(TokenId id) const { return tokens_[id].mnemonic; }
    TokenId reg_token(unsigned reg) const;
    unsigned reg_of(TokenId id) const { return tokens_[id].reg; }
    TokenId csr_token(Csr c) const;
    bool has_csr(Csr c) const;
    Csr csr_of(TokenId id) const { return tokens_[id].csr; }
    std::optional<TokenId> imm_token(int64_t value) const;
    int64_t imm_value(TokenId id) const { return tokens_[id].imm; }
    TokenId eoi() const { return eoi_; }

    std::span<const int64_t> palette() const { return palette_; }
    const std::vector<Mnemonic>& mnemonics() const { return mnemonics_; }
    const std::vector<Csr>& csrs() const { return csrs_; }

    uint64_t hash() const;
    std::string dump_json() const;

private:
    struct TokenInfo {
        std::string surface;
        TokenKind kind;
        Mnemonic mnemonic = Mnemonic::Count;
        uint8_t reg = 0;
        Csr csr = Csr::Count;
        int64_t imm = 0;
    };
    std::vector<TokenInfo> tokens_;
    std::vector<int64_t> palette_;
    std::vector<Mnemonic> mnemonics_;
    std::vector<Csr> csrs_;
    TokenId eoi_ = 0;
    // lookup tables
    std::vector<TokenId> by_mnemonic_;
    std::vector<TokenId> by_reg_;
    std::vector<TokenId> by_csr_;
};

// --- text <-> instruction (assembler view; any field-valid immediate) ---

// Parses one canonical assembly line ("addi x1, x2, 8"; register aliases and
// '#' comments accepted). Does not require palette membership.
ParseResult parse_line(std::string_view line);

std::string render(const Instruction& inst);

// --- text <-> tokens (policy view; immediates must be palette members) ---

struct TokenizeResult {
    ParseError error = ParseError::None;
    std::vector<TokenId> tokens;
    bool ok() const { return error == ParseError::None; }
};

TokenizeResult tokenize(const Vocabulary& vocab, std::string_view line);

// Arbitrary token sequences arrive from the policy; errors are data.
ParseResult detokenize(const Vocabulary& vocab, std::span<const TokenId> tokens);

// Token sequence for an instruction (inverse of detokenize for canonical
// forms). Fails only if an immediate is not a palette member.
std::optional<std::vector<TokenId>> tokens_of(const Vocabulary& vocab,
                                              const Instruction& inst);

// --- encoding ---

// Bit-exact RV64I/Zicsr encoding. Precondition: real (encodable) mnemonic
// with field-valid operands; violations throw.
uint32_t encode(const Instruction& inst);

std::optional<Instruction> decode(uint32_t word);

// Canonical expansion of li into lui/addi/slli (and the trivial addi case).
std::vector<Instruction> expand_li(uint8_t rd, int64_t imm);

// Flattens logical instructions to 32-bit words. word_index[i] is the word
// offset of logical instruction i.
struct Program {
    std::vector<uint32_t> words;
    std::vector<uint32_t> word_index;
};
Program assemble(std::span<const Instruction> instructions);

// Multi-line assembly helper used by witness files and the replay verb.
struct AssembleTextResult {
    ParseError error = ParseError::None;
    size_t error_line = 0;
    std::vector<Instruction> instructions;
    bool ok() const { return error == ParseError::None; }
};
AssembleTextResult parse_program(std::string_view text);

// Register alias table exposed for tests ("t0" -> 5 etc.).
std::optional<unsigned> parse_register(std::string_view name);

}  // namespace twinfuzz::isa
