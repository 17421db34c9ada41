#include "twinfuzz/corpus.hpp"

namespace twinfuzz::corpus {

using isa::Mnemonic;
using isa::OperandSlot;

namespace {

bool is_memory(Mnemonic m) {
    return (m >= Mnemonic::Lb && m <= Mnemonic::Sd);
}

bool is_privileged(Mnemonic m) {
    switch (m) {
        case Mnemonic::Csrrw: case Mnemonic::Csrrs: case Mnemonic::Csrrc:
        case Mnemonic::Csrrwi: case Mnemonic::Csrrsi: case Mnemonic::Csrrci:
        case Mnemonic::Csrr: case Mnemonic::Csrw: case Mnemonic::Csrs: case Mnemonic::Csrc:
        case Mnemonic::Mret: case Mnemonic::Sret: case Mnemonic::Ecall:
        case Mnemonic::Wfi: case Mnemonic::SfenceVma: case Mnemonic::HfenceGvma:
            return true;
        default:
            return false;
    }
}

}  // namespace

InstructionSampler::InstructionSampler(const isa::Vocabulary& vocab) : vocab_(&vocab) {
    imm_tokens_.resize(isa::kMnemonicCount);
    for (Mnemonic m : vocab.mnemonics()) {
        (is_privileged(m) ? privileged_ : is_memory(m) ? memory_ : general_).push_back(m);
        if (auto range = isa::imm_range_of(m)) {
            auto& toks = imm_tokens_[static_cast<size_t>(m)];
            for (size_t i = 0; i < vocab.palette().size(); ++i) {
                const int64_t v = vocab.palette()[i];
                if (v >= range->min && v <= range->max && v % range->align == 0) {
                    toks.push_back(*vocab.imm_token(v));
                }
            }
        }
    }
}

std::vector<isa::TokenId> InstructionSampler::sample_instruction_tokens(
    Xoshiro256pp& rng, double privileged_weight, double memory_weight) const {
    for (;;) {
        const double roll = rng.uniform();
        const auto& group = !privileged_.empty() && roll < privileged_weight ? privileged_
                            : !memory_.empty() && roll < privileged_weight + memory_weight
                                ? memory_
                                : general_;
        const Mnemonic m = group[rng.below(group.size())];
        const auto& sig = isa::signature_of(m);
        std::vector<isa::TokenId> tokens;
        tokens.push_back(vocab_->opcode_token(m));
        bool ok = true;
        for (size_t i = 0; i < sig.size() && ok; ++i) {
            switch (sig.slots[i]) {
                case OperandSlot::Rd:
                case OperandSlot::Rs1:
                case OperandSlot::Rs2:
                    tokens.push_back(vocab_->reg_token(static_cast<unsigned>(rng.below(32))));
                    break;
                case OperandSlot::CsrName: {
                    const auto& csrs = vocab_->csrs();
                    tokens.push_back(vocab_->csr_token(csrs[rng.below(csrs.size())]));
                    break;
                }
                case OperandSlot::Imm: {
                    const auto& toks = imm_tokens_[static_cast<size_t>(m)];
                    if (toks.empty()) {
                        ok = false;
                        break;
                    }
                    tokens.push_back(toks[rng.below(toks.size())]);
                    break;
                }
                case OperandSlot::End:
                    break;
            }
        }
        if (ok) return tokens;
    }
}

std::vector<isa::TokenId> InstructionSampler::corpus_stream(uint32_t instruction_count,
                                                            double privileged_weight,
                                                            Xoshiro256pp& rng,
                                                            double memory_weight) const {
    std::vector<isa::TokenId> stream;
    stream.reserve(instruction_count * 5);
    for (uint32_t i = 0; i < instruction_count; ++i) {
        auto tokens = sample_instruction_tokens(rng, privileged_weight, memory_weight);
        stream.insert(stream.end(), tokens.begin(), tokens.end());
        stream.push_back(vocab_->eoi());
    }
    return stream;
}

std::vector<isa::Instruction> InstructionSampler::random_program(uint32_t instruction_count,
                                                                 double privileged_weight,
                                                                 Xoshiro256pp& rng,
                                                                 double memory_weight) const {
    std::vector<isa::Instruction> program;
    program.reserve(instruction_count);
    for (uint32_t i = 0; i < instruction_count; ++i) {
        const auto tokens = sample_instruction_tokens(rng, privileged_weight, memory_weight);
        const auto parsed = isa::detokenize(*vocab_, tokens);
        program.push_back(parsed.inst);
    }
    return program;
}

}  // namespace twinfuzz::corpus
