#pragma once

#include <vector>

#include "twinfuzz/isa.hpp"
#include "twinfuzz/rng.hpp"

namespace twinfuzz::corpus {

// Random well-formed instruction source: pretraining corpus material and the
// random programs used by the differential soundness checks. Instructions are
// drawn mnemonic-first with palette immediates restricted to each mnemonic's
// field range, so every sample is syntactically valid.
class InstructionSampler {
public:
    explicit InstructionSampler(const isa::Vocabulary& vocab);

    // privileged_weight / memory_weight are the probability masses on the
    // CSR/system and load/store groups; the rest goes to ALU/control.
    std::vector<isa::TokenId> sample_instruction_tokens(Xoshiro256pp& rng,
                                                        double privileged_weight,
                                                        double memory_weight = 0.2) const;

    // Flat corpus stream: instruction tokens with an <eoi> after each.
    std::vector<isa::TokenId> corpus_stream(uint32_t instruction_count,
                                            double privileged_weight,
                                            Xoshiro256pp& rng,
                                            double memory_weight = 0.2) const;

    std::vector<isa::Instruction> random_program(uint32_t instruction_count,
                                                 double privileged_weight,
                                                 Xoshiro256pp& rng,
                                                 double memory_weight = 0.2) const;

private:
    const isa::Vocabulary* vocab_;
    std::vector<isa::Mnemonic> privileged_;
    std::vector<isa::Mnemonic> memory_;
    std::vector<isa::Mnemonic> general_;
    // per-mnemonic palette tokens inside the immediate field range
    std::vector<std::vector<isa::TokenId>> imm_tokens_;
};

}  // namespace twinfuzz::corpus
