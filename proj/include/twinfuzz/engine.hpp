#pragma once

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "twinfuzz/arch.hpp"
#include "twinfuzz/corpus.hpp"
#include "twinfuzz/coverage.hpp"
#include "twinfuzz/difftest.hpp"
#include "twinfuzz/dut.hpp"
#include "twinfuzz/fuzzmem.hpp"
#include "twinfuzz/isa.hpp"
#include "twinfuzz/policy.hpp"
#include "twinfuzz/rng.hpp"
#include "twinfuzz/scoring.hpp"

namespace twinfuzz::engine {

struct CampaignConfig {
    uint64_t seed = 1;
    uint32_t workers = 0;  // 0 = hardware concurrency

    // test case shape
    uint32_t blocks_per_testcase = 5;
    uint32_t instructions_per_block = 6;
    uint32_t candidates_per_prefix = 5;
    uint32_t prefixes_per_iteration = 80;
    uint32_t token_cap_per_instruction = 24;

    // execution
    uint64_t fuel = 256;
    double branch_retire_fraction = 0.5;
    arch::ArchConfig arch_cfg;
    arch::BugConfig bugs;
    uint32_t skip_prefix = 0;

    // GRM stage stop rule
    uint32_t grm_iteration_cap = 200;
    uint32_t grm_rolling_window = 10;
    double grm_validity_threshold = 0.6;

    // DUT stage budget: test cases, optionally also generated block
    // instructions (0 disables the instruction cap)
    uint32_t dut_testcase_budget = 2000;
    uint64_t dut_instruction_budget = 0;
    uint32_t dut_iteration_cap = 400;

    scoring::ScoringParams scoring;
    policy::RewardParams reward;

    // policy
    uint32_t context_order = 4;
    double pretrain_lr = 2.0;
    uint32_t pretrain_epochs = 30;
    double refine_lr = 100.0;  // batch-mean preference loss over token-level logits
    double temperature = 1.0;
    double top_p = 0.95;
    uint32_t batch_size = 128;
    double validity_floor = 0.05;

    // memory
    uint32_t memory_window = 10;
    double recency_lambda = 0.9;
    uint32_t retain_per_iteration = 80;

    // pretraining corpus
    uint32_t corpus_instructions = 8000;
    double corpus_privileged_weight = 0.35;
    double corpus_memory_weight = 0.05;

    // mismatch log: full records kept per signature (totals always counted)
    uint32_t mismatch_log_per_signature = 40;

    std::vector<std::string> validate() const;  // empty = ok
};

struct IterationReport {
    uint32_t iteration = 0;
    policy::Stage stage = policy::Stage::Grm;
    uint32_t candidates = 0;
    uint32_t valid = 0;
    uint32_t syntax_dead = 0;
    uint32_t exception_dead = 0;
    uint32_t terminated_dead = 0;
    uint32_t fuel_dead = 0;
    uint32_t underrun_dead = 0;
    uint32_t new_points = 0;
    uint64_t cum_coverage = 0;
    double loss = 0;
    bool has_loss = false;
    uint32_t new_mismatches = 0;
    uint32_t completed = 0;

    double validity_rate() const {
        return candidates ? static_cast<double>(valid) / candidates : 0.0;
    }
    double invalid_rate() const {  // syntactically invalid fraction
        return candidates ? static_cast<double>(syntax_dead) / candidates : 0.0;
    }

    static std::string csv_header();
    std::string csv_row() const;
};

struct CampaignSummary {
    std::vector<IterationReport> reports;
    uint32_t grm_iterations = 0;
    uint32_t dut_iterations = 0;
    uint64_t completed_testcases = 0;
    uint64_t cumulative_coverage = 0;
    uint32_t new_records = 0;
    bool collapsed = false;  // syntactic validity fell through the floor
    std::map<std::string, uint64_t> signature_counts;  // all divergences by signature key
    double pretrain_initial_nll = 0;
    double pretrain_final_nll = 0;
};

// Winner/loser selection cores, exposed for direct testing.
namespace pairing {

struct CandidateView {
    uint32_t prefix_slot = 0;
    uint32_t gen_index = 0;
    bool valid = false;
    int64_t score_nanos = INT64_MIN;
};

// GRM stage: VALID x DEAD, same prefix first, leftovers cross-prefix.
std::vector<std::pair<size_t, size_t>> grm_pairs(std::span<const CandidateView> candidates,
                                                 size_t prefix_count);

// DUT stage: best-score vs worst-score per prefix group; groups whose best
// and worst tie produce nothing.
std::vector<std::pair<size_t, size_t>> dut_pairs(std::span<const CandidateView> candidates,
                                                 size_t prefix_count);

}  // namespace pairing

class EngineError : public std::exception {
public:
    explicit EngineError(std::string msg) : msg_(std::move(msg)) {}
    const char* what() const noexcept override { return msg_.c_str(); }

private:
    std::string msg_;
};

class Engine {
public:
    explicit Engine(CampaignConfig cfg);

    // The corpus sampler keeps a pointer to the engine-owned vocabulary.
    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    const CampaignConfig& config() const { return cfg_; }
    const isa::Vocabulary& vocab() const { return vocab_; }
    policy::Policy& get_policy() { return policy_; }
    const policy::Policy& get_policy() const { return policy_; }
    const fuzzmem::FuzzMemory& memory() const { return memory_; }
    diff::MismatchFilter& filter() { return filter_; }
    const diff::MismatchFilter& filter() const { return filter_; }
    const cov::CoverageSet& cumulative_coverage() const { return cumulative_; }
    const std::vector<diff::MismatchRecord>& new_records() const { return new_records_; }
    const std::map<std::string, uint64_t>& signature_counts() const { return signature_counts_; }
    policy::Stage stage() const { return stage_; }
    uint32_t iteration() const { return iteration_; }
    uint64_t completed_testcases() const { return completed_testcases_; }
    uint64_t generated_instructions() const { return generated_instructions_; }

    void pretrain();
    bool pretrained() const { return pretrained_; }

    IterationReport run_iteration();
    CampaignSummary run_campaign();

    // Seeds the filter before a campaign (triage workflow).
    void set_filter(diff::MismatchFilter filter) { filter_ = std::move(filter); }

    // Full engine state for campaign resume.
    std::string save_checkpoint() const;
    void restore_checkpoint(const std::string& text);

    const std::vector<IterationReport>& reports() const { return reports_; }

private:
    struct PrefixCtx {
        std::vector<isa::TokenId> tokens;
        std::vector<isa::Instruction> program;
        uint32_t depth = 0;
        uint64_t register_seed = 0;
        uint64_t root_id = 0;
        cov::CoverageSet coverage;
    };

    struct Candidate {
        uint32_t prefix_slot = 0;
        uint32_t gen_index = 0;
        std::vector<isa::TokenId> block_tokens;
        bool cap_exceeded = false;
        // evaluation results
        bool syntax_ok = false;
        std::vector<isa::Instruction> block_instrs;
        arch::Classification cls;
        int64_t score_nanos = INT64_MIN;
        cov::CoverageSet coverage{uint32_t{0}};
        std::optional<diff::Divergence> divergence;
        std::string program_text;  // kept only when a divergence was found
        uint32_t skip_prefix = 0;
    };

    std::vector<PrefixCtx> build_prefixes();
    Candidate generate_candidate(const PrefixCtx& prefix, uint32_t slot, uint32_t gen_index);
    void evaluate_candidate(const PrefixCtx& prefix, Candidate& cand) const;
    std::vector<policy::PreferencePair> form_pairs(const std::vector<PrefixCtx>& prefixes,
                                                   std::vector<Candidate>& candidates) const;
    void record_mismatches(const std::vector<PrefixCtx>& prefixes,
                           std::vector<Candidate>& candidates, IterationReport& report);

    bool grm_stage_done() const;
    void switch_to_dut();

    CampaignConfig cfg_;
    isa::Vocabulary vocab_;
    corpus::InstructionSampler sampler_;
    policy::Policy policy_;
    fuzzmem::FuzzMemory memory_;
    scoring::FrequencyMap freq_;
    cov::CoverageSet cumulative_;
    diff::MismatchFilter filter_;

    policy::Stage stage_ = policy::Stage::Grm;
    uint32_t iteration_ = 0;
    uint32_t stage_iteration_ = 0;
    uint64_t completed_testcases_ = 0;       // DUT stage
    uint64_t grm_completed_testcases_ = 0;
    uint64_t generated_instructions_ = 0;    // DUT stage, block instructions
    std::deque<double> rolling_validity_;
    uint64_t next_root_id_ = 0;
    bool pretrained_ = false;
    bool collapsed_ = false;
    double pretrain_initial_nll_ = 0;
    double pretrain_final_nll_ = 0;

    Xoshiro256pp rng_gen_, rng_select_, rng_seed_, rng_mem_;

    std::vector<diff::MismatchRecord> new_records_;
    std::map<std::string, uint64_t> signature_counts_;
    std::map<std::string, uint64_t> logged_per_signature_;
    std::vector<IterationReport> reports_;
};

// Renders logical instructions one per line (the replay/test-case format).
std::string render_program(std::span<const isa::Instruction> program);

// Environment-initialization preamble emitted ahead of every DUT-stage test
// case: seeded delegation masks, mstatus feature bits (endianness, TVM/TW/
// TSR) and an mret into the seeded start privilege. The differential parser
// skips these instructions.
struct Preamble {
    std::vector<isa::Instruction> instructions;
    uint32_t words = 0;  // retired entries to skip in trace comparison
};
Preamble make_preamble(uint64_t register_seed, const arch::ArchConfig& cfg);

}  // namespace twinfuzz::engine
