#include "twinfuzz/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace twinfuzz::engine {

namespace {

void parallel_for(size_t n, uint32_t workers, const std::function<void(size_t)>& fn) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min<uint32_t>(workers, static_cast<uint32_t>(n ? n : 1));
    if (workers <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (uint32_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::string format_rate(double v) {
    char buf[32];
    snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

std::vector<std::string> CampaignConfig::validate() const {
    std::vector<std::string> errors;
    auto require = [&](bool ok, const char* msg) {
        if (!ok) errors.emplace_back(msg);
    };
    require(blocks_per_testcase >= 1, "blocks_per_testcase must be >= 1");
    require(instructions_per_block >= 1, "instructions_per_block must be >= 1");
    require(candidates_per_prefix >= 1, "candidates_per_prefix must be >= 1");
    require(prefixes_per_iteration >= 1, "prefixes_per_iteration must be >= 1");
    require(token_cap_per_instruction >= 2, "token_cap_per_instruction must be >= 2");
    require(fuel >= 1, "fuel must be >= 1");
    require(branch_retire_fraction >= 0 && branch_retire_fraction <= 1,
            "branch_retire_fraction must be in [0,1]");
    require(scoring.valid(), "scoring params need 0 < alpha < beta and factor >= 0");
    require(reward.valid(), "reward params need reward_scale > 0 and margin >= 0");
    require(context_order >= 1, "context_order must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(memory_window >= 1, "memory_window must be >= 1");
    require(recency_lambda > 0 && recency_lambda <= 1, "recency_lambda must be in (0,1]");
    require(retain_per_iteration >= 1, "retain_per_iteration must be >= 1");
    require(corpus_instructions >= 1, "corpus_instructions must be >= 1");
    require(corpus_privileged_weight >= 0 && corpus_memory_weight >= 0 &&
                corpus_privileged_weight + corpus_memory_weight <= 1,
            "corpus group weights must be non-negative and sum to at most 1");
    require(validity_floor >= 0 && validity_floor < 1, "validity_floor must be in [0,1)");
    require(temperature > 0, "temperature must be > 0");
    require(top_p > 0 && top_p <= 1, "top_p must be in (0,1]");
    return errors;
}

std::string IterationReport::csv_header() {
    return "iteration,stage,validity_rate,new_points,cum_coverage,loss,mismatches,"
           "invalid_rate,completed,candidates";
}

std::string IterationReport::csv_row() const {
    std::string out;
    out += std::to_string(iteration);
    out += ',';
    out += stage == policy::Stage::Grm ? "GRM" : "DUT";
    out += ',';
    out += format_rate(validity_rate());
    out += ',';
    out += std::to_string(new_points);
    out += ',';
    out += std::to_string(cum_coverage);
    out += ',';
    if (has_loss) out += format_rate(loss);
    out += ',';
    out += std::to_string(new_mismatches);
    out += ',';
    out += format_rate(invalid_rate());
    out += ',';
    out += std::to_string(completed);
    out += ',';
    out += std::to_string(candidates);
    return out;
}

std::string render_program(std::span<const isa::Instruction> program) {
    std::string out;
    for (const auto& inst : program) {
        out += isa::render(inst);
        out += '\n';
    }
    return out;
}

Preamble make_preamble(uint64_t register_seed, const arch::ArchConfig&) {
    Xoshiro256pp rng(derive_seed(register_seed, 0xE17));

    uint64_t ms = 0;
    const double roll = rng.uniform();
    const uint64_t mpp = roll < 0.5 ? 3 : roll < 0.85 ? 1 : 0;
    ms |= mpp << arch::mstatus::kMppShift;
    if (rng.chance(0.5)) ms |= arch::mstatus::kMbe;
    if (rng.chance(0.5)) ms |= arch::mstatus::kSbe;
    if (rng.chance(0.5)) ms |= arch::mstatus::kSpp;
    if (rng.chance(0.25)) ms |= arch::mstatus::kTvm;
    if (rng.chance(0.25)) ms |= arch::mstatus::kTw;
    if (rng.chance(0.25)) ms |= arch::mstatus::kTsr;

    uint64_t medeleg = 0;
    for (uint8_t c : {arch::cause::kIllegalInstruction, arch::cause::kLoadAccessFault,
                      arch::cause::kStoreAccessFault, arch::cause::kEcallFromU,
                      arch::cause::kEcallFromS})
        if (rng.chance(0.5)) medeleg |= 1ull << c;
    uint64_t mideleg = 0;
    for (unsigned bit : {1u, 5u, 9u})
        if (rng.chance(0.5)) mideleg |= 1ull << bit;
    uint64_t mip = 0;
    for (unsigned bit : {1u, 5u, 9u})
        if (rng.chance(0.5)) mip |= 1ull << bit;

    Preamble pre;
    auto append = [&](const isa::Instruction& inst) { pre.instructions.push_back(inst); };
    using isa::Csr;
    using isa::Mnemonic;
    const uint8_t scratch = 31;
    append({Mnemonic::Li, scratch, 0, 0, Csr::Mstatus, static_cast<int64_t>(ms)});
    append({Mnemonic::Csrrw, 0, scratch, 0, Csr::Mstatus, 0});
    append({Mnemonic::Li, scratch, 0, 0, Csr::Mstatus, static_cast<int64_t>(medeleg)});
    append({Mnemonic::Csrrw, 0, scratch, 0, Csr::Medeleg, 0});
    append({Mnemonic::Li, scratch, 0, 0, Csr::Mstatus, static_cast<int64_t>(mideleg)});
    append({Mnemonic::Csrrw, 0, scratch, 0, Csr::Mideleg, 0});
    append({Mnemonic::Li, scratch, 0, 0, Csr::Mstatus, static_cast<int64_t>(mip)});
    append({Mnemonic::Csrrw, 0, scratch, 0, Csr::Mip, 0});
    // mepc <- first body word (four more preamble words retire after auipc)
    append({Mnemonic::Auipc, scratch, 0, 0, Csr::Mstatus, 0});
    append({Mnemonic::Addi, scratch, scratch, 0, Csr::Mstatus, 16});
    append({Mnemonic::Csrrw, 0, scratch, 0, Csr::Mepc, 0});
    append({Mnemonic::Mret, 0, 0, 0, Csr::Mstatus, 0});

    pre.words = static_cast<uint32_t>(isa::assemble(pre.instructions).words.size());
    return pre;
}

Engine::Engine(CampaignConfig cfg)
    : cfg_(std::move(cfg)),
      vocab_(isa::Vocabulary::build(isa::SubsetConfig::standard())),
      sampler_(vocab_),
      policy_(vocab_.hash(), static_cast<uint32_t>(vocab_.size()), cfg_.context_order),
      memory_(cfg_.memory_window, cfg_.recency_lambda),
      freq_(),
      cumulative_(),
      rng_gen_(derive_seed(cfg_.seed, 1)),
      rng_select_(derive_seed(cfg_.seed, 2)),
      rng_seed_(derive_seed(cfg_.seed, 3)),
      rng_mem_(derive_seed(cfg_.seed, 4)) {
    const auto errors = cfg_.validate();
    if (!errors.empty()) throw EngineError("invalid campaign config: " + errors.front());
}

void Engine::pretrain() {
    Xoshiro256pp corpus_rng(derive_seed(cfg_.seed, 5));
    const auto stream = sampler_.corpus_stream(cfg_.corpus_instructions,
                                               cfg_.corpus_privileged_weight, corpus_rng,
                                               cfg_.corpus_memory_weight);
    const auto stats = policy_.pretrain(stream, cfg_.pretrain_epochs, cfg_.pretrain_lr);
    pretrain_initial_nll_ = stats.initial_nll;
    pretrain_final_nll_ = stats.final_nll;
    pretrained_ = true;
}

std::vector<Engine::PrefixCtx> Engine::build_prefixes() {
    std::vector<PrefixCtx> out;
    out.reserve(cfg_.prefixes_per_iteration);
    if (memory_.empty()) {
        // Cold start: fresh roots sampled from the empty context.
        for (uint32_t i = 0; i < cfg_.prefixes_per_iteration; ++i) {
            PrefixCtx p;
            p.register_seed = rng_seed_.next();
            p.root_id = next_root_id_++;
            p.coverage = cov::CoverageSet();
            out.push_back(std::move(p));
        }
    } else {
        for (uint32_t i = 0; i < cfg_.prefixes_per_iteration; ++i) {
            const fuzzmem::StoredBlock& b = memory_.sample_block(rng_mem_);
            PrefixCtx p;
            p.tokens = b.tokens;
            p.program = b.program;
            p.depth = b.depth;
            p.register_seed = b.register_seed;
            p.root_id = b.root_id;
            p.coverage = b.coverage;
            out.push_back(std::move(p));
        }
    }
    return out;
}

Engine::Candidate Engine::generate_candidate(const PrefixCtx& prefix, uint32_t slot,
                                             uint32_t gen_index) {
    Candidate cand;
    cand.prefix_slot = slot;
    cand.gen_index = gen_index;
    std::vector<isa::TokenId> context = prefix.tokens;
    // cold start: anchor the empty context at an instruction boundary
    if (context.empty()) context.push_back(vocab_.eoi());
    uint32_t eois = 0;
    uint32_t run_len = 0;
    while (eois < cfg_.instructions_per_block) {
        const isa::TokenId t =
            policy_.sample_next(context, cfg_.temperature, rng_gen_, cfg_.top_p);
        context.push_back(t);
        cand.block_tokens.push_back(t);
        if (t == vocab_.eoi()) {
            ++eois;
            run_len = 0;
        } else if (++run_len > cfg_.token_cap_per_instruction) {
            cand.cap_exceeded = true;
            break;
        }
    }
    return cand;
}

void Engine::evaluate_candidate(const PrefixCtx& prefix, Candidate& cand) const {
    cand.syntax_ok = !cand.cap_exceeded;
    std::vector<isa::Instruction> block;
    size_t start = 0;
    uint32_t eois = 0;
    for (size_t i = 0; i < cand.block_tokens.size() && cand.syntax_ok; ++i) {
        if (cand.block_tokens[i] != vocab_.eoi()) continue;
        const auto run = std::span(cand.block_tokens).subspan(start, i - start);
        const auto parsed = isa::detokenize(vocab_, run);
        if (!parsed.ok()) {
            cand.syntax_ok = false;
            break;
        }
        block.push_back(parsed.inst);
        start = i + 1;
        ++eois;
    }
    if (start != cand.block_tokens.size() || eois != cfg_.instructions_per_block)
        cand.syntax_ok = false;
    if (!cand.syntax_ok) {
        cand.cls = {false, arch::DeadReason::Syntax};
        cand.score_nanos = INT64_MIN;
        return;
    }
    cand.block_instrs = std::move(block);

    if (stage_ == policy::Stage::Grm) {
        std::vector<isa::Instruction> full = prefix.program;
        full.insert(full.end(), cand.block_instrs.begin(), cand.block_instrs.end());
        const isa::Program prog = isa::assemble(full);
        auto res = arch::run_block(arch::reset(prefix.register_seed, cfg_.arch_cfg), prog,
                                   cfg_.fuel, cfg_.arch_cfg);
        cand.cls = arch::classify_block(res, true, prog.words.size(),
                                        cfg_.branch_retire_fraction);
        return;
    }

    // DUT stage: every test case runs behind its seeded environment preamble.
    const Preamble pre = make_preamble(prefix.register_seed, cfg_.arch_cfg);
    std::vector<isa::Instruction> full = pre.instructions;
    full.insert(full.end(), prefix.program.begin(), prefix.program.end());
    full.insert(full.end(), cand.block_instrs.begin(), cand.block_instrs.end());
    const isa::Program prog = isa::assemble(full);
    const uint32_t skip = pre.words + cfg_.skip_prefix;

    auto dut = dut::dut_run_block(arch::reset(prefix.register_seed, cfg_.arch_cfg), prog,
                                  cfg_.fuel, cfg_.bugs, cfg_.arch_cfg);
    auto grm = arch::run_block(arch::reset(prefix.register_seed, cfg_.arch_cfg), prog,
                               cfg_.fuel, cfg_.arch_cfg);
    cand.cls = arch::classify_block(dut.result, true, prog.words.size(),
                                    cfg_.branch_retire_fraction);
    cand.coverage = std::move(dut.coverage);
    cand.score_nanos =
        scoring::score_transition(prefix.coverage, cand.coverage, freq_, cfg_.scoring).nanos;

    cand.program_text = render_program(full);
    cand.skip_prefix = skip;
    const uint64_t hash = diff::program_hash(cand.program_text, prefix.register_seed);
    cand.divergence = diff::compare_traces({grm.trace, hash}, {dut.result.trace, hash}, skip);
    if (!cand.divergence) cand.program_text.clear();
}

namespace pairing {

std::vector<std::pair<size_t, size_t>> grm_pairs(std::span<const CandidateView> candidates,
                                                 size_t prefix_count) {
    std::vector<std::pair<size_t, size_t>> pairs;
    std::vector<size_t> spare_winners, spare_losers;
    for (size_t slot = 0; slot < prefix_count; ++slot) {
        std::vector<size_t> winners, losers;
        for (size_t i = 0; i < candidates.size(); ++i) {
            if (candidates[i].prefix_slot != slot) continue;
            (candidates[i].valid ? winners : losers).push_back(i);
        }
        const size_t n = std::min(winners.size(), losers.size());
        for (size_t i = 0; i < n; ++i) pairs.emplace_back(winners[i], losers[i]);
        for (size_t i = n; i < winners.size(); ++i) spare_winners.push_back(winners[i]);
        for (size_t i = n; i < losers.size(); ++i) spare_losers.push_back(losers[i]);
    }
    const size_t n = std::min(spare_winners.size(), spare_losers.size());
    for (size_t i = 0; i < n; ++i) pairs.emplace_back(spare_winners[i], spare_losers[i]);
    return pairs;
}

std::vector<std::pair<size_t, size_t>> dut_pairs(std::span<const CandidateView> candidates,
                                                 size_t prefix_count) {
    std::vector<std::pair<size_t, size_t>> pairs;
    for (size_t slot = 0; slot < prefix_count; ++slot) {
        ssize_t best = -1, worst = -1;
        for (size_t i = 0; i < candidates.size(); ++i) {
            if (candidates[i].prefix_slot != slot) continue;
            if (best < 0 || candidates[i].score_nanos > candidates[best].score_nanos)
                best = static_cast<ssize_t>(i);
            if (worst < 0 || candidates[i].score_nanos < candidates[worst].score_nanos)
                worst = static_cast<ssize_t>(i);
        }
        if (best < 0 || worst < 0) continue;
        if (candidates[best].score_nanos <= candidates[worst].score_nanos) continue;
        pairs.emplace_back(best, worst);
    }
    return pairs;
}

}  // namespace pairing

std::vector<policy::PreferencePair> Engine::form_pairs(
    const std::vector<PrefixCtx>& prefixes, std::vector<Candidate>& candidates) const {
    std::vector<pairing::CandidateView> views;
    views.reserve(candidates.size());
    for (const auto& c : candidates)
        views.push_back({c.prefix_slot, c.gen_index, c.cls.valid, c.score_nanos});

    const auto index_pairs = stage_ == policy::Stage::Grm
                                 ? pairing::grm_pairs(views, prefixes.size())
                                 : pairing::dut_pairs(views, prefixes.size());

    std::vector<policy::PreferencePair> pairs;
    for (const auto& [wi, li] : index_pairs) {
        const Candidate& w = candidates[wi];
        const Candidate& l = candidates[li];
        if (w.block_tokens == l.block_tokens) continue;
        policy::PreferencePair p;
        p.winner = w.block_tokens;
        p.loser = l.block_tokens;
        p.iteration = iteration_;
        p.stage = stage_;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

void Engine::record_mismatches(const std::vector<PrefixCtx>& prefixes,
                               std::vector<Candidate>& candidates,
                               IterationReport& report) {
    for (auto& cand : candidates) {
        if (!cand.divergence) continue;
        const auto& sig = cand.divergence->signature;
        const std::string key = sig.key();
        ++signature_counts_[key];
        const auto outcome = filter_.filter_mismatch(sig);
        if (outcome.known) continue;
        ++report.new_mismatches;
        auto& logged = logged_per_signature_[key];
        if (logged >= cfg_.mismatch_log_per_signature) continue;
        ++logged;
        const PrefixCtx& prefix = prefixes[cand.prefix_slot];
        diff::MismatchRecord rec;
        rec.testcase_id = "i" + std::to_string(iteration_) + "-c" +
                          std::to_string(cand.gen_index) + "-r" +
                          std::to_string(prefix.root_id);
        rec.divergence = *cand.divergence;
        rec.program_text = cand.program_text;
        rec.register_seed = prefix.register_seed;
        rec.program_hash = diff::program_hash(cand.program_text, prefix.register_seed);
        rec.skip_prefix = cand.skip_prefix;
        new_records_.push_back(std::move(rec));
    }
}

IterationReport Engine::run_iteration() {
    if (!pretrained_) throw EngineError("run_iteration: policy not pretrained");

    IterationReport report;
    report.iteration = iteration_;
    report.stage = stage_;

    auto prefixes = build_prefixes();

    std::vector<Candidate> candidates;
    candidates.reserve(prefixes.size() * cfg_.candidates_per_prefix);
    uint32_t gen_index = 0;
    for (size_t slot = 0; slot < prefixes.size(); ++slot)
        for (uint32_t k = 0; k < cfg_.candidates_per_prefix; ++k)
            candidates.push_back(
                generate_candidate(prefixes[slot], static_cast<uint32_t>(slot), gen_index++));

    report.candidates = static_cast<uint32_t>(candidates.size());

    parallel_for(candidates.size(), cfg_.workers, [&](size_t i) {
        evaluate_candidate(prefixes[candidates[i].prefix_slot], candidates[i]);
    });

    for (const auto& c : candidates) {
        if (c.cls.valid) {
            ++report.valid;
            continue;
        }
        switch (c.cls.reason) {
            case arch::DeadReason::Syntax: ++report.syntax_dead; break;
            case arch::DeadReason::Exception: ++report.exception_dead; break;
            case arch::DeadReason::Terminated: ++report.terminated_dead; break;
            case arch::DeadReason::Fuel: ++report.fuel_dead; break;
            default: ++report.underrun_dead; break;
        }
    }

    if (stage_ == policy::Stage::Dut) record_mismatches(prefixes, candidates, report);

    // Finalized test cases commit their coverage once; the campaign's
    // cumulative coverage is the union over completed test cases, matching
    // the frequency-map accounting.
    const size_t before = cumulative_.count();
    for (const auto& c : candidates) {
        if (!c.cls.valid) continue;
        const uint32_t depth = prefixes[c.prefix_slot].depth + 1;
        if (depth != cfg_.blocks_per_testcase) continue;
        ++report.completed;
        if (stage_ == policy::Stage::Dut) {
            freq_.commit_test_case(c.coverage);
            cumulative_ |= c.coverage;
            ++completed_testcases_;
        } else {
            ++grm_completed_testcases_;
        }
    }
    report.new_points = static_cast<uint32_t>(cumulative_.count() - before);
    report.cum_coverage = cumulative_.count();

    auto fresh_pairs = form_pairs(prefixes, candidates);

    if (!fresh_pairs.empty() || memory_.has_pairs()) {
        std::vector<policy::PreferencePair> batch;
        if (fresh_pairs.size() >= cfg_.batch_size) {
            // deterministic subsample
            std::vector<size_t> idx(fresh_pairs.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            for (size_t i = 0; i < cfg_.batch_size; ++i) {
                const size_t j = i + rng_select_.below(idx.size() - i);
                std::swap(idx[i], idx[j]);
                batch.push_back(fresh_pairs[idx[i]]);
            }
        } else {
            batch = fresh_pairs;
            while (batch.size() < cfg_.batch_size && memory_.has_pairs())
                batch.push_back(memory_.sample_pair(rng_mem_));
        }
        if (!batch.empty()) {
            const auto stats = policy_.simpo_update(batch, cfg_.reward, cfg_.refine_lr);
            report.loss = stats.loss;
            report.has_loss = true;
        }
    }

    // Retention: extendable pool for the next iterations.
    std::vector<size_t> eligible;
    for (size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        if (c.cls.valid && prefixes[c.prefix_slot].depth + 1 < cfg_.blocks_per_testcase)
            eligible.push_back(i);
    }
    if (stage_ == policy::Stage::Grm) {
        // uniform subset of the valid pool
        for (size_t i = 0; i < eligible.size(); ++i) {
            const size_t j = i + rng_select_.below(eligible.size() - i);
            std::swap(eligible[i], eligible[j]);
        }
        if (eligible.size() > cfg_.retain_per_iteration)
            eligible.resize(cfg_.retain_per_iteration);
        std::sort(eligible.begin(), eligible.end());
    } else {
        std::sort(eligible.begin(), eligible.end(), [&](size_t a, size_t b) {
            if (candidates[a].score_nanos != candidates[b].score_nanos)
                return candidates[a].score_nanos > candidates[b].score_nanos;
            return candidates[a].gen_index < candidates[b].gen_index;
        });
        if (eligible.size() > cfg_.retain_per_iteration)
            eligible.resize(cfg_.retain_per_iteration);
    }

    std::vector<fuzzmem::StoredBlock> retained;
    retained.reserve(eligible.size());
    for (size_t i : eligible) {
        const Candidate& c = candidates[i];
        const PrefixCtx& prefix = prefixes[c.prefix_slot];
        fuzzmem::StoredBlock sb;
        sb.tokens = prefix.tokens;
        sb.tokens.insert(sb.tokens.end(), c.block_tokens.begin(), c.block_tokens.end());
        sb.program = prefix.program;
        sb.program.insert(sb.program.end(), c.block_instrs.begin(), c.block_instrs.end());
        sb.depth = prefix.depth + 1;
        sb.register_seed = prefix.register_seed;
        sb.root_id = prefix.root_id;
        sb.coverage = c.coverage;
        retained.push_back(std::move(sb));
    }
    if (!retained.empty()) {
        fuzzmem::MemoryEntry entry;
        entry.iteration = iteration_;
        entry.blocks = std::move(retained);
        entry.pairs = std::move(fresh_pairs);
        memory_.update(std::move(entry));
    }

    const double syntax_valid_rate = 1.0 - report.invalid_rate();
    if (report.candidates > 0 && syntax_valid_rate < cfg_.validity_floor) collapsed_ = true;

    rolling_validity_.push_back(report.validity_rate());
    if (rolling_validity_.size() > cfg_.grm_rolling_window) rolling_validity_.pop_front();

    if (stage_ == policy::Stage::Dut)
        generated_instructions_ +=
            static_cast<uint64_t>(report.candidates) * cfg_.instructions_per_block;

    reports_.push_back(report);
    ++iteration_;
    ++stage_iteration_;
    return report;
}

bool Engine::grm_stage_done() const {
    if (rolling_validity_.size() < cfg_.grm_rolling_window) return false;
    double sum = 0;
    for (double v : rolling_validity_) sum += v;
    return sum / static_cast<double>(rolling_validity_.size()) > cfg_.grm_validity_threshold;
}

void Engine::switch_to_dut() {
    stage_ = policy::Stage::Dut;
    stage_iteration_ = 0;
    memory_.clear();
    rolling_validity_.clear();
}

CampaignSummary Engine::run_campaign() {
    if (!pretrained_) pretrain();

    while (stage_ == policy::Stage::Grm && stage_iteration_ < cfg_.grm_iteration_cap &&
           !collapsed_) {
        run_iteration();
        if (grm_stage_done()) break;
    }
    if (stage_ == policy::Stage::Grm) switch_to_dut();

    while (!collapsed_ && stage_iteration_ < cfg_.dut_iteration_cap &&
           completed_testcases_ < cfg_.dut_testcase_budget &&
           (cfg_.dut_instruction_budget == 0 ||
            generated_instructions_ < cfg_.dut_instruction_budget))
        run_iteration();

    CampaignSummary summary;
    summary.reports = reports_;
    for (const auto& r : reports_)
        ++(r.stage == policy::Stage::Grm ? summary.grm_iterations : summary.dut_iterations);
    summary.completed_testcases = completed_testcases_;
    summary.cumulative_coverage = cumulative_.count();
    summary.new_records = static_cast<uint32_t>(new_records_.size());
    summary.collapsed = collapsed_;
    summary.signature_counts = signature_counts_;
    summary.pretrain_initial_nll = pretrain_initial_nll_;
    summary.pretrain_final_nll = pretrain_final_nll_;
    return summary;
}

// --- checkpointing ---

namespace {

nlohmann::json pair_json(const policy::PreferencePair& p) {
    nlohmann::json j;
    j["w"] = p.winner;
    j["l"] = p.loser;
    j["it"] = p.iteration;
    j["stage"] = p.stage == policy::Stage::Grm ? "GRM" : "DUT";
    return j;
}

policy::PreferencePair pair_from_json(const nlohmann::json& j) {
    policy::PreferencePair p;
    p.winner = j.at("w").get<std::vector<isa::TokenId>>();
    p.loser = j.at("l").get<std::vector<isa::TokenId>>();
    p.iteration = j.at("it").get<uint32_t>();
    p.stage = j.at("stage").get<std::string>() == "DUT" ? policy::Stage::Dut
                                                        : policy::Stage::Grm;
    return p;
}

nlohmann::json report_json(const IterationReport& r) {
    nlohmann::json j;
    j["iteration"] = r.iteration;
    j["stage"] = r.stage == policy::Stage::Grm ? "GRM" : "DUT";
    j["candidates"] = r.candidates;
    j["valid"] = r.valid;
    j["syntax_dead"] = r.syntax_dead;
    j["new_points"] = r.new_points;
    j["cum_coverage"] = r.cum_coverage;
    j["loss"] = r.has_loss ? nlohmann::json(r.loss) : nlohmann::json(nullptr);
    j["mismatches"] = r.new_mismatches;
    j["completed"] = r.completed;
    return j;
}

IterationReport report_from_json(const nlohmann::json& j) {
    IterationReport r;
    r.iteration = j.at("iteration").get<uint32_t>();
    r.stage = j.at("stage").get<std::string>() == "DUT" ? policy::Stage::Dut
                                                        : policy::Stage::Grm;
    r.candidates = j.at("candidates").get<uint32_t>();
    r.valid = j.at("valid").get<uint32_t>();
    r.syntax_dead = j.at("syntax_dead").get<uint32_t>();
    r.new_points = j.at("new_points").get<uint32_t>();
    r.cum_coverage = j.at("cum_coverage").get<uint64_t>();
    if (!j.at("loss").is_null()) {
        r.loss = j.at("loss").get<double>();
        r.has_loss = true;
    }
    r.new_mismatches = j.at("mismatches").get<uint32_t>();
    r.completed = j.at("completed").get<uint32_t>();
    return r;
}

}  // namespace

std::string Engine::save_checkpoint() const {
    nlohmann::json j;
    j["format"] = "twinfuzz-checkpoint-v1";
    j["stage"] = stage_ == policy::Stage::Grm ? "GRM" : "DUT";
    j["iteration"] = iteration_;
    j["stage_iteration"] = stage_iteration_;
    j["completed_testcases"] = completed_testcases_;
    j["grm_completed_testcases"] = grm_completed_testcases_;
    j["generated_instructions"] = generated_instructions_;
    j["next_root_id"] = next_root_id_;
    j["pretrained"] = pretrained_;
    j["collapsed"] = collapsed_;
    j["pretrain_initial_nll"] = pretrain_initial_nll_;
    j["pretrain_final_nll"] = pretrain_final_nll_;
    j["rolling_validity"] = std::vector<double>(rolling_validity_.begin(), rolling_validity_.end());
    j["rng_gen"] = rng_gen_.state();
    j["rng_select"] = rng_select_.state();
    j["rng_seed"] = rng_seed_.state();
    j["rng_mem"] = rng_mem_.state();
    j["cumulative"] = cumulative_.ids();
    j["freq_csv"] = freq_.to_csv();
    j["policy"] = policy_.save_json();
    j["filter"] = filter_.to_json();
    j["signature_counts"] = signature_counts_;
    j["logged_per_signature"] = logged_per_signature_;

    nlohmann::json mem = nlohmann::json::array();
    for (const auto& e : memory_.entries()) {
        nlohmann::json je;
        je["iteration"] = e.iteration;
        nlohmann::json blocks = nlohmann::json::array();
        for (const auto& b : e.blocks) {
            nlohmann::json jb;
            jb["tokens"] = b.tokens;
            jb["depth"] = b.depth;
            jb["seed"] = b.register_seed;
            jb["root"] = b.root_id;
            jb["cov"] = b.coverage.ids();
            blocks.push_back(std::move(jb));
        }
        je["blocks"] = std::move(blocks);
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& p : e.pairs) pairs.push_back(pair_json(p));
        je["pairs"] = std::move(pairs);
        mem.push_back(std::move(je));
    }
    j["memory"] = std::move(mem);

    nlohmann::json reports = nlohmann::json::array();
    for (const auto& r : reports_) reports.push_back(report_json(r));
    j["reports"] = std::move(reports);

    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : new_records_) records.push_back(r.to_jsonl());
    j["records"] = std::move(records);
    return j.dump();
}

void Engine::restore_checkpoint(const std::string& text) {
    Engine& eng = *this;
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != std::string("twinfuzz-checkpoint-v1"))
        throw EngineError("checkpoint: unknown format");

    memory_.clear();
    rolling_validity_.clear();
    reports_.clear();
    new_records_.clear();
    signature_counts_.clear();
    logged_per_signature_.clear();
    cumulative_ = cov::CoverageSet();

    eng.stage_ = j.at("stage").get<std::string>() == "DUT" ? policy::Stage::Dut
                                                           : policy::Stage::Grm;
    eng.iteration_ = j.at("iteration").get<uint32_t>();
    eng.stage_iteration_ = j.at("stage_iteration").get<uint32_t>();
    eng.completed_testcases_ = j.at("completed_testcases").get<uint64_t>();
    eng.grm_completed_testcases_ = j.at("grm_completed_testcases").get<uint64_t>();
    eng.generated_instructions_ = j.value("generated_instructions", uint64_t{0});
    eng.next_root_id_ = j.at("next_root_id").get<uint64_t>();
    eng.pretrained_ = j.at("pretrained").get<bool>();
    eng.collapsed_ = j.at("collapsed").get<bool>();
    eng.pretrain_initial_nll_ = j.at("pretrain_initial_nll").get<double>();
    eng.pretrain_final_nll_ = j.at("pretrain_final_nll").get<double>();
    for (double v : j.at("rolling_validity").get<std::vector<double>>())
        eng.rolling_validity_.push_back(v);
    eng.rng_gen_.set_state(j.at("rng_gen").get<std::array<uint64_t, 4>>());
    eng.rng_select_.set_state(j.at("rng_select").get<std::array<uint64_t, 4>>());
    eng.rng_seed_.set_state(j.at("rng_seed").get<std::array<uint64_t, 4>>());
    eng.rng_mem_.set_state(j.at("rng_mem").get<std::array<uint64_t, 4>>());
    for (uint32_t id : j.at("cumulative").get<std::vector<uint32_t>>())
        eng.cumulative_.add(id);
    eng.freq_ = scoring::FrequencyMap::from_csv(j.at("freq_csv").get<std::string>(),
                                                cov::CoverageModel::instance().size());
    eng.policy_ = policy::Policy::load_json(j.at("policy").get<std::string>(),
                                            eng.vocab_.hash());
    eng.filter_ = diff::MismatchFilter::from_json(j.at("filter").get<std::string>());
    eng.signature_counts_ =
        j.at("signature_counts").get<std::map<std::string, uint64_t>>();
    eng.logged_per_signature_ =
        j.at("logged_per_signature").get<std::map<std::string, uint64_t>>();

    for (const auto& je : j.at("memory")) {
        fuzzmem::MemoryEntry entry;
        entry.iteration = je.at("iteration").get<uint32_t>();
        for (const auto& jb : je.at("blocks")) {
            fuzzmem::StoredBlock b;
            b.tokens = jb.at("tokens").get<std::vector<isa::TokenId>>();
            b.depth = jb.at("depth").get<uint32_t>();
            b.register_seed = jb.at("seed").get<uint64_t>();
            b.root_id = jb.at("root").get<uint64_t>();
            for (uint32_t id : jb.at("cov").get<std::vector<uint32_t>>()) b.coverage.add(id);
            // program re-derived from tokens (stored blocks always parse)
            size_t start = 0;
            for (size_t i = 0; i < b.tokens.size(); ++i) {
                if (b.tokens[i] != eng.vocab_.eoi()) continue;
                const auto run = std::span(b.tokens).subspan(start, i - start);
                const auto parsed = isa::detokenize(eng.vocab_, run);
                if (!parsed.ok()) throw EngineError("checkpoint: stored block does not parse");
                b.program.push_back(parsed.inst);
                start = i + 1;
            }
            entry.blocks.push_back(std::move(b));
        }
        for (const auto& jp : je.at("pairs")) entry.pairs.push_back(pair_from_json(jp));
        eng.memory_.update(std::move(entry));
    }

    for (const auto& jr : j.at("reports")) eng.reports_.push_back(report_from_json(jr));
    for (const auto& jr : j.at("records")) {
        auto rec = diff::MismatchRecord::from_json(jr.get<std::string>());
        if (rec) eng.new_records_.push_back(std::move(*rec));
    }
}

}  // namespace twinfuzz::engine
