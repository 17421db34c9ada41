#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "twinfuzz/config.hpp"
#include "twinfuzz/engine.hpp"

namespace fs = std::filesystem;
using namespace twinfuzz;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
}

struct RunOptions {
    std::string config_path;
    std::string out_dir = "out/campaign";
    std::vector<std::string> bugs;
    uint64_t seed = 0;
    bool seed_set = false;
    uint32_t workers = 0;
    bool workers_set = false;
    uint32_t stage_budget = 0;
    bool stage_budget_set = false;
    bool resume = false;
};

engine::CampaignConfig resolve_config(const RunOptions& opt) {
    engine::CampaignConfig cfg;
    if (!opt.config_path.empty()) cfg = config::load_file(opt.config_path);
    if (opt.seed_set) cfg.seed = opt.seed;
    if (opt.workers_set) cfg.workers = opt.workers;
    if (opt.stage_budget_set) cfg.dut_testcase_budget = opt.stage_budget;
    if (!opt.bugs.empty()) {
        const auto bugs = arch::BugConfig::from_names(opt.bugs);
        if (!bugs) throw config::ConfigError("unknown bug id (expected V1..V5)");
        cfg.bugs = *bugs;
    }
    const auto errors = cfg.validate();
    if (!errors.empty()) throw config::ConfigError("config validation: " + errors.front());
    return cfg;
}

void write_campaign_artifacts(const fs::path& out, const engine::Engine& eng,
                              const engine::CampaignSummary& summary) {
    std::string csv = engine::IterationReport::csv_header() + "\n";
    for (const auto& r : summary.reports) csv += r.csv_row() + "\n";
    write_file(out / "reports" / "iterations.csv", csv);

    std::string jsonl;
    for (const auto& rec : eng.new_records()) jsonl += rec.to_jsonl() + "\n";
    write_file(out / "mismatches" / "new.jsonl", jsonl);

    write_file(out / "filter.json", eng.filter().to_json());
    write_file(out / "checkpoints" / "final.json", eng.save_checkpoint());

    nlohmann::json js;
    js["grm_iterations"] = summary.grm_iterations;
    js["dut_iterations"] = summary.dut_iterations;
    js["completed_testcases"] = summary.completed_testcases;
    js["cumulative_coverage"] = summary.cumulative_coverage;
    js["coverage_universe"] = cov::CoverageModel::instance().size();
    js["new_records"] = summary.new_records;
    js["collapsed"] = summary.collapsed;
    js["pretrain_initial_nll"] = summary.pretrain_initial_nll;
    js["pretrain_final_nll"] = summary.pretrain_final_nll;
    js["signature_counts"] = summary.signature_counts;
    write_file(out / "summary.json", js.dump(2) + "\n");
}

int cmd_run(const RunOptions& opt) {
    const auto cfg = resolve_config(opt);
    const fs::path out(opt.out_dir);
    fs::create_directories(out);
    write_file(out / "config.lock.json", config::to_json(cfg));

    engine::Engine eng(cfg);
    const fs::path checkpoint = out / "checkpoints" / "final.json";
    if (opt.resume && fs::exists(checkpoint)) {
        eng.restore_checkpoint(read_file(checkpoint));
    }
    const auto summary = eng.run_campaign();
    write_campaign_artifacts(out, eng, summary);

    std::cout << "campaign done: " << summary.grm_iterations << " GRM iterations, "
              << summary.dut_iterations << " DUT iterations, "
              << summary.completed_testcases << " test cases, coverage "
              << summary.cumulative_coverage << "/" << cov::CoverageModel::instance().size()
              << ", " << summary.new_records << " new mismatch records\n";
    if (summary.collapsed) {
        std::cout << "warning: policy collapsed below the syntactic validity floor\n";
        return kExitRuntime;
    }
    return kExitOk;
}

// Long-format CSV shared by the ablation arms.
std::string arm_csv_header() {
    return "arm,iteration,stage,validity_rate,invalid_rate,extendable_rate,new_points,"
           "cum_coverage,completed\n";
}

void append_arm_rows(std::string& csv, const std::string& arm,
                     const engine::CampaignSummary& summary) {
    for (const auto& r : summary.reports) {
        char buf[256];
        snprintf(buf, sizeof buf, "%s,%u,%s,%.6f,%.6f,%.6f,%u,%llu,%u\n", arm.c_str(),
                 r.iteration, r.stage == policy::Stage::Grm ? "GRM" : "DUT",
                 r.validity_rate(), r.invalid_rate(), r.validity_rate(), r.new_points,
                 static_cast<unsigned long long>(r.cum_coverage), r.completed);
        csv += buf;
    }
}

engine::CampaignSummary run_arm(engine::CampaignConfig cfg) {
    engine::Engine eng(cfg);
    return eng.run_campaign();
}

int cmd_ablate(const std::string& preset, const RunOptions& opt) {
    auto base = resolve_config(opt);
    const fs::path out(opt.out_dir);
    fs::create_directories(out);

    if (preset == "baseline" || preset == "blocks-5x6" || preset == "blocks-3x10" ||
        preset == "blocks-1x30") {
        auto cfg = base;
        if (preset == "blocks-3x10") {
            cfg.blocks_per_testcase = 3;
            cfg.instructions_per_block = 10;
        } else if (preset == "blocks-1x30") {
            cfg.blocks_per_testcase = 1;
            cfg.instructions_per_block = 30;
        }
        std::string csv = arm_csv_header();
        append_arm_rows(csv, preset, run_arm(cfg));
        write_file(out / (preset + ".csv"), csv);
        std::cout << "wrote " << (out / (preset + ".csv")).string() << "\n";
        return kExitOk;
    }

    if (preset == "no-grm") {
        std::string csv = arm_csv_header();
        append_arm_rows(csv, "grm", run_arm(base));
        auto no_grm = base;
        no_grm.grm_iteration_cap = 0;
        append_arm_rows(csv, "no-grm", run_arm(no_grm));
        write_file(out / "ablate_no_grm.csv", csv);
        std::cout << "wrote " << (out / "ablate_no_grm.csv").string() << "\n";
        return kExitOk;
    }

    if (preset == "blocks") {
        std::string csv = arm_csv_header();
        struct Shape {
            const char* name;
            uint32_t blocks, instructions;
        };
        for (const Shape& s : {Shape{"5-6", 5, 6}, Shape{"3-10", 3, 10}, Shape{"1-30", 1, 30}}) {
            auto cfg = base;
            cfg.blocks_per_testcase = s.blocks;
            cfg.instructions_per_block = s.instructions;
            append_arm_rows(csv, s.name, run_arm(cfg));
        }
        write_file(out / "ablate_blocks.csv", csv);
        std::cout << "wrote " << (out / "ablate_blocks.csv").string() << "\n";
        return kExitOk;
    }

    if (preset == "robustness-5seeds") {
        std::vector<engine::CampaignSummary> summaries;
        std::string csv = arm_csv_header();
        for (uint64_t s = 0; s < 5; ++s) {
            auto cfg = base;
            cfg.seed = base.seed + s;
            summaries.push_back(run_arm(cfg));
            append_arm_rows(csv, "seed" + std::to_string(cfg.seed), summaries.back());
        }
        // mean/variance of final cumulative coverage
        double mean = 0;
        for (const auto& s : summaries) mean += static_cast<double>(s.cumulative_coverage);
        mean /= 5.0;
        double var = 0;
        for (const auto& s : summaries) {
            const double d = static_cast<double>(s.cumulative_coverage) - mean;
            var += d * d;
        }
        var /= 5.0;
        char buf[160];
        snprintf(buf, sizeof buf, "final_coverage,mean,%.6f,variance,%.6f,cv,%.6f\n", mean,
                 var, mean > 0 ? std::sqrt(var) / mean : 0.0);
        csv += buf;
        write_file(out / "ablate_robustness.csv", csv);
        std::cout << "wrote " << (out / "ablate_robustness.csv").string() << "\n";
        return kExitOk;
    }

    std::cerr << "unknown preset: " << preset << "\n";
    return kExitUsage;
}

struct ReplayInput {
    std::string program_text;
    uint64_t register_seed = 0;
    uint64_t program_hash = 0;
    uint32_t skip_prefix = 0;
    std::vector<std::string> bugs;
};

ReplayInput load_replay_input(const std::string& path, size_t record_index) {
    const std::string text = read_file(path);
    std::istringstream in(text);
    std::string line;
    size_t index = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (index++ < record_index) continue;
        if (auto rec = diff::MismatchRecord::from_json(line)) {
            return {rec->program_text, rec->register_seed, rec->program_hash,
                    rec->skip_prefix, {}};
        }
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("program") || !j.contains("register_seed"))
            throw std::runtime_error("test-case file does not parse: " + path);
        ReplayInput r;
        r.program_text = j.at("program").get<std::string>();
        r.register_seed = j.at("register_seed").get<uint64_t>();
        r.program_hash = diff::program_hash(r.program_text, r.register_seed);
        if (j.contains("bugs")) r.bugs = j.at("bugs").get<std::vector<std::string>>();
        return r;
    }
    throw std::runtime_error("no record " + std::to_string(record_index) + " in " + path);
}

std::string short_entry(const arch::TraceEntry& e) {
    char buf[160];
    std::string extra;
    if (e.reg) {
        char b2[64];
        snprintf(b2, sizeof b2, " x%u=0x%llx", e.reg->index,
                 static_cast<unsigned long long>(e.reg->value));
        extra += b2;
    }
    if (e.mem) {
        char b2[96];
        snprintf(b2, sizeof b2, " %s[0x%llx]w%u=0x%llx", e.mem->is_write ? "st" : "ld",
                 static_cast<unsigned long long>(e.mem->addr), e.mem->width,
                 static_cast<unsigned long long>(e.mem->value));
        extra += b2;
    }
    if (e.exc) {
        char b2[64];
        snprintf(b2, sizeof b2, " exc(cause=%u,tval=0x%llx)", e.exc->cause,
                 static_cast<unsigned long long>(e.exc->tval));
        extra += b2;
    }
    snprintf(buf, sizeof buf, "%s pc=0x%llx %08x%s", arch::privilege_name(e.privilege).data(),
             static_cast<unsigned long long>(e.pc), e.insn, extra.c_str());
    return buf;
}

int cmd_replay(const std::string& path, size_t record_index,
               const std::vector<std::string>& bug_flags, std::optional<uint64_t> seed_flag,
               uint32_t skip_prefix) {
    const auto input = load_replay_input(path, record_index);
    if (seed_flag && diff::program_hash(input.program_text, *seed_flag) != input.program_hash) {
        std::cerr << "refused: --register-seed does not match the recorded program hash\n";
        return kExitRuntime;
    }
    const auto bug_names = bug_flags.empty() ? input.bugs : bug_flags;
    const auto bugs = arch::BugConfig::from_names(bug_names);
    if (!bugs) {
        std::cerr << "unknown bug id (expected V1..V5)\n";
        return kExitUsage;
    }

    const auto parsed = isa::parse_program(input.program_text);
    if (!parsed.ok()) {
        std::cerr << "test-case program does not parse (line " << parsed.error_line << ": "
                  << isa::parse_error_name(parsed.error) << ")\n";
        return kExitUsage;
    }
    const auto prog = isa::assemble(parsed.instructions);
    const arch::ArchConfig arch_cfg;
    const uint64_t fuel = 4096;

    auto grm = arch::run_block(arch::reset(input.register_seed, arch_cfg), prog, fuel, arch_cfg);
    auto dut_run = dut::dut_run_block(arch::reset(input.register_seed, arch_cfg), prog, fuel,
                                      *bugs, arch_cfg);
    const uint64_t hash = input.program_hash;
    const auto div = diff::compare_traces({grm.trace, hash}, {dut_run.result.trace, hash},
                                          skip_prefix ? skip_prefix : input.skip_prefix);

    const size_t rows = std::max(grm.trace.size(), dut_run.result.trace.size());
    for (size_t i = 0; i < rows; ++i) {
        const std::string left = i < grm.trace.size() ? short_entry(grm.trace[i]) : "(ended)";
        const std::string right =
            i < dut_run.result.trace.size() ? short_entry(dut_run.result.trace[i]) : "(ended)";
        const bool at_div = div && div->seq == i;
        printf("%4zu | %-58s | %-58s%s\n", i, left.c_str(), right.c_str(),
               at_div ? "   <= first divergence" : "");
    }
    printf("GRM: %s, DUT: %s\n", arch::outcome_name(grm.outcome).data(),
           arch::outcome_name(dut_run.result.outcome).data());
    if (div) {
        printf("divergence at seq %u: %s grm=0x%llx dut=0x%llx signature=%s\n", div->seq,
               diff::divergence_kind_name(div->kind).data(),
               static_cast<unsigned long long>(div->grm_value),
               static_cast<unsigned long long>(div->dut_value),
               div->signature.key().c_str());
    } else {
        printf("traces identical\n");
    }
    return kExitOk;
}

std::vector<diff::MismatchRecord> load_records(const std::string& path) {
    std::vector<diff::MismatchRecord> records;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (auto rec = diff::MismatchRecord::from_json(line)) records.push_back(std::move(*rec));
    }
    return records;
}

int cmd_triage_list(const std::string& records_path, const std::string& filter_path) {
    const auto records = load_records(records_path);
    diff::MismatchFilter filter;
    if (!filter_path.empty() && fs::exists(filter_path))
        filter = diff::MismatchFilter::from_json(read_file(filter_path));
    size_t shown = 0;
    for (const auto& rec : records) {
        if (filter.knows(rec.divergence.signature)) continue;
        printf("%-24s seq=%-4u %-10s grm=0x%llx dut=0x%llx %s\n", rec.testcase_id.c_str(),
               rec.divergence.seq, diff::divergence_kind_name(rec.divergence.kind).data(),
               static_cast<unsigned long long>(rec.divergence.grm_value),
               static_cast<unsigned long long>(rec.divergence.dut_value),
               rec.divergence.signature.key().c_str());
        ++shown;
    }
    printf("%zu record(s) awaiting triage\n", shown);
    return kExitOk;
}

int cmd_triage_classify(const std::string& records_path, const std::string& filter_path,
                        const std::string& id, const std::string& as, bool override_flag) {
    const auto records = load_records(records_path);
    const diff::MismatchRecord* found = nullptr;
    for (const auto& rec : records)
        if (rec.testcase_id == id) found = &rec;
    if (!found) {
        std::cerr << "no record with id " << id << "\n";
        return kExitRuntime;
    }
    diff::Classification cls;
    if (as == "bug") cls = diff::Classification::ConfirmedBug;
    else if (as == "false-positive") cls = diff::Classification::FalsePositive;
    else {
        std::cerr << "--as must be 'bug' or 'false-positive'\n";
        return kExitUsage;
    }
    diff::MismatchFilter filter;
    if (fs::exists(filter_path)) filter = diff::MismatchFilter::from_json(read_file(filter_path));
    try {
        filter.triage_record(found->divergence.signature, cls, override_flag);
    } catch (const diff::TriageConflictError& e) {
        std::cerr << e.what() << " (use --override to reclassify)\n";
        return kExitRuntime;
    }
    write_file(filter_path, filter.to_json());
    printf("classified %s as %s\n", found->divergence.signature.key().c_str(),
           diff::classification_name(cls).data());
    return kExitOk;
}

int cmd_report(const std::string& dir) {
    const fs::path out(dir);
    const auto csv_path = out / "reports" / "iterations.csv";
    if (!fs::exists(csv_path)) {
        std::cerr << "no campaign reports under " << dir << "\n";
        return kExitRuntime;
    }
    std::cout << read_file(out / "summary.json");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"twinfuzz: two-stage reference-model-guided differential fuzzer"};
    app.require_subcommand(1);

    RunOptions opt;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", opt.config_path, "campaign config (JSON)");
        cmd->add_option("--out", opt.out_dir, "output directory");
        cmd->add_option("--seed", opt.seed, "campaign seed")->each([&](const std::string&) {
            opt.seed_set = true;
        });
        cmd->add_option("--workers", opt.workers, "simulation worker threads")
            ->each([&](const std::string&) { opt.workers_set = true; });
        cmd->add_option("--bugs", opt.bugs, "enabled bug analogs (V1..V5)")->delimiter(',');
        cmd->add_option("--stage-budget", opt.stage_budget, "DUT-stage test case budget")
            ->each([&](const std::string&) { opt.stage_budget_set = true; });
    };

    auto* run = app.add_subcommand("run", "run a fuzzing campaign");
    add_common(run);
    run->add_flag("--resume", opt.resume, "resume from the output checkpoint");

    std::string preset;
    auto* ablate = app.add_subcommand("ablate", "run an experiment preset");
    add_common(ablate);
    ablate->add_option("preset", preset,
                       "baseline | no-grm | blocks | blocks-5x6 | blocks-3x10 | "
                       "blocks-1x30 | robustness-5seeds")
        ->required();

    std::string testcase_path;
    size_t record_index = 0;
    std::vector<std::string> replay_bugs;
    std::optional<uint64_t> replay_seed;
    uint64_t replay_seed_value = 0;
    uint32_t replay_skip = 0;
    auto* replay = app.add_subcommand("replay", "side-by-side GRM/DUT trace of a test case");
    replay->add_option("--testcase", testcase_path, "mismatch record or test-case JSON")
        ->required();
    replay->add_option("--record", record_index, "record index within a JSONL file");
    replay->add_option("--bugs", replay_bugs, "bug analogs for the DUT side")->delimiter(',');
    replay->add_option("--register-seed", replay_seed_value, "register seed override (validated)")
        ->each([&](const std::string&) { replay_seed = replay_seed_value; });
    replay->add_option("--skip-prefix", replay_skip, "trace entries to skip");

    auto* triage = app.add_subcommand("triage", "manage the known-mismatch filter");
    triage->require_subcommand(1);
    std::string records_path = "out/campaign/mismatches/new.jsonl";
    std::string filter_path = "out/campaign/filter.json";
    std::string triage_id, triage_as;
    bool triage_override = false;
    auto* tlist = triage->add_subcommand("list", "list records awaiting triage");
    tlist->add_option("--records", records_path, "mismatch JSONL");
    tlist->add_option("--filter", filter_path, "filter JSON");
    auto* tclassify = triage->add_subcommand("classify", "classify a record's signature");
    tclassify->add_option("--records", records_path, "mismatch JSONL");
    tclassify->add_option("--filter", filter_path, "filter JSON");
    tclassify->add_option("--id", triage_id, "record testcase id")->required();
    tclassify->add_option("--as", triage_as, "bug | false-positive")->required();
    tclassify->add_flag("--override", triage_override, "allow reclassification");

    std::string report_dir = "out/campaign";
    auto* report = app.add_subcommand("report", "print a campaign summary");
    report->add_option("--dir", report_dir, "campaign output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (run->parsed()) return cmd_run(opt);
        if (ablate->parsed()) return cmd_ablate(preset, opt);
        if (replay->parsed())
            return cmd_replay(testcase_path, record_index, replay_bugs, replay_seed, replay_skip);
        if (triage->parsed()) {
            if (tlist->parsed()) return cmd_triage_list(records_path, filter_path);
            if (tclassify->parsed())
                return cmd_triage_classify(records_path, filter_path, triage_id, triage_as,
                                           triage_override);
        }
        if (report->parsed()) return cmd_report(report_dir);
    } catch (const config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
