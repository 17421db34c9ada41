#include "twinfuzz/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace twinfuzz::config {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw ConfigError("unknown config key '" + key + "' in " + where);
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

engine::CampaignConfig parse_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse failure: ") + e.what());
    }

    engine::CampaignConfig cfg;
    check_keys(j,
               {"seed", "workers", "blocks_per_testcase", "instructions_per_block",
                "candidates_per_prefix", "prefixes_per_iteration",
                "token_cap_per_instruction", "fuel", "branch_retire_fraction", "grm",
                "dut", "scoring", "reward", "policy", "memory", "corpus", "bugs",
                "arch", "difftest"},
               "top level");
    get_if(j, "seed", cfg.seed);
    get_if(j, "workers", cfg.workers);
    get_if(j, "blocks_per_testcase", cfg.blocks_per_testcase);
    get_if(j, "instructions_per_block", cfg.instructions_per_block);
    get_if(j, "candidates_per_prefix", cfg.candidates_per_prefix);
    get_if(j, "prefixes_per_iteration", cfg.prefixes_per_iteration);
    get_if(j, "token_cap_per_instruction", cfg.token_cap_per_instruction);
    get_if(j, "fuel", cfg.fuel);
    get_if(j, "branch_retire_fraction", cfg.branch_retire_fraction);

    if (j.contains("grm")) {
        const auto& g = j.at("grm");
        check_keys(g, {"iteration_cap", "rolling_window", "validity_threshold"}, "grm");
        get_if(g, "iteration_cap", cfg.grm_iteration_cap);
        get_if(g, "rolling_window", cfg.grm_rolling_window);
        get_if(g, "validity_threshold", cfg.grm_validity_threshold);
    }
    if (j.contains("dut")) {
        const auto& d = j.at("dut");
        check_keys(d, {"testcase_budget", "instruction_budget", "iteration_cap"}, "dut");
        get_if(d, "testcase_budget", cfg.dut_testcase_budget);
        get_if(d, "instruction_budget", cfg.dut_instruction_budget);
        get_if(d, "iteration_cap", cfg.dut_iteration_cap);
    }
    if (j.contains("scoring")) {
        const auto& s = j.at("scoring");
        check_keys(s, {"alpha", "beta", "factor"}, "scoring");
        get_if(s, "alpha", cfg.scoring.alpha);
        get_if(s, "beta", cfg.scoring.beta_w);
        get_if(s, "factor", cfg.scoring.factor);
    }
    if (j.contains("reward")) {
        const auto& r = j.at("reward");
        check_keys(r, {"scale", "margin"}, "reward");
        get_if(r, "scale", cfg.reward.reward_scale);
        get_if(r, "margin", cfg.reward.margin);
    }
    if (j.contains("policy")) {
        const auto& p = j.at("policy");
        check_keys(p,
                   {"context_order", "pretrain_lr", "pretrain_epochs", "refine_lr",
                    "temperature", "top_p", "batch_size", "validity_floor"},
                   "policy");
        get_if(p, "context_order", cfg.context_order);
        get_if(p, "pretrain_lr", cfg.pretrain_lr);
        get_if(p, "pretrain_epochs", cfg.pretrain_epochs);
        get_if(p, "refine_lr", cfg.refine_lr);
        get_if(p, "temperature", cfg.temperature);
        get_if(p, "top_p", cfg.top_p);
        get_if(p, "batch_size", cfg.batch_size);
        get_if(p, "validity_floor", cfg.validity_floor);
    }
    if (j.contains("memory")) {
        const auto& m = j.at("memory");
        check_keys(m, {"window", "recency_lambda", "retain_per_iteration"}, "memory");
        get_if(m, "window", cfg.memory_window);
        get_if(m, "recency_lambda", cfg.recency_lambda);
        get_if(m, "retain_per_iteration", cfg.retain_per_iteration);
    }
    if (j.contains("corpus")) {
        const auto& c = j.at("corpus");
        check_keys(c, {"instructions", "privileged_weight", "memory_weight"}, "corpus");
        get_if(c, "instructions", cfg.corpus_instructions);
        get_if(c, "privileged_weight", cfg.corpus_privileged_weight);
        get_if(c, "memory_weight", cfg.corpus_memory_weight);
    }
    if (j.contains("bugs")) {
        const auto names = j.at("bugs").get<std::vector<std::string>>();
        const auto bugs = arch::BugConfig::from_names(names);
        if (!bugs) throw ConfigError("unknown bug id in config (expected V1..V5)");
        cfg.bugs = *bugs;
    }
    if (j.contains("arch")) {
        const auto& a = j.at("arch");
        check_keys(a,
                   {"prog_base", "mem_size", "reset_pointer_region", "reset_epc_slots",
                    "reset_memory_bytes"},
                   "arch");
        get_if(a, "prog_base", cfg.arch_cfg.prog_base);
        get_if(a, "mem_size", cfg.arch_cfg.mem_size);
        get_if(a, "reset_pointer_region", cfg.arch_cfg.reset_pointer_region);
        get_if(a, "reset_epc_slots", cfg.arch_cfg.reset_epc_slots);
        get_if(a, "reset_memory_bytes", cfg.arch_cfg.reset_memory_bytes);
    }
    if (j.contains("difftest")) {
        const auto& d = j.at("difftest");
        check_keys(d, {"skip_prefix", "mismatch_log_per_signature"}, "difftest");
        get_if(d, "skip_prefix", cfg.skip_prefix);
        get_if(d, "mismatch_log_per_signature", cfg.mismatch_log_per_signature);
    }

    const auto errors = cfg.validate();
    if (!errors.empty()) throw ConfigError("config validation: " + errors.front());
    return cfg;
}

engine::CampaignConfig load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_json(buf.str());
}

std::string to_json(const engine::CampaignConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["workers"] = cfg.workers;
    j["blocks_per_testcase"] = cfg.blocks_per_testcase;
    j["instructions_per_block"] = cfg.instructions_per_block;
    j["candidates_per_prefix"] = cfg.candidates_per_prefix;
    j["prefixes_per_iteration"] = cfg.prefixes_per_iteration;
    j["token_cap_per_instruction"] = cfg.token_cap_per_instruction;
    j["fuel"] = cfg.fuel;
    j["branch_retire_fraction"] = cfg.branch_retire_fraction;
    j["grm"] = {{"iteration_cap", cfg.grm_iteration_cap},
                {"rolling_window", cfg.grm_rolling_window},
                {"validity_threshold", cfg.grm_validity_threshold}};
    j["dut"] = {{"testcase_budget", cfg.dut_testcase_budget},
                {"instruction_budget", cfg.dut_instruction_budget},
                {"iteration_cap", cfg.dut_iteration_cap}};
    j["scoring"] = {{"alpha", cfg.scoring.alpha},
                    {"beta", cfg.scoring.beta_w},
                    {"factor", cfg.scoring.factor}};
    j["reward"] = {{"scale", cfg.reward.reward_scale}, {"margin", cfg.reward.margin}};
    j["policy"] = {{"context_order", cfg.context_order},
                   {"pretrain_lr", cfg.pretrain_lr},
                   {"pretrain_epochs", cfg.pretrain_epochs},
                   {"refine_lr", cfg.refine_lr},
                   {"temperature", cfg.temperature},
                   {"top_p", cfg.top_p},
                   {"batch_size", cfg.batch_size},
                   {"validity_floor", cfg.validity_floor}};
    j["memory"] = {{"window", cfg.memory_window},
                   {"recency_lambda", cfg.recency_lambda},
                   {"retain_per_iteration", cfg.retain_per_iteration}};
    j["corpus"] = {{"instructions", cfg.corpus_instructions},
                   {"privileged_weight", cfg.corpus_privileged_weight},
                   {"memory_weight", cfg.corpus_memory_weight}};
    j["bugs"] = cfg.bugs.names();
    j["arch"] = {{"prog_base", cfg.arch_cfg.prog_base},
                 {"mem_size", cfg.arch_cfg.mem_size},
                 {"reset_pointer_region", cfg.arch_cfg.reset_pointer_region},
                 {"reset_epc_slots", cfg.arch_cfg.reset_epc_slots},
                 {"reset_memory_bytes", cfg.arch_cfg.reset_memory_bytes}};
    j["difftest"] = {{"skip_prefix", cfg.skip_prefix},
                     {"mismatch_log_per_signature", cfg.mismatch_log_per_signature}};
    return j.dump(2) + "\n";
}

}  // namespace twinfuzz::config
