#include "twinfuzz/difftest.hpp"

#include <json.hpp>

#include "twinfuzz/rng.hpp"

namespace twinfuzz::diff {

namespace {
using isa::Mnemonic;

std::string hex64(uint64_t v) {
    char buf[32];
    snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}
}  // namespace

std::string_view divergence_kind_name(DivergenceKind k) {
    switch (k) {
        case DivergenceKind::RegValue: return "REG_VALUE";
        case DivergenceKind::MemAddr: return "MEM_ADDR";
        case DivergenceKind::MemData: return "MEM_DATA";
        case DivergenceKind::Pc: return "PC";
        case DivergenceKind::Exception: return "EXCEPTION";
        case DivergenceKind::Csr: return "CSR";
    }
    return "?";
}

std::optional<DivergenceKind> divergence_kind_from_name(std::string_view name) {
    for (auto k : {DivergenceKind::RegValue, DivergenceKind::MemAddr, DivergenceKind::MemData,
                   DivergenceKind::Pc, DivergenceKind::Exception, DivergenceKind::Csr})
        if (divergence_kind_name(k) == name) return k;
    return std::nullopt;
}

std::string_view mnemonic_class_name(MnemonicClass c) {
    switch (c) {
        case MnemonicClass::Alu: return "alu";
        case MnemonicClass::Load: return "load";
        case MnemonicClass::Store: return "store";
        case MnemonicClass::Branch: return "branch";
        case MnemonicClass::Jump: return "jump";
        case MnemonicClass::CsrOp: return "csr";
        case MnemonicClass::System: return "system";
        case MnemonicClass::Fence: return "fence";
        case MnemonicClass::Unknown: return "unknown";
    }
    return "?";
}

MnemonicClass mnemonic_class_of(uint32_t insn_word) {
    const auto decoded = isa::decode(insn_word);
    if (!decoded) return MnemonicClass::Unknown;
    const Mnemonic m = decoded->mnemonic;
    if (m >= Mnemonic::Lb && m <= Mnemonic::Lwu) return MnemonicClass::Load;
    if (m >= Mnemonic::Sb && m <= Mnemonic::Sd) return MnemonicClass::Store;
    if (m >= Mnemonic::Beq && m <= Mnemonic::Bgeu) return MnemonicClass::Branch;
    if (m == Mnemonic::Jal || m == Mnemonic::Jalr) return MnemonicClass::Jump;
    if (m >= Mnemonic::Csrrw && m <= Mnemonic::Csrrci) return MnemonicClass::CsrOp;
    if (m == Mnemonic::Fence || m == Mnemonic::SfenceVma || m == Mnemonic::HfenceGvma)
        return MnemonicClass::Fence;
    if (m >= Mnemonic::Mret && m <= Mnemonic::Wfi) return MnemonicClass::System;
    return MnemonicClass::Alu;
}

std::string Signature::key() const {
    std::string out{arch::privilege_name(privilege)};
    out += '|';
    out += mnemonic_class_name(mclass);
    out += '|';
    out += divergence_kind_name(kind);
    out += '|';
    out += csr ? std::string(isa::csr_name(*csr)) : "-";
    out += '|';
    out += exc_cause ? std::to_string(*exc_cause) : "-";
    return out;
}

uint64_t program_hash(std::string_view program_text, uint64_t register_seed) {
    Fnv1a h;
    h.update_str(program_text);
    h.update_u64(register_seed);
    return h.value();
}

namespace {

Signature make_signature(const arch::TraceEntry& ref, DivergenceKind kind,
                         std::optional<uint8_t> cause_hint) {
    Signature sig;
    sig.privilege = ref.privilege;
    sig.mclass = mnemonic_class_of(ref.insn);
    sig.kind = kind;
    if (auto decoded = isa::decode(ref.insn)) {
        const auto& s = isa::signature_of(decoded->mnemonic);
        for (size_t i = 0; i < s.size(); ++i)
            if (s.slots[i] == isa::OperandSlot::CsrName) sig.csr = decoded->csr;
    }
    if (cause_hint) sig.exc_cause = cause_hint;
    return sig;
}

}  // namespace

std::optional<Divergence> compare_traces(const TraceView& grm, const TraceView& dut,
                                         uint32_t skip_prefix) {
    if (grm.program_hash != dut.program_hash) throw TraceMismatchError{};

    const size_t common = std::min(grm.trace.size(), dut.trace.size());
    for (size_t i = skip_prefix; i < common; ++i) {
        const arch::TraceEntry& g = grm.trace[i];
        const arch::TraceEntry& d = dut.trace[i];
        if (g == d) continue;

        Divergence div;
        div.seq = g.seq;
        std::optional<uint8_t> cause;
        if (g.exc) cause = g.exc->cause;
        else if (d.exc) cause = d.exc->cause;

        if (g.pc != d.pc) {
            div.kind = DivergenceKind::Pc;
            div.grm_value = g.pc;
            div.dut_value = d.pc;
        } else if (g.exc.has_value() != d.exc.has_value() ||
                   (g.exc && g.exc->cause != d.exc->cause)) {
            div.kind = DivergenceKind::Exception;
            div.grm_value = g.exc ? g.exc->cause : UINT64_MAX;
            div.dut_value = d.exc ? d.exc->cause : UINT64_MAX;
        } else if (g.exc && g.exc->tval != d.exc->tval) {
            div.kind = DivergenceKind::Exception;
            div.grm_value = g.exc->tval;
            div.dut_value = d.exc->tval;
        } else if (g.reg != d.reg) {
            const bool is_csr_op = mnemonic_class_of(g.insn) == MnemonicClass::CsrOp;
            div.kind = is_csr_op ? DivergenceKind::Csr : DivergenceKind::RegValue;
            div.grm_value = g.reg ? g.reg->value : UINT64_MAX;
            div.dut_value = d.reg ? d.reg->value : UINT64_MAX;
        } else if (g.mem.has_value() != d.mem.has_value() ||
                   (g.mem && g.mem->addr != d.mem->addr)) {
            div.kind = DivergenceKind::MemAddr;
            div.grm_value = g.mem ? g.mem->addr : UINT64_MAX;
            div.dut_value = d.mem ? d.mem->addr : UINT64_MAX;
        } else if (g.mem && (g.mem->value != d.mem->value || g.mem->width != d.mem->width ||
                             g.mem->is_write != d.mem->is_write)) {
            div.kind = DivergenceKind::MemData;
            div.grm_value = g.mem->value;
            div.dut_value = d.mem->value;
        } else {
            // Remaining field: execution privilege. Control-state divergence.
            div.kind = DivergenceKind::Pc;
            div.grm_value = static_cast<uint64_t>(g.privilege);
            div.dut_value = static_cast<uint64_t>(d.privilege);
        }
        div.signature = make_signature(g, div.kind, cause);
        return div;
    }

    if (grm.trace.size() != dut.trace.size() && common >= skip_prefix) {
        // One side retired more instructions; report at the shorter end.
        Divergence div;
        div.seq = static_cast<uint32_t>(common);
        div.kind = DivergenceKind::Pc;
        div.grm_value = grm.trace.size();
        div.dut_value = dut.trace.size();
        const arch::TraceEntry& ref =
            grm.trace.size() > dut.trace.size() ? grm.trace[common] : dut.trace[common];
        std::optional<uint8_t> cause;
        if (ref.exc) cause = ref.exc->cause;
        div.signature = make_signature(ref, div.kind, cause);
        return div;
    }
    return std::nullopt;
}

std::string_view classification_name(Classification c) {
    return c == Classification::ConfirmedBug ? "CONFIRMED_BUG" : "FALSE_POSITIVE";
}

FilterOutcome MismatchFilter::filter_mismatch(const Signature& sig) {
    auto it = entries_.find(sig.key());
    if (it == entries_.end()) return {false, Classification::ConfirmedBug};
    ++it->second.count;
    return {true, it->second.classification};
}

void MismatchFilter::triage_record(const Signature& sig, Classification c,
                                   bool override_existing) {
    auto it = entries_.find(sig.key());
    if (it != entries_.end()) {
        if (it->second.classification == c) return;  // idempotent
        if (!override_existing) throw TriageConflictError{};
        it->second.classification = c;
        return;
    }
    entries_.emplace(sig.key(), Entry{sig, c, 0});
}

bool MismatchFilter::knows(const Signature& sig) const {
    return entries_.count(sig.key()) > 0;
}

uint64_t MismatchFilter::recurrences(const Signature& sig) const {
    auto it = entries_.find(sig.key());
    return it == entries_.end() ? 0 : it->second.count;
}

namespace {

nlohmann::json signature_json(const Signature& sig) {
    nlohmann::json j;
    j["privilege"] = std::string(arch::privilege_name(sig.privilege));
    j["class"] = std::string(mnemonic_class_name(sig.mclass));
    j["kind"] = std::string(divergence_kind_name(sig.kind));
    j["csr"] = sig.csr ? nlohmann::json(std::string(isa::csr_name(*sig.csr)))
                       : nlohmann::json(nullptr);
    j["cause"] = sig.exc_cause ? nlohmann::json(*sig.exc_cause) : nlohmann::json(nullptr);
    return j;
}

Signature signature_from_json(const nlohmann::json& j) {
    Signature sig;
    const std::string priv = j.at("privilege").get<std::string>();
    sig.privilege = priv == "M"   ? arch::Privilege::M
                    : priv == "S" ? arch::Privilege::S
                                  : arch::Privilege::U;
    const std::string cls = j.at("class").get<std::string>();
    for (auto c : {MnemonicClass::Alu, MnemonicClass::Load, MnemonicClass::Store,
                   MnemonicClass::Branch, MnemonicClass::Jump, MnemonicClass::CsrOp,
                   MnemonicClass::System, MnemonicClass::Fence, MnemonicClass::Unknown})
        if (mnemonic_class_name(c) == cls) sig.mclass = c;
    sig.kind = divergence_kind_from_name(j.at("kind").get<std::string>())
                   .value_or(DivergenceKind::RegValue);
    if (!j.at("csr").is_null())
        sig.csr = isa::csr_from_name(j.at("csr").get<std::string>());
    if (!j.at("cause").is_null()) sig.exc_cause = j.at("cause").get<uint8_t>();
    return sig;
}

}  // namespace

std::string MismatchFilter::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [key, entry] : entries_) {
        nlohmann::json j = signature_json(entry.signature);
        j["classification"] = std::string(classification_name(entry.classification));
        j["count"] = entry.count;
        arr.push_back(std::move(j));
    }
    nlohmann::json root;
    root["signatures"] = std::move(arr);
    return root.dump(2) + "\n";
}

MismatchFilter MismatchFilter::from_json(const std::string& text) {
    MismatchFilter f;
    const auto root = nlohmann::json::parse(text);
    for (const auto& j : root.at("signatures")) {
        Entry e;
        e.signature = signature_from_json(j);
        e.classification = j.at("classification").get<std::string>() == "FALSE_POSITIVE"
                               ? Classification::FalsePositive
                               : Classification::ConfirmedBug;
        e.count = j.value("count", uint64_t{0});
        f.entries_.emplace(e.signature.key(), std::move(e));
    }
    return f;
}

std::string MismatchRecord::to_jsonl() const {
    nlohmann::json j;
    j["testcase"] = testcase_id;
    j["seq"] = divergence.seq;
    j["kind"] = std::string(divergence_kind_name(divergence.kind));
    j["grm"] = hex64(divergence.grm_value);
    j["dut"] = hex64(divergence.dut_value);
    j["signature"] = signature_json(divergence.signature);
    j["program"] = program_text;
    j["register_seed"] = register_seed;
    j["program_hash"] = program_hash;
    j["skip_prefix"] = skip_prefix;
    return j.dump();
}

std::optional<MismatchRecord> MismatchRecord::from_json(const std::string& line) {
    MismatchRecord r;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    r.testcase_id = j.at("testcase").get<std::string>();
    r.divergence.seq = j.at("seq").get<uint32_t>();
    r.divergence.kind = divergence_kind_from_name(j.at("kind").get<std::string>())
                            .value_or(DivergenceKind::RegValue);
    r.divergence.grm_value = std::stoull(j.at("grm").get<std::string>(), nullptr, 16);
    r.divergence.dut_value = std::stoull(j.at("dut").get<std::string>(), nullptr, 16);
    r.divergence.signature = signature_from_json(j.at("signature"));
    r.program_text = j.at("program").get<std::string>();
    r.register_seed = j.at("register_seed").get<uint64_t>();
    r.program_hash = j.at("program_hash").get<uint64_t>();
    r.skip_prefix = j.value("skip_prefix", uint32_t{0});
    return r;
}

}  // namespace twinfuzz::diff
