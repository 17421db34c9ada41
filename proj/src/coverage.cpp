#include "twinfuzz/coverage.hpp"

#include <bit>

#include <json.hpp>

#include "twinfuzz/rng.hpp"

namespace twinfuzz::cov {

namespace {

using isa::Mnemonic;

constexpr const char* kPrivNames[3] = {"U", "S", "M"};

bool is_alu(Mnemonic m) {
    const auto i = static_cast<size_t>(m);
    return i <= static_cast<size_t>(Mnemonic::Auipc);
}

bool is_load(Mnemonic m) {
    return m >= Mnemonic::Lb && m <= Mnemonic::Lwu;
}

bool is_store(Mnemonic m) {
    return m >= Mnemonic::Sb && m <= Mnemonic::Sd;
}

bool is_jump(Mnemonic m) { return m == Mnemonic::Jal || m == Mnemonic::Jalr; }

bool is_csrop(Mnemonic m) {
    return m >= Mnemonic::Csrrw && m <= Mnemonic::Csrrci;
}

bool is_system(Mnemonic m) {
    return m >= Mnemonic::Mret && m <= Mnemonic::HfenceGvma;
}

constexpr const char* kLoadActions[3] = {"addr", "access", "writeback"};
constexpr const char* kStoreActions[2] = {"addr", "access"};
constexpr const char* kJumpActions[2] = {"link", "redirect"};
constexpr const char* kCsrActions[3] = {"read", "write", "writeback"};
constexpr const char* kTrapSites[4] = {"trap_entry/m", "trap_entry/s", "trap_return/m", "trap_return/s"};

constexpr uint8_t kDelegCauses[5] = {2, 5, 7, 8, 9};
constexpr unsigned kMipBits[3] = {1, 5, 9};
constexpr const char* kEventNames[3] = {"trap", "mret", "sret"};

std::string pred_site(uint32_t pred) {
    using M = CoverageModel;
    if (pred < M::kPredCsrWriteTrim)
        return "csr_priv_ok/" + std::string(isa::csr_name(static_cast<isa::Csr>(pred - M::kPredCsrPriv)));
    if (pred < M::kPredEndianBigM)
        return "csr_write_trims/" + std::string(isa::csr_name(static_cast<isa::Csr>(pred - M::kPredCsrWriteTrim)));
    if (pred == M::kPredEndianBigM) return "endian_big/m";
    if (pred == M::kPredEndianBigS) return "endian_big/s";
    if (pred >= M::kPredDelegBase && pred < M::kPredMipMaskBase)
        return "medeleg_routes/" + std::to_string(kDelegCauses[pred - M::kPredDelegBase]);
    if (pred >= M::kPredMipMaskBase && pred < M::kPredPmpActive)
        return "mip_read_masks/" + std::to_string(kMipBits[pred - M::kPredMipMaskBase]);
    if (pred == M::kPredPmpActive) return "pmp/entry_active";
    if (pred == M::kPredPmpMatch) return "pmp/match";
    if (pred == M::kPredPmpGrant) return "pmp/grant";
    if (pred >= M::kPredBranchBase && pred < M::kPredTvecVectoredM) {
        const auto m = static_cast<Mnemonic>(static_cast<size_t>(Mnemonic::Beq) + (pred - M::kPredBranchBase));
        return "branch_taken/" + std::string(isa::mnemonic_name(m));
    }
    if (pred == M::kPredTvecVectoredM) return "tvec_vectored/m";
    if (pred == M::kPredTvecVectoredS) return "tvec_vectored/s";
    if (pred == M::kPredTvmGate) return "gate/tvm";
    if (pred == M::kPredTwGate) return "gate/tw";
    if (pred == M::kPredTsrGate) return "gate/tsr";
    if (pred == M::kPredMemMisaligned) return "mem/misaligned";
    if (pred == M::kPredMemInWindow) return "mem/in_window";
    if (pred == M::kPredRdIsX0) return "rd_is_x0";
    return "?";
}

}  // namespace

CoverageModel::CoverageModel() {
    auto add = [&](PointKind kind, std::string site) {
        points_.push_back({static_cast<uint32_t>(points_.size()), kind, std::move(site)});
    };

    exec_base_ = size();
    for (size_t i = 0; i < isa::kRealMnemonicCount; ++i)
        for (unsigned p = 0; p < 3; ++p)
            add(PointKind::Line, "exec/" + std::string(isa::mnemonic_name(static_cast<Mnemonic>(i))) +
                                     "/" + kPrivNames[p]);

    alu_base_ = size();
    for (size_t i = 0; i < isa::kRealMnemonicCount; ++i)
        if (is_alu(static_cast<Mnemonic>(i)))
            add(PointKind::Line, "alu_writeback/" + std::string(isa::mnemonic_name(static_cast<Mnemonic>(i))));

    load_base_ = size();
    for (size_t i = 0; i < isa::kRealMnemonicCount; ++i)
        if (is_load(static_cast<Mnemonic>(i)))
            for (unsigned a = 0; a < 3; ++a)
                add(PointKind::Line, "load_" + std::string(kLoadActions[a]) + "/" +
                                         std::string(isa::mnemonic_name(static_cast<Mnemonic>(i))));

    store_base_ = size();
    for (size_t i = 0; i < isa::kRealMnemonicCount; ++i)
        if (is_store(static_cast<Mnemonic>(i)))
            for (unsigned a = 0; a < 2; ++a)
                add(PointKind::Line, "store_" + std::string(kStoreActions[a]) + "/" +
                                         std::string(isa::mnemonic_name(static_cast<Mnemonic>(i))));

    jump_base_ = size();
    for (Mnemonic m : {Mnemonic::Jal, Mnemonic::Jalr})
        for (unsigned a = 0; a < 2; ++a)
            add(PointKind::Line, "jump_" + std::string(kJumpActions[a]) + "/" +
                                     std::string(isa::mnemonic_name(m)));

    csrop_base_ = size();
    for (size_t i = 0; i < isa::kRealMnemonicCount; ++i)
        if (is_csrop(static_cast<Mnemonic>(i)))
            for (unsigned a = 0; a < 3; ++a)
                add(PointKind::Line, "csrop_" + std::string(kCsrActions[a]) + "/" +
                                         std::string(isa::mnemonic_name(static_cast<Mnemonic>(i))));

    sys_base_ = size();
    for (size_t i = 0; i < isa::kRealMnemonicCount; ++i)
        if (is_system(static_cast<Mnemonic>(i)))
            add(PointKind::Line, "system_effect/" + std::string(isa::mnemonic_name(static_cast<Mnemonic>(i))));

    csr_rw_base_ = size();
    for (size_t i = 0; i < isa::kCsrCount; ++i) {
        add(PointKind::Line, "csr_read/" + std::string(isa::csr_name(static_cast<isa::Csr>(i))));
        add(PointKind::Line, "csr_write/" + std::string(isa::csr_name(static_cast<isa::Csr>(i))));
    }

    trap_base_ = size();
    for (const char* s : kTrapSites) add(PointKind::Line, s);

    memw_base_ = size();
    for (const char* rw : {"read", "write"})
        for (unsigned w : {1, 2, 4, 8})
            add(PointKind::Line, "mem_" + std::string(rw) + "/w" + std::to_string(w));

    swap_base_ = size();
    add(PointKind::Line, "byteswap/load");
    add(PointKind::Line, "byteswap/store");

    cond_base_ = size();
    for (uint32_t p = 0; p < kPredCount; ++p) {
        add(PointKind::CondTrue, "cond/" + pred_site(p) + "/T");
        add(PointKind::CondFalse, "cond/" + pred_site(p) + "/F");
    }

    fsm_base_ = size();
    static constexpr struct { unsigned from, to, ev; } kEdges[] = {
        {2, 2, 0}, {1, 2, 0}, {0, 2, 0}, {1, 1, 0}, {0, 1, 0},
        {2, 2, 1}, {2, 1, 1}, {2, 0, 1},
        {1, 1, 2}, {1, 0, 2}, {2, 1, 2}, {2, 0, 2},
    };
    for (const auto& e : kEdges)
        add(PointKind::FsmEdge, "fsm/" + std::string(kPrivNames[e.from]) + "->" +
                                    kPrivNames[e.to] + "/" + kEventNames[e.ev]);
}

const CoverageModel& CoverageModel::instance() {
    static const CoverageModel model;
    return model;
}

uint64_t CoverageModel::table_hash() const {
    Fnv1a h;
    for (const auto& p : points_) {
        h.update_u64(p.id);
        h.update_u64(static_cast<uint64_t>(p.kind));
        h.update_str(p.site);
    }
    return h.value();
}

uint32_t CoverageModel::exec(Mnemonic m, unsigned priv_idx) const {
    return exec_base_ + static_cast<uint32_t>(m) * 3 + priv_idx;
}

namespace {
// Dense index of m within the subset of kRealMnemonicCount satisfying `pred`.
template <typename Pred>
uint32_t dense_index(Mnemonic m, Pred pred) {
    uint32_t idx = 0;
    for (size_t i = 0; i < static_cast<size_t>(m); ++i)
        if (pred(static_cast<Mnemonic>(i))) ++idx;
    return idx;
}
}  // namespace

uint32_t CoverageModel::alu_writeback(Mnemonic m) const {
    return alu_base_ + dense_index(m, is_alu);
}
uint32_t CoverageModel::load_action(Mnemonic m, unsigned action) const {
    return load_base_ + dense_index(m, is_load) * 3 + action;
}
uint32_t CoverageModel::store_action(Mnemonic m, unsigned action) const {
    return store_base_ + dense_index(m, is_store) * 2 + action;
}
uint32_t CoverageModel::jump_action(Mnemonic m, unsigned action) const {
    return jump_base_ + (m == Mnemonic::Jalr ? 2 : 0) + action;
}
uint32_t CoverageModel::csrop_action(Mnemonic m, unsigned action) const {
    return csrop_base_ + dense_index(m, is_csrop) * 3 + action;
}
uint32_t CoverageModel::system_effect(Mnemonic m) const {
    return sys_base_ + dense_index(m, is_system);
}
uint32_t CoverageModel::csr_read_site(isa::Csr c) const {
    return csr_rw_base_ + static_cast<uint32_t>(c) * 2;
}
uint32_t CoverageModel::csr_write_site(isa::Csr c) const {
    return csr_rw_base_ + static_cast<uint32_t>(c) * 2 + 1;
}
uint32_t CoverageModel::trap_site(unsigned which) const { return trap_base_ + which; }
uint32_t CoverageModel::mem_width(bool is_write, uint8_t width) const {
    const unsigned slot = width == 1 ? 0 : width == 2 ? 1 : width == 4 ? 2 : 3;
    return memw_base_ + (is_write ? 4 : 0) + slot;
}
uint32_t CoverageModel::byteswap(bool is_store) const {
    return swap_base_ + (is_store ? 1 : 0);
}
uint32_t CoverageModel::cond(uint32_t pred, bool taken) const {
    return cond_base_ + pred * 2 + (taken ? 0 : 1);
}

uint32_t CoverageModel::fsm_edge(unsigned from_idx, unsigned to_idx, unsigned event) const {
    static constexpr struct { unsigned from, to, ev; } kEdges[] = {
        {2, 2, 0}, {1, 2, 0}, {0, 2, 0}, {1, 1, 0}, {0, 1, 0},
        {2, 2, 1}, {2, 1, 1}, {2, 0, 1},
        {1, 1, 2}, {1, 0, 2}, {2, 1, 2}, {2, 0, 2},
    };
    for (uint32_t i = 0; i < std::size(kEdges); ++i)
        if (kEdges[i].from == from_idx && kEdges[i].to == to_idx && kEdges[i].ev == event)
            return fsm_base_ + i;
    return fsm_base_;  // unreachable for legal transitions
}

unsigned CoverageModel::deleg_slot(uint8_t cause) {
    for (unsigned i = 0; i < 5; ++i)
        if (kDelegCauses[i] == cause) return i;
    return UINT32_MAX;
}

unsigned CoverageModel::mip_bit_slot(unsigned bit) {
    for (unsigned i = 0; i < 3; ++i)
        if (kMipBits[i] == bit) return i;
    return UINT32_MAX;
}

size_t CoverageSet::count() const {
    size_t n = 0;
    for (uint64_t w : bits_) n += std::popcount(w);
    return n;
}

CoverageSet& CoverageSet::operator|=(const CoverageSet& other) {
    for (size_t i = 0; i < bits_.size(); ++i) bits_[i] |= other.bits_[i];
    return *this;
}

CoverageSet CoverageSet::minus(const CoverageSet& other) const {
    CoverageSet out(universe_);
    for (size_t i = 0; i < bits_.size(); ++i) out.bits_[i] = bits_[i] & ~other.bits_[i];
    return out;
}

bool CoverageSet::subset_of(const CoverageSet& other) const {
    for (size_t i = 0; i < bits_.size(); ++i)
        if (bits_[i] & ~other.bits_[i]) return false;
    return true;
}

std::vector<uint32_t> CoverageSet::ids() const {
    std::vector<uint32_t> out;
    for (uint32_t id = 0; id < universe_; ++id)
        if (contains(id)) out.push_back(id);
    return out;
}

std::string CoverageSet::to_json() const {
    nlohmann::json arr = ids();
    return arr.dump();
}

CoverageSet CoverageSet::from_json(const std::string& text, uint32_t universe) {
    CoverageSet out(universe);
    for (const auto& v : nlohmann::json::parse(text)) out.add(v.get<uint32_t>());
    return out;
}

}  // namespace twinfuzz::cov
