#include "twinfuzz/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>

#include <json.hpp>

namespace twinfuzz::policy {

namespace {

double log_sigmoid(double x) {
    return x < 0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

std::string hex_bits(double v) {
    char buf[24];
    snprintf(buf, sizeof buf, "%016llx",
             static_cast<unsigned long long>(std::bit_cast<uint64_t>(v)));
    return buf;
}

double bits_hex(const std::string& s) {
    return std::bit_cast<double>(static_cast<uint64_t>(std::stoull(s, nullptr, 16)));
}

}  // namespace

std::string_view stage_name(Stage s) { return s == Stage::Grm ? "GRM" : "DUT"; }

double Policy::Row::logit_of(uint32_t token) const {
    auto it = std::lower_bound(logits.begin(), logits.end(), token,
                               [](const auto& p, uint32_t t) { return p.first < t; });
    if (it != logits.end() && it->first == token) return it->second;
    return default_logit;
}

Policy::Row::Norm Policy::Row::norm(uint32_t vocab_size, double inv_temp) const {
    double max_logit = default_logit;
    for (const auto& [tok, l] : logits) max_logit = std::max(max_logit, l);
    max_logit *= inv_temp;
    double z = 0;
    for (const auto& [tok, l] : logits) z += std::exp(l * inv_temp - max_logit);
    const double implicit = static_cast<double>(vocab_size - logits.size());
    z += implicit * std::exp(default_logit * inv_temp - max_logit);
    return {max_logit, z};
}

void Policy::Row::bump(uint32_t token, double delta) {
    auto it = std::lower_bound(logits.begin(), logits.end(), token,
                               [](const auto& p, uint32_t t) { return p.first < t; });
    if (it != logits.end() && it->first == token) {
        it->second += delta;
    } else {
        logits.insert(it, {token, default_logit + delta});
    }
}

Policy::Policy(uint64_t vocab_hash, uint32_t vocab_size, uint32_t context_order)
    : vocab_hash_(vocab_hash), vocab_size_(vocab_size), context_order_(context_order) {
    if (vocab_size_ == 0) throw PolicyError("empty vocabulary");
    tables_.resize(context_order_ + 1);
    tables_[0].emplace(Key{}, Row{});  // empty-context row always exists
}

Policy::Key Policy::make_key(std::span<const isa::TokenId> context, size_t h) {
    Key key;
    key.reserve(h);
    for (size_t i = context.size() - h; i < context.size(); ++i)
        key.push_back(static_cast<char32_t>(context[i]));
    return key;
}

const Policy::Row* Policy::lookup(std::span<const isa::TokenId> context, size_t* h_out) const {
    const size_t max_h = std::min<size_t>(context_order_, context.size());
    for (size_t h = max_h;; --h) {
        auto it = tables_[h].find(make_key(context, h));
        if (it != tables_[h].end()) {
            if (h_out) *h_out = h;
            return &it->second;
        }
        if (h == 0) break;
    }
    if (h_out) *h_out = 0;
    return &tables_[0].begin()->second;
}

Policy::Row* Policy::lookup_mutable(std::span<const isa::TokenId> context, size_t* h_out) {
    return const_cast<Row*>(std::as_const(*this).lookup(context, h_out));
}

double Policy::token_log_prob(const Row& row, uint32_t token) const {
    const auto n = row.norm(vocab_size_, 1.0);
    return row.logit_of(token) - n.max_logit - std::log(n.z);
}

// Cross-entropy descent on one row: target logit up, everything else down by
// p_j * lr, with the shared default carrying the implicit tokens.
void Policy::grad_step(Row& row, uint32_t vocab_size, uint32_t target, double lr) {
    const auto n = row.norm(vocab_size, 1.0);
    const double p_default = std::exp(row.default_logit - n.max_logit) / n.z;
    bool target_explicit = false;
    for (auto& [tok, l] : row.logits) {
        const double p = std::exp(l - n.max_logit) / n.z;
        if (tok == target) {
            l += lr * (1.0 - p);
            target_explicit = true;
        } else {
            l -= lr * p;
        }
    }
    const double d0 = row.default_logit;
    if (!target_explicit) {
        // materialize the target at its pre-step value, then step it
        auto it = std::lower_bound(row.logits.begin(), row.logits.end(), target,
                                   [](const auto& p, uint32_t t) { return p.first < t; });
        row.logits.insert(it, {target, d0 + lr * (1.0 - p_default)});
    }
    row.default_logit = d0 - lr * p_default;
}

Policy::PretrainStats Policy::pretrain(std::span<const isa::TokenId> stream, uint32_t epochs,
                                       double lr) {
    if (stream.empty()) throw PolicyError("pretrain: empty corpus");
    for (isa::TokenId t : stream)
        if (t >= vocab_size_) throw PolicyError("pretrain: token outside vocabulary");

    PretrainStats stats;
    stats.initial_nll = stream_nll(stream);
    stats.epochs = epochs;
    for (uint32_t e = 0; e < epochs; ++e) {
        for (size_t i = 0; i < stream.size(); ++i) {
            const uint32_t target = stream[i];
            const auto context = stream.subspan(0, i);
            const size_t max_h = std::min<size_t>(context_order_, context.size());
            // Every order trains on every position so back-off lands on
            // populated tables instead of falling through to uniform.
            for (size_t h = 0; h <= max_h; ++h) {
                Row& row = tables_[h][make_key(context, h)];
                grad_step(row, vocab_size_, target, lr);
            }
        }
    }
    stats.final_nll = stream_nll(stream);
    return stats;
}

double Policy::stream_nll(std::span<const isa::TokenId> stream) const {
    if (stream.empty()) return 0;
    double total = 0;
    for (size_t i = 0; i < stream.size(); ++i) {
        const Row* row = lookup(stream.subspan(0, i), nullptr);
        total -= token_log_prob(*row, stream[i]);
    }
    return total / static_cast<double>(stream.size());
}

isa::TokenId Policy::sample_next(std::span<const isa::TokenId> context, double temperature,
                                 Xoshiro256pp& rng, double top_p) const {
    const Row* row = lookup(context, nullptr);
    if (temperature < 1e-9) {
        // argmax; ties resolve to the lowest token id
        double best = row->default_logit;
        for (const auto& [tok, l] : row->logits) best = std::max(best, l);
        // lowest id holding `best`: scan explicit entries and the first
        // implicit id
        uint32_t best_tok = UINT32_MAX;
        for (const auto& [tok, l] : row->logits)
            if (l == best) {
                best_tok = tok;
                break;
            }
        if (row->default_logit == best) {
            uint32_t implicit = 0;
            for (const auto& [tok, l] : row->logits) {
                if (tok != implicit) break;
                ++implicit;
            }
            best_tok = std::min(best_tok, implicit);
        }
        return best_tok;
    }

    const double inv_temp = 1.0 / temperature;
    const auto n = row->norm(vocab_size_, inv_temp);
    const double p_default = std::exp(row->default_logit * inv_temp - n.max_logit) / n.z;

    if (top_p < 1.0 && !row->logits.empty()) {
        // nucleus: explicit entries by descending probability, ids break ties
        std::vector<std::pair<double, uint32_t>> order;
        order.reserve(row->logits.size());
        for (const auto& [tok, l] : row->logits)
            order.push_back({std::exp(l * inv_temp - n.max_logit) / n.z, tok});
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        double mass = 0;
        size_t cut = 0;
        while (cut < order.size() && mass < top_p) mass += order[cut++].first;
        if (mass >= top_p) {
            double u = rng.uniform() * mass;
            for (size_t i = 0; i < cut; ++i) {
                u -= order[i].first;
                if (u < 0 || i + 1 == cut) return order[i].second;
            }
        }
        // explicit mass below top_p: fall through to the full distribution
    }

    double u = rng.uniform();
    for (const auto& [tok, l] : row->logits) {
        const double p = std::exp(l * inv_temp - n.max_logit) / n.z;
        u -= p;
        if (u < 0) return tok;
    }
    const uint64_t implicit_count = vocab_size_ - row->logits.size();
    if (implicit_count == 0) return row->logits.back().first;  // rounding residue
    uint64_t k = p_default > 0 ? static_cast<uint64_t>(u / p_default) : 0;
    if (k >= implicit_count) k = implicit_count ? implicit_count - 1 : 0;
    // k-th token id not present in the explicit list
    uint32_t tok = 0;
    auto it = row->logits.begin();
    for (;; ++tok) {
        while (it != row->logits.end() && it->first < tok) ++it;
        if (it != row->logits.end() && it->first == tok) continue;
        if (k == 0) return tok;
        --k;
    }
}

std::vector<double> Policy::probabilities(std::span<const isa::TokenId> context,
                                          double temperature) const {
    const Row* row = lookup(context, nullptr);
    const double inv_temp = 1.0 / temperature;
    const auto n = row->norm(vocab_size_, inv_temp);
    std::vector<double> probs(vocab_size_,
                              std::exp(row->default_logit * inv_temp - n.max_logit) / n.z);
    for (const auto& [tok, l] : row->logits)
        probs[tok] = std::exp(l * inv_temp - n.max_logit) / n.z;
    return probs;
}

double Policy::sequence_log_prob(std::span<const isa::TokenId> tokens) const {
    double total = 0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const Row* row = lookup(tokens.subspan(0, i), nullptr);
        total += token_log_prob(*row, tokens[i]);
    }
    return total;
}

double Policy::sequence_reward(std::span<const isa::TokenId> tokens,
                               const RewardParams& rp) const {
    if (tokens.empty()) throw PolicyError("sequence_reward: empty sequence");
    return rp.reward_scale / static_cast<double>(tokens.size()) * sequence_log_prob(tokens);
}

Policy::UpdateStats Policy::simpo_update(std::span<const PreferencePair> batch,
                                         const RewardParams& rp, double lr) {
    if (batch.empty()) throw PolicyError("simpo_update: empty batch");
    for (const auto& pair : batch) {
        if (pair.winner.empty() || pair.loser.empty())
            throw PolicyError("simpo_update: empty sequence in pair");
        for (isa::TokenId t : pair.winner)
            if (t >= vocab_size_) throw PolicyError("simpo_update: token outside vocabulary");
        for (isa::TokenId t : pair.loser)
            if (t >= vocab_size_) throw PolicyError("simpo_update: token outside vocabulary");
    }

    // Accumulated dL/dlogit per producing row, with the implicit bulk kept as
    // one shared term.
    struct GradRow {
        std::map<uint32_t, double> explicit_grad;
        double default_grad = 0;
    };
    struct RowKey {
        size_t h;
        Key key;
        bool operator<(const RowKey& o) const {
            return h != o.h ? h < o.h : key < o.key;
        }
    };
    std::map<RowKey, GradRow> grads;

    // coeff is d L / d (sum log pi) for this sequence.
    auto accumulate = [&](std::span<const isa::TokenId> tokens, double coeff) {
        for (size_t i = 0; i < tokens.size(); ++i) {
            size_t h = 0;
            const auto context = tokens.subspan(0, i);
            const Row* row = lookup(context, &h);
            GradRow& g = grads[{h, make_key(context, h)}];
            const auto n = row->norm(vocab_size_, 1.0);
            const double p_default = std::exp(row->default_logit - n.max_logit) / n.z;
            const uint32_t target = tokens[i];
            bool target_explicit = false;
            // dL/dl_j = coeff * (1[j == target] - p_j)
            for (const auto& [tok, l] : row->logits) {
                const double p = std::exp(l - n.max_logit) / n.z;
                g.explicit_grad[tok] += coeff * ((tok == target ? 1.0 : 0.0) - p);
                if (tok == target) target_explicit = true;
            }
            g.default_grad += -coeff * p_default;
            if (!target_explicit) {
                // bulk term covers -coeff*p_default; add the indicator part
                g.explicit_grad[target] += coeff;
            }
        }
    };

    double loss = 0;
    for (const auto& pair : batch) {
        const double rw = sequence_reward(pair.winner, rp);
        const double rl = sequence_reward(pair.loser, rp);
        const double delta = rw - rl - rp.margin;
        loss += -log_sigmoid(delta);
        const double dloss_ddelta = -sigmoid(-delta) / static_cast<double>(batch.size());
        accumulate(pair.winner,
                   dloss_ddelta * rp.reward_scale / static_cast<double>(pair.winner.size()));
        accumulate(pair.loser,
                   -dloss_ddelta * rp.reward_scale / static_cast<double>(pair.loser.size()));
    }
    loss /= static_cast<double>(batch.size());

    for (const auto& [rk, g] : grads) {
        Row& row = tables_[rk.h][rk.key];
        const double d0 = row.default_logit;
        for (const auto& [tok, dg] : g.explicit_grad) {
            auto it = std::lower_bound(row.logits.begin(), row.logits.end(), tok,
                                       [](const auto& p, uint32_t t) { return p.first < t; });
            if (it != row.logits.end() && it->first == tok) {
                it->second -= lr * dg;
            } else {
                // token was implicit: its gradient is the bulk term plus its
                // explicit correction
                row.logits.insert(it, {tok, d0 - lr * (dg + g.default_grad)});
            }
        }
        row.default_logit = d0 - lr * g.default_grad;
    }

    return {loss, batch.size()};
}

uint64_t Policy::checkpoint_hash() const {
    Fnv1a h;
    h.update_u64(vocab_hash_);
    h.update_u64(vocab_size_);
    h.update_u64(context_order_);
    for (size_t order = 0; order < tables_.size(); ++order) {
        std::vector<const Key*> keys;
        keys.reserve(tables_[order].size());
        for (const auto& [key, row] : tables_[order]) keys.push_back(&key);
        std::sort(keys.begin(), keys.end(), [](const Key* a, const Key* b) { return *a < *b; });
        for (const Key* key : keys) {
            h.update_u64(order);
            for (char32_t t : *key) h.update_u64(static_cast<uint64_t>(t));
            const Row& row = tables_[order].at(*key);
            h.update_u64(std::bit_cast<uint64_t>(row.default_logit));
            for (const auto& [tok, l] : row.logits) {
                h.update_u64(tok);
                h.update_u64(std::bit_cast<uint64_t>(l));
            }
        }
    }
    return h.value();
}

std::string Policy::save_json() const {
    nlohmann::json root;
    root["format"] = "twinfuzz-policy-v1";
    root["vocab_hash"] = vocab_hash_;
    root["vocab_size"] = vocab_size_;
    root["context_order"] = context_order_;
    nlohmann::json tables = nlohmann::json::array();
    for (size_t order = 0; order < tables_.size(); ++order) {
        std::vector<const Key*> keys;
        for (const auto& [key, row] : tables_[order]) keys.push_back(&key);
        std::sort(keys.begin(), keys.end(), [](const Key* a, const Key* b) { return *a < *b; });
        nlohmann::json rows = nlohmann::json::array();
        for (const Key* key : keys) {
            const Row& row = tables_[order].at(*key);
            nlohmann::json jr;
            std::vector<uint32_t> ctx(key->begin(), key->end());
            jr["ctx"] = ctx;
            jr["d"] = hex_bits(row.default_logit);
            nlohmann::json e = nlohmann::json::array();
            for (const auto& [tok, l] : row.logits) e.push_back({tok, hex_bits(l)});
            jr["e"] = std::move(e);
            rows.push_back(std::move(jr));
        }
        tables.push_back(std::move(rows));
    }
    root["tables"] = std::move(tables);
    return root.dump();
}

Policy Policy::load_json(const std::string& text, uint64_t expected_vocab_hash) {
    const auto root = nlohmann::json::parse(text);
    if (root.value("format", "") != std::string("twinfuzz-policy-v1"))
        throw PolicyError("checkpoint: unknown format");
    const auto vocab_hash = root.at("vocab_hash").get<uint64_t>();
    if (vocab_hash != expected_vocab_hash)
        throw PolicyError("checkpoint: vocabulary hash mismatch, refusing to load");
    Policy p(vocab_hash, root.at("vocab_size").get<uint32_t>(),
             root.at("context_order").get<uint32_t>());
    const auto& tables = root.at("tables");
    for (size_t order = 0; order < tables.size(); ++order) {
        for (const auto& jr : tables[order]) {
            Key key;
            for (const auto& t : jr.at("ctx")) key.push_back(static_cast<char32_t>(t.get<uint32_t>()));
            Row row;
            row.default_logit = bits_hex(jr.at("d").get<std::string>());
            for (const auto& e : jr.at("e"))
                row.logits.push_back({e[0].get<uint32_t>(), bits_hex(e[1].get<std::string>())});
            p.tables_[order][std::move(key)] = std::move(row);
        }
    }
    return p;
}

size_t Policy::row_count() const {
    size_t n = 0;
    for (const auto& table : tables_) n += table.size();
    return n;
}

}  // namespace twinfuzz::policy
