#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "twinfuzz/isa.hpp"
#include "twinfuzz/rng.hpp"

namespace twinfuzz::policy {

struct RewardParams {
    double reward_scale = 10.0;  // sequence-likelihood scale
    double margin = 0.8;         // target reward margin

    bool valid() const { return reward_scale > 0 && margin >= 0; }
};

enum class Stage : uint8_t { Grm, Dut };
std::string_view stage_name(Stage s);

struct PreferencePair {
    std::vector<isa::TokenId> winner;
    std::vector<isa::TokenId> loser;
    uint32_t iteration = 0;
    Stage stage = Stage::Grm;
};

class PolicyError : public std::exception {
public:
    explicit PolicyError(std::string msg) : msg_(std::move(msg)) {}
    const char* what() const noexcept override { return msg_.c_str(); }

private:
    std::string msg_;
};

// Autoregressive next-token policy over back-off logit tables.
//
// One table per context length h in [0, context_order]; a lookup walks from
// the longest context suffix down to the (always present) empty context, and
// training gradients flow into whichever table produced the logits. Rows
// store an explicit (token, logit) list plus one shared default logit for all
// unlisted tokens, which keeps softmax gradients exact without densifying.
class Policy {
public:
    Policy(uint64_t vocab_hash, uint32_t vocab_size, uint32_t context_order);

    uint64_t vocab_hash() const { return vocab_hash_; }
    uint32_t vocab_size() const { return vocab_size_; }
    uint32_t context_order() const { return context_order_; }

    struct PretrainStats {
        double initial_nll = 0;  // per-token, before training
        double final_nll = 0;    // per-token, after training
        uint32_t epochs = 0;
    };
    // Stream is the corpus tokens with <eoi> separators already in place.
    PretrainStats pretrain(std::span<const isa::TokenId> stream, uint32_t epochs, double lr);

    // Mean per-token negative log-likelihood of a stream under the current
    // parameters.
    double stream_nll(std::span<const isa::TokenId> stream) const;

    // top_p < 1 restricts sampling to the smallest explicit-logit prefix
    // whose mass reaches top_p (nucleus truncation). The tied implicit bulk
    // is never split, so untrained contexts keep the full distribution.
    isa::TokenId sample_next(std::span<const isa::TokenId> context, double temperature,
                             Xoshiro256pp& rng, double top_p = 1.0) const;

    // Full distribution for a context (tests and statistics).
    std::vector<double> probabilities(std::span<const isa::TokenId> context,
                                      double temperature = 1.0) const;

    double sequence_log_prob(std::span<const isa::TokenId> tokens) const;
    // (reward_scale / |b|) * sum_i log pi(t_i | t_<i); throws on empty input.
    double sequence_reward(std::span<const isa::TokenId> tokens, const RewardParams& rp) const;

    struct UpdateStats {
        double loss = 0;  // pre-step batch loss
        size_t pairs = 0;
    };
    // One gradient step on the preference loss
    //   L = -mean log sigmoid(r(b_w) - r(b_l) - margin)
    // computed against frozen pre-step parameters.
    UpdateStats simpo_update(std::span<const PreferencePair> batch, const RewardParams& rp,
                             double lr);

    uint64_t checkpoint_hash() const;
    std::string save_json() const;
    static Policy load_json(const std::string& text, uint64_t expected_vocab_hash);

    size_t row_count() const;

private:
    struct Row {
        double default_logit = 0;
        std::vector<std::pair<uint32_t, double>> logits;  // sorted by token id

        double logit_of(uint32_t token) const;
        // Σ e^(l - max) over all vocab_size tokens plus the running max.
        struct Norm {
            double max_logit;
            double z;
        };
        Norm norm(uint32_t vocab_size, double inv_temp) const;
        void bump(uint32_t token, double delta);  // materializes from default
    };

    using Key = std::u32string;  // packed context token ids

    static Key make_key(std::span<const isa::TokenId> context, size_t h);

    // Longest-match lookup; h_out is the producing table. Never fails: the
    // empty-context row exists from construction.
    const Row* lookup(std::span<const isa::TokenId> context, size_t* h_out) const;
    Row* lookup_mutable(std::span<const isa::TokenId> context, size_t* h_out);

    double token_log_prob(const Row& row, uint32_t token) const;
    static void grad_step(Row& row, uint32_t vocab_size, uint32_t target, double lr);

    uint64_t vocab_hash_;
    uint32_t vocab_size_;
    uint32_t context_order_;
    std::vector<std::unordered_map<Key, Row>> tables_;  // index = context length
};

}  // namespace twinfuzz::policy
