#include <doctest.h>

#include <cmath>
#include <map>

#include <json.hpp>

#include "twinfuzz/policy.hpp"
#include "twinfuzz/rng.hpp"

#include "test_support.hpp"

using namespace twinfuzz;
using namespace twinfuzz::policy;
using isa::TokenId;

namespace {

std::vector<TokenId> random_stream(uint32_t vocab, size_t n, uint64_t seed) {
    Xoshiro256pp rng(seed);
    std::vector<TokenId> out(n);
    for (auto& t : out) t = static_cast<TokenId>(rng.below(vocab));
    return out;
}

// Parameter paths into the checkpoint JSON: (table, ctx, token or default).
struct ParamRef {
    size_t table;
    std::vector<uint32_t> ctx;
    std::optional<uint32_t> token;  // nullopt = shared default logit
};

std::string hex_bits(double v) {
    char buf[24];
    snprintf(buf, sizeof buf, "%016llx",
             static_cast<unsigned long long>(std::bit_cast<uint64_t>(v)));
    return buf;
}

double bits_hex(const std::string& s) {
    return std::bit_cast<double>(static_cast<uint64_t>(std::stoull(s, nullptr, 16)));
}

nlohmann::json* find_row(nlohmann::json& root, size_t table, const std::vector<uint32_t>& ctx) {
    for (auto& row : root.at("tables")[table])
        if (row.at("ctx").get<std::vector<uint32_t>>() == ctx) return &row;
    return nullptr;
}

double get_param(nlohmann::json& root, const ParamRef& p) {
    auto* row = find_row(root, p.table, p.ctx);
    REQUIRE(row != nullptr);
    if (!p.token) return bits_hex(row->at("d").get<std::string>());
    for (auto& e : row->at("e"))
        if (e[0].get<uint32_t>() == *p.token) return bits_hex(e[1].get<std::string>());
    return bits_hex(row->at("d").get<std::string>());  // implicit: shares the default
}

// Sets one token logit (materializing it) or the shared default.
void set_param(nlohmann::json& root, const ParamRef& p, double value) {
    auto* row = find_row(root, p.table, p.ctx);
    REQUIRE(row != nullptr);
    if (!p.token) {
        (*row)["d"] = hex_bits(value);
        return;
    }
    for (auto& e : row->at("e")) {
        if (e[0].get<uint32_t>() == *p.token) {
            e[1] = hex_bits(value);
            return;
        }
    }
    auto& arr = row->at("e");
    arr.push_back({*p.token, hex_bits(value)});
    std::sort(arr.begin(), arr.end(), [](const nlohmann::json& a, const nlohmann::json& b) {
        return a[0].get<uint32_t>() < b[0].get<uint32_t>();
    });
}

double loss_of(const nlohmann::json& root, std::span<const PreferencePair> batch,
               const RewardParams& rp) {
    Policy p = Policy::load_json(root.dump(), root.at("vocab_hash").get<uint64_t>());
    return p.simpo_update(batch, rp, 0.0).loss;  // lr 0: pure evaluation
}

}  // namespace

TEST_CASE("pretrain on a degenerate corpus concentrates the distribution") {
    // one instruction repeated; its sampling probability approaches 1
    Policy p(1, 8, 2);
    std::vector<TokenId> inst{3, 1, 4, 7};  // 7 acts as <eoi>
    std::vector<TokenId> stream;
    for (int i = 0; i < 50; ++i) stream.insert(stream.end(), inst.begin(), inst.end());
    const auto stats = p.pretrain(stream, 60, 0.5);
    CHECK(stats.final_nll < stats.initial_nll);

    // generation starts at an instruction boundary (after a separator)
    double prob = 1.0;
    std::vector<TokenId> ctx{7};
    for (TokenId t : inst) {
        prob *= p.probabilities(ctx)[t];
        ctx.push_back(t);
    }
    CHECK(prob > 0.99);
}

TEST_CASE("pretrain NLL bounds") {
    SUBCASE("uniform random corpus stays near ln|V| on held-out data") {
        const uint32_t V = 64;
        Policy p(1, V, 3);
        const auto train = random_stream(V, 20000, 11);
        const auto held_out = random_stream(V, 5000, 22);
        p.pretrain(train, 2, 0.2);
        const double nll = p.stream_nll(held_out);
        const double uniform = std::log(static_cast<double>(V));
        CHECK(nll == doctest::Approx(uniform).epsilon(0.05));
        CHECK(nll >= uniform - 1e-9);  // uniform source lower-bounds any model
    }
    SUBCASE("training NLL never increases") {
        Policy p(1, 16, 2);
        const auto train = random_stream(16, 4000, 33);
        const auto stats = p.pretrain(train, 3, 0.3);
        CHECK(stats.final_nll <= stats.initial_nll + 1e-12);
    }
    SUBCASE("out-of-vocabulary token rejected") {
        Policy p(1, 4, 2);
        std::vector<TokenId> bad{1, 9};
        CHECK_THROWS_AS(p.pretrain(bad, 1, 0.1), PolicyError);
    }
}

TEST_CASE("sample_next") {
    Policy p(1, 12, 2);
    const auto train = random_stream(12, 3000, 5);
    p.pretrain(train, 3, 0.4);
    const std::vector<TokenId> ctx{train[0], train[1]};

    SUBCASE("temperature -> 0 gives the argmax token") {
        const auto probs = p.probabilities(ctx);
        const auto best = static_cast<TokenId>(
            std::max_element(probs.begin(), probs.end()) - probs.begin());
        Xoshiro256pp rng(1);
        for (int i = 0; i < 32; ++i) CHECK(p.sample_next(ctx, 0.0, rng) == best);
    }
    SUBCASE("fixed seed reproduces the sample sequence") {
        Xoshiro256pp a(77), b(77);
        for (int i = 0; i < 200; ++i)
            CHECK(p.sample_next(ctx, 1.0, a) == p.sample_next(ctx, 1.0, b));
    }
    SUBCASE("empirical frequencies match the softmax within 3 sigma") {
        const auto probs = p.probabilities(ctx);
        std::vector<uint64_t> counts(probs.size(), 0);
        Xoshiro256pp rng(99);
        const uint64_t draws = 100000;
        for (uint64_t i = 0; i < draws; ++i) ++counts[p.sample_next(ctx, 1.0, rng)];
        for (size_t t = 0; t < probs.size(); ++t) {
            const double np = probs[t] * static_cast<double>(draws);
            const double sigma = std::sqrt(np * (1.0 - probs[t]));
            CAPTURE(t);
            CHECK(std::fabs(static_cast<double>(counts[t]) - np) <= 3.0 * sigma + 1.0);
        }
    }
    SUBCASE("probabilities are a proper distribution") {
        const auto probs = p.probabilities(ctx);
        double sum = 0;
        for (double q : probs) {
            CHECK(q > 0);
            sum += q;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("backoff falls to the longest populated context") {
    Policy p(1, 8, 2);
    // (0,1) is always followed by 2 and (3,1) by 4; the bare (1) context mixes
    std::vector<TokenId> stream;
    for (int i = 0; i < 6; ++i) stream.insert(stream.end(), {0u, 1u, 2u, 3u, 1u, 4u});
    p.pretrain(stream, 4, 0.5);

    // (7, 1) never appeared; its prediction must equal the (1)-context table's
    const std::vector<TokenId> unseen{7, 1};
    const std::vector<TokenId> shorter{1};
    CHECK(p.probabilities(unseen) == p.probabilities(shorter));
    // while the seen (0, 1) context differs from the bare (1) context
    const std::vector<TokenId> seen{0, 1};
    CHECK(p.probabilities(seen) != p.probabilities(shorter));
}

TEST_CASE("sequence reward") {
    const RewardParams rp{10.0, 0.8};

    SUBCASE("uniform policy: analytic value, length-invariant") {
        const uint32_t V = 32;
        Policy p(1, V, 2);
        const double expected = -10.0 * std::log(static_cast<double>(V));
        for (size_t len : {1, 4, 9}) {
            std::vector<TokenId> b(len, 3);
            CHECK(p.sequence_reward(b, rp) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
    SUBCASE("duplicating a sequence leaves the reward unchanged") {
        Policy p(1, 16, 3);
        const auto train = random_stream(16, 2000, 7);
        p.pretrain(train, 2, 0.3);
        // a sequence made of one repeated token has identical per-token
        // contexts when doubled
        std::vector<TokenId> b(5, 9);
        std::vector<TokenId> bb(10, 9);
        // contexts beyond the order saturate, so the doubled sequence adds
        // exactly the same conditional for every appended token
        const double r1 = p.sequence_reward(b, rp);
        const double r2 = p.sequence_reward(bb, rp);
        // length normalization: both are averages of the same saturated
        // conditionals, differing only in the short warm-up span
        CHECK(std::fabs(r2 - r1) < std::fabs(r1));  // same scale
        // exact invariance on a memoryless policy
        Policy uniform(1, 16, 3);
        CHECK(uniform.sequence_reward(b, rp) ==
              doctest::Approx(uniform.sequence_reward(bb, rp)).epsilon(1e-12));
    }
    SUBCASE("higher-likelihood sequence gets a strictly higher reward") {
        Policy p(1, 8, 1);
        std::vector<TokenId> stream{2, 2, 2, 2, 2, 2, 2, 2};
        p.pretrain(stream, 5, 0.5);
        std::vector<TokenId> likely(4, 2);
        std::vector<TokenId> unlikely(4, 5);
        CHECK(p.sequence_reward(likely, rp) > p.sequence_reward(unlikely, rp));
    }
    SUBCASE("empty sequence rejected") {
        Policy p(1, 8, 1);
        CHECK_THROWS_AS(p.sequence_reward({}, rp), PolicyError);
    }
}

TEST_CASE("simpo loss closed-form values") {
    SUBCASE("zero margin surplus gives ln 2") {
        // uniform policy: equal rewards for equal-length sequences; margin 0
        Policy p(1, 6, 1);
        PreferencePair pair;
        pair.winner = {0, 1};
        pair.loser = {2, 3};
        const auto stats = p.simpo_update({&pair, 1}, RewardParams{10.0, 0.0}, 0.0);
        CHECK(stats.loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
    SUBCASE("surplus of one gives -ln sigmoid(1)") {
        // craft logits: single-token sequences with log-prob gap 0.18 under
        // scale 10 and margin 0.8 leave exactly +1 surplus
        Policy base(1, 4, 1);
        auto root = nlohmann::json::parse(base.save_json());
        set_param(root, {0, {}, 0u}, 0.18);
        Policy p = Policy::load_json(root.dump(), 1);
        PreferencePair pair;
        pair.winner = {0};
        pair.loser = {1};
        const auto stats = p.simpo_update({&pair, 1}, RewardParams{10.0, 0.8}, 0.0);
        const double expected = -std::log(1.0 / (1.0 + std::exp(-1.0)));
        CHECK(stats.loss == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("simpo update direction and normalization") {
    Policy p(1, 10, 2);
    const auto train = random_stream(10, 2000, 13);
    p.pretrain(train, 2, 0.3);

    std::vector<PreferencePair> batch;
    Xoshiro256pp rng(4);
    for (int i = 0; i < 6; ++i) {
        PreferencePair pair;
        for (int k = 0; k < 5; ++k) pair.winner.push_back(static_cast<TokenId>(rng.below(10)));
        for (int k = 0; k < 5; ++k) pair.loser.push_back(static_cast<TokenId>(rng.below(10)));
        if (pair.winner == pair.loser) pair.loser[0] = (pair.loser[0] + 1) % 10;
        batch.push_back(std::move(pair));
    }
    const RewardParams rp{10.0, 0.8};

    auto batch_gap = [&](const Policy& pol) {
        double gap = 0;
        for (const auto& pr : batch)
            gap += pol.sequence_reward(pr.winner, rp) - pol.sequence_reward(pr.loser, rp);
        return gap / static_cast<double>(batch.size());
    };

    SUBCASE("one small step never decreases the mean reward gap") {
        const double before = batch_gap(p);
        p.simpo_update(batch, rp, 1e-3);
        const double after = batch_gap(p);
        CHECK(after >= before - 1e-12);
    }
    SUBCASE("loss decreases over repeated steps") {
        double first = p.simpo_update(batch, rp, 0.0).loss;
        for (int i = 0; i < 20; ++i) p.simpo_update(batch, rp, 0.05);
        const double last = p.simpo_update(batch, rp, 0.0).loss;
        CHECK(last < first);
    }
    SUBCASE("touched softmaxes stay normalized within 1e-12") {
        p.simpo_update(batch, rp, 0.1);
        for (const auto& pr : batch) {
            for (size_t i = 0; i < pr.winner.size(); ++i) {
                const auto probs =
                    p.probabilities(std::span(pr.winner).subspan(0, i));
                double sum = 0;
                for (double q : probs) sum += q;
                CHECK(std::fabs(sum - 1.0) < 1e-12);
            }
        }
    }
    SUBCASE("empty batch and out-of-vocab pairs rejected") {
        CHECK_THROWS_AS(p.simpo_update({}, rp, 0.1), PolicyError);
        PreferencePair bad;
        bad.winner = {99};
        bad.loser = {1};
        std::vector<PreferencePair> bb{bad};
        CHECK_THROWS_AS(p.simpo_update(bb, rp, 0.1), PolicyError);
    }
}

TEST_CASE("simpo analytic gradients match central finite differences") {
    // toy vocabulary, order 2, rows populated by a short pretrain
    Policy base(1, 6, 2);
    const auto train = random_stream(6, 300, 21);
    base.pretrain(train, 2, 0.4);

    std::vector<PreferencePair> batch;
    Xoshiro256pp rng(31);
    for (int i = 0; i < 4; ++i) {
        PreferencePair pair;
        for (int k = 0; k < 4; ++k) pair.winner.push_back(static_cast<TokenId>(rng.below(6)));
        for (int k = 0; k < 4; ++k) pair.loser.push_back(static_cast<TokenId>(rng.below(6)));
        if (pair.winner == pair.loser) pair.loser[0] = (pair.loser[0] + 1) % 6;
        batch.push_back(std::move(pair));
    }
    const RewardParams rp{10.0, 0.8};

    auto before = nlohmann::json::parse(base.save_json());

    // The update applies theta -= lr * grad against frozen probabilities, so
    // (before - after) / lr recovers the analytic gradient exactly.
    Policy stepped = Policy::load_json(before.dump(), 1);
    const double lr = 1.0;
    stepped.simpo_update(batch, rp, lr);
    auto after = nlohmann::json::parse(stepped.save_json());

    size_t checked = 0;
    size_t significant = 0;
    for (size_t table = 0; table < after.at("tables").size(); ++table) {
        for (const auto& row : after.at("tables")[table]) {
            const auto ctx = row.at("ctx").get<std::vector<uint32_t>>();
            for (const auto& e : row.at("e")) {
                const ParamRef ref{table, ctx, e[0].get<uint32_t>()};
                const double theta_before = get_param(before, ref);
                const double theta_after = bits_hex(e[1].get<std::string>());
                const double analytic = (theta_before - theta_after) / lr;

                const double h = 1e-5;
                auto plus = before;
                set_param(plus, ref, theta_before + h);
                auto minus = before;
                set_param(minus, ref, theta_before - h);
                const double fd = (loss_of(plus, batch, rp) - loss_of(minus, batch, rp)) /
                                  (2 * h);
                ++checked;
                if (std::fabs(analytic) > 1e-7) ++significant;
                CAPTURE(table);
                CAPTURE(analytic);
                CAPTURE(fd);
                // absolute floor absorbs finite-difference noise on flat params
                const double tol =
                    std::max(1e-9, 1e-5 * std::max(std::fabs(analytic), std::fabs(fd)));
                CHECK(std::fabs(analytic - fd) <= tol);
            }
        }
    }
    CHECK(checked > 50);
    CHECK(significant > 20);
}

TEST_CASE("checkpoints") {
    Policy p(0xABCD, 16, 2);
    const auto train = random_stream(16, 1000, 17);
    p.pretrain(train, 2, 0.3);

    SUBCASE("save/load round trip preserves everything") {
        const auto text = p.save_json();
        Policy q = Policy::load_json(text, 0xABCD);
        CHECK(q.checkpoint_hash() == p.checkpoint_hash());
        CHECK(q.save_json() == text);
        CHECK(q.stream_nll(train) == p.stream_nll(train));
    }
    SUBCASE("vocabulary hash mismatch is refused") {
        CHECK_THROWS_AS(Policy::load_json(p.save_json(), 0xBEEF), PolicyError);
    }
    SUBCASE("pretraining is reproducible") {
        Policy a(0xABCD, 16, 2), b(0xABCD, 16, 2);
        a.pretrain(train, 2, 0.3);
        b.pretrain(train, 2, 0.3);
        CHECK(a.checkpoint_hash() == b.checkpoint_hash());
        CHECK(a.checkpoint_hash() != Policy(0xABCD, 16, 2).checkpoint_hash());
    }
}
