#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "retroflow/canonical.hpp"
#include "retroflow/corpus.hpp"
#include "retroflow/eval.hpp"
#include "retroflow/smiles.hpp"

using namespace retroflow;

namespace {

EncoderConfig small_config() {
    EncoderConfig cfg;
    cfg.hidden_dim = 8;
    cfg.gnn1_layers = 2;
    cfg.gnn2_layers = 1;
    cfg.attention_heads = 2;
    return cfg;
}

// Same enumerable environment test_train converges on: one single-atom
// product pattern (amine N), three reactant patterns, 28 trajectories into
// 20 terminals on NCCN with max_reactants = 2.
PatternLibrary diamine_library() {
    PatternLibrary lib;
    {
        PatternGraph pp;  // one mappable amine N
        Atom n;
        n.symbol = "N";
        n.implicit_h = 2;
        pp.graph.add_atom(n);
        pp.mappable = {0};
        pp.origin = {OriginFeatures{true, 0, 0}};
        lib.intern_pp(normalize_pattern(pp));
    }
    {
        PatternGraph rp;  // lone N, identity
        Atom n;
        n.symbol = "N";
        n.implicit_h = 2;
        rp.graph.add_atom(n);
        rp.mappable = {0};
        rp.origin = {OriginFeatures{true, 0, 0}};
        lib.intern_rp(normalize_pattern(rp));
    }
    {
        PatternGraph rp;  // N-C: the mapped N trades one H for the context bond
        Atom n;
        n.symbol = "N";
        n.implicit_h = 1;
        Atom c;
        c.symbol = "C";
        c.implicit_h = 3;
        rp.graph.add_atom(n);
        rp.graph.add_atom(c);
        rp.graph.add_bond(0, 1, BondOrder::Single);
        rp.mappable = {0};
        rp.origin = {OriginFeatures{true, 0, -1}, OriginFeatures{false, 0, 0}};
        lib.intern_rp(normalize_pattern(rp));
    }
    {
        PatternGraph rp;  // spectator methane
        Atom c;
        c.symbol = "C";
        c.implicit_h = 4;
        rp.graph.add_atom(c);
        rp.mappable = {0};
        rp.origin = {OriginFeatures{true, 0, 0}};
        lib.intern_rp(normalize_pattern(rp));
    }
    return lib;
}

// Exact per-reaction probability mass of the tempered policy, by memoized
// recursion over the state DAG. The sampling estimator must converge to this.
std::map<std::string, double> exact_reaction_mass(Policy& policy, const PatternLibrary& lib,
                                                  const EnvConfig& env, const MolGraph& product,
                                                  double alpha) {
    std::map<std::string, std::map<std::string, double>> memo;
    std::function<std::map<std::string, double>(const State&)> mass =
        [&](const State& s) -> std::map<std::string, double> {
        if (s.phase == Phase::Terminal) return {{s.reaction, 1.0}};
        std::string key = state_key(s);
        auto it = memo.find(key);
        if (it != memo.end()) return it->second;
        std::vector<Action> actions = enumerate_actions(s, lib, env);
        std::map<std::string, double> dist;
        if (!actions.empty()) {
            Tape tape;
            Policy::Context ctx{&tape};
            std::vector<double> probs = policy.action_distribution(ctx, s, actions, lib, alpha);
            for (std::size_t i = 0; i < actions.size(); ++i) {
                StepResult r = step(s, actions[i], lib, env);
                REQUIRE(r.ok);
                for (const auto& [rkey, m] : mass(r.state)) dist[rkey] += probs[i] * m;
            }
        }
        memo[key] = dist;
        return dist;
    };
    return mass(initial_state(product));
}

std::vector<MolGraph> parse_reactants(const std::string& dotted, const std::string& product) {
    return parse_reaction(dotted + ">>" + product).reactants;
}

RankedPredictions synthetic_row(const std::string& product,
                                const std::vector<std::pair<std::string, double>>& entries) {
    RankedPredictions row;
    row.product = parse_smiles(product);
    row.product_key = canonical_key(row.product);
    for (const auto& [dotted, p] : entries) {
        RankedPrediction item;
        item.reactants = parse_reactants(dotted, product);
        item.key = reaction_key(item.reactants, row.product);
        item.p = p;
        row.items.push_back(std::move(item));
    }
    return row;
}

// Backtranslation stub driven by an explicit pass list of reaction keys.
BacktranslateFn passes(std::unordered_set<std::string> keys) {
    return [keys = std::move(keys)](const std::vector<MolGraph>& rs, const MolGraph& p) {
        return keys.count(reaction_key(rs, p)) ? 1 : 0;
    };
}

}  // namespace

TEST_CASE("top-k accuracy and MRR match the hand-computed fixture") {
    // Ground truth ranks across the three products: 1, 4, absent.
    std::vector<ReactionRecord> dataset = {
        parse_reaction("CC.O>>CCO"),
        parse_reaction("CC.N>>CCN"),
        parse_reaction("C.CC>>CCC"),
    };
    std::vector<RankedPredictions> preds = {
        synthetic_row("CCO", {{"CC.O", 0.5}, {"CCC", 0.2}}),
        synthetic_row("CCN", {{"CCO", 0.4}, {"C.CO", 0.3}, {"CCCC", 0.2}, {"CC.N", 0.1}}),
        synthetic_row("CCC", {{"CCO", 0.4}, {"CCN", 0.3}, {"CCCC", 0.2}}),
    };

    std::vector<int> ks = default_k_grid();
    REQUIRE(ks == std::vector<int>{1, 3, 5, 10, 20, 50});
    std::vector<double> acc = topk_accuracy(preds, dataset, ks);
    CHECK(acc[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));  // k=1
    CHECK(acc[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));  // k=3
    CHECK(acc[2] == doctest::Approx(2.0 / 3).epsilon(1e-12));  // k=5
    CHECK(acc[5] == doctest::Approx(2.0 / 3).epsilon(1e-12));  // k=50: rank-4 still the last hit
    CHECK(mrr(preds, dataset) == doctest::Approx((1.0 + 0.25 + 0.0) / 3).epsilon(1e-12));

    SUBCASE("top-k accuracy is non-decreasing in k") {
        for (std::size_t i = 1; i < acc.size(); ++i) CHECK(acc[i] >= acc[i - 1]);
    }

    SUBCASE("a dataset product with no predictions scores zero but is counted") {
        dataset.push_back(parse_reaction("CO.C>>COC"));
        std::vector<double> padded = topk_accuracy(preds, dataset, ks);
        CHECK(padded[2] == doctest::Approx(2.0 / 4).epsilon(1e-12));
        CHECK(mrr(preds, dataset) == doctest::Approx((1.0 + 0.25 + 0.0) / 4).epsilon(1e-12));
    }

    SUBCASE("any same-product dataset reaction counts as a hit") {
        // Second acceptable ground truth for CCC sits at rank 2.
        dataset.push_back(parse_reaction("CCN>>CCC"));
        std::vector<double> acc2 = topk_accuracy(preds, dataset, ks);
        // Both CCC rows now hit at rank 2: hits at k=3 are CCO(1) + CCC(2) + CCC(2).
        CHECK(acc2[1] == doctest::Approx(3.0 / 4).epsilon(1e-12));
    }

    SUBCASE("input validation") {
        CHECK_THROWS_AS(topk_accuracy(preds, {}, ks), std::invalid_argument);
        CHECK_THROWS_AS(topk_accuracy(preds, dataset, {}), std::invalid_argument);
        CHECK_THROWS_AS(topk_accuracy(preds, dataset, {0}), std::invalid_argument);
    }
}

TEST_CASE("round-trip fraction matches the per-product fixture") {
    std::vector<RankedPredictions> preds = {
        synthetic_row("CCO", {{"CC.O", 0.5}, {"C.CO", 0.3}, {"CCC", 0.1}}),
        synthetic_row("CCN", {{"CC.N", 0.5}, {"C.CN", 0.3}, {"CCC", 0.1}}),
        synthetic_row("CCC", {{"C.CC", 0.5}, {"CCCC", 0.3}, {"CCO", 0.1}}),
    };

    // Per-product passing fractions at k=3: 2/3, 1/3, 3/3.
    std::unordered_set<std::string> pass_keys;
    auto key_of = [&](const RankedPredictions& row, int i) { return row.items[i].key; };
    pass_keys.insert(key_of(preds[0], 0));
    pass_keys.insert(key_of(preds[0], 1));
    pass_keys.insert(key_of(preds[1], 2));
    pass_keys.insert(key_of(preds[2], 0));
    pass_keys.insert(key_of(preds[2], 1));
    pass_keys.insert(key_of(preds[2], 2));
    BacktranslateFn bt = passes(pass_keys);

    std::vector<int> ks = {1, 3};
    std::vector<double> rt = round_trip(preds, bt, ks);
    CHECK(rt[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    // k=1: rows pass {1, 0, 1} at rank 1.
    CHECK(rt[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));

    SUBCASE("short lists divide by k, not by their length") {
        std::vector<RankedPredictions> shorty = {synthetic_row("CCO", {{"CC.O", 0.9}})};
        std::vector<double> r = round_trip(shorty, passes({shorty[0].items[0].key}), {3});
        CHECK(r[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }

    SUBCASE("values stay within the unit interval") {
        for (double v : round_trip(preds, bt, default_k_grid())) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }

    SUBCASE("input validation") {
        CHECK_THROWS_AS(round_trip({}, bt, ks), std::invalid_argument);
        CHECK_THROWS_AS(round_trip(preds, BacktranslateFn{}, ks), std::invalid_argument);
    }
}

TEST_CASE("feasible top-k fraction applies the threshold and the corpus convention") {
    RankedPredictions row =
        synthetic_row("CCO", {{"CC.O", 0.5}, {"C.CO", 0.3}, {"CCC", 0.1}});
    std::unordered_map<std::string, double> scores = {
        {row.items[0].key, 0.95},
        {row.items[1].key, 0.5},
        {row.items[2].key, 0.91},
    };
    FeasibilityProxy scorer = [&scores](const std::vector<MolGraph>& rs, const MolGraph& p) {
        return scores.at(reaction_key(rs, p));
    };
    std::vector<RankedPredictions> preds = {row};

    std::vector<double> f = ftc(preds, scorer, {}, 0.9, {3});
    CHECK(f[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));

    SUBCASE("known reactions are feasible regardless of their score") {
        std::unordered_set<std::string> corpus_keys = {row.items[1].key};
        std::vector<double> g = ftc(preds, scorer, corpus_keys, 0.9, {3});
        CHECK(g[0] == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("threshold is inclusive") {
        std::vector<double> g = ftc(preds, scorer, {}, 0.91, {3});
        CHECK(g[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));
        g = ftc(preds, scorer, {}, 0.95, {3});
        CHECK(g[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }
}

TEST_CASE("scaffold diversity counts distinct ring frameworks of accepted proposals") {
    // Three passing proposals carrying two distinct ring systems: cyclohexane
    // (twice, once decorated) and benzene. Acyclic reactants contribute none.
    RankedPredictions row = synthetic_row("C1CCCCC1CO", {{"C1CCCCC1.CO", 0.5},
                                                         {"CC1CCCCC1.O", 0.3},
                                                         {"c1ccccc1.CCO", 0.1}});
    BacktranslateFn all_pass = [](const std::vector<MolGraph>&, const MolGraph&) { return 1; };
    std::vector<RankedPredictions> preds = {row};

    std::vector<double> d = scaffold_diversity(preds, all_pass, {1, 3});
    CHECK(d[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(d[1] == doctest::Approx(2.0).epsilon(1e-12));

    SUBCASE("non-decreasing in k") {
        std::vector<double> grid = scaffold_diversity(preds, all_pass, default_k_grid());
        for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] >= grid[i - 1]);
    }

    SUBCASE("rejected proposals contribute nothing") {
        BacktranslateFn only_first = passes({row.items[0].key});
        std::vector<double> g = scaffold_diversity(preds, only_first, {3});
        CHECK(g[0] == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("an all-acyclic proposal set scores zero") {
        std::vector<RankedPredictions> acyclic = {
            synthetic_row("CCO", {{"CC.O", 0.5}})};
        std::vector<double> g = scaffold_diversity(acyclic, all_pass, {3});
        CHECK(g[0] == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("filter ablation drops exactly the non-round-tripping proposals in order") {
    std::vector<RankedPredictions> preds = {
        synthetic_row("CCO", {{"CC.O", 0.5}, {"C.CO", 0.3}, {"CCC", 0.1}}),
        synthetic_row("CCN", {{"CC.N", 0.5}, {"CCCC", 0.3}}),
    };
    std::unordered_set<std::string> pass_keys = {preds[0].items[0].key, preds[0].items[2].key};
    BacktranslateFn bt = passes(pass_keys);

    std::vector<RankedPredictions> kept = filter_ablation(preds, bt);
    REQUIRE(kept.size() == 2);
    REQUIRE(kept[0].items.size() == 2);
    CHECK(kept[0].items[0].key == preds[0].items[0].key);
    CHECK(kept[0].items[1].key == preds[0].items[2].key);
    CHECK(kept[0].items[0].p == preds[0].items[0].p);
    CHECK(kept[1].items.empty());  // the row survives with nothing in it

    SUBCASE("an all-passing set is unchanged") {
        BacktranslateFn all_pass = [](const std::vector<MolGraph>&, const MolGraph&) {
            return 1;
        };
        std::vector<RankedPredictions> same = filter_ablation(preds, all_pass);
        REQUIRE(same.size() == preds.size());
        for (std::size_t r = 0; r < preds.size(); ++r) {
            REQUIRE(same[r].items.size() == preds[r].items.size());
            for (std::size_t i = 0; i < preds[r].items.size(); ++i) {
                CHECK(same[r].items[i].key == preds[r].items[i].key);
                CHECK(same[r].items[i].p == preds[r].items[i].p);
            }
        }
    }

    SUBCASE("filtering is idempotent") {
        std::vector<RankedPredictions> twice = filter_ablation(kept, bt);
        REQUIRE(twice[0].items.size() == kept[0].items.size());
        CHECK(twice[1].items.empty());
    }
}

TEST_CASE("sampled inference converges to the exact policy mass") {
    PatternLibrary lib = diamine_library();
    MolGraph product = parse_smiles("NCCN");

    InferConfig cfg;
    cfg.n = 100;
    cfg.k = 200;  // 20000 rollouts
    cfg.alpha = 0.7;
    cfg.env.max_reactants = 2;

    Policy policy(small_config(), 1, 3, 20);
    std::map<std::string, double> exact =
        exact_reaction_mass(policy, lib, cfg.env, product, cfg.alpha);
    REQUIRE(exact.size() == 8);
    double z = 0.0;
    for (const auto& [key, m] : exact) z += m;
    CHECK(z == doctest::Approx(1.0).epsilon(1e-9));  // no dead ends in this environment

    std::mt19937_64 rng(41);
    RankedPredictions got = infer(policy, lib, product, cfg, rng);
    CHECK(got.product_key == canonical_key(product));

    // Per-reaction mass within 0.02 of the dynamic program, nothing invented.
    std::map<std::string, double> sampled;
    for (const RankedPrediction& item : got.items) sampled[item.key] = item.p;
    for (const auto& [key, m] : exact) {
        double hat = sampled.count(key) ? sampled[key] : 0.0;
        CHECK(std::abs(hat - m) < 0.02);
    }
    for (const auto& [key, p] : sampled) CHECK(exact.count(key) == 1);

    // Sub-probability mass, and essentially complete at this sampling depth.
    double total = 0.0;
    for (const RankedPrediction& item : got.items) total += item.p;
    CHECK(total <= 1.0 + 1e-9);
    CHECK(total > 0.99);

    // Sorted by mass with key tiebreak, pairwise-distinct keys.
    for (std::size_t i = 1; i < got.items.size(); ++i) {
        CHECK((got.items[i - 1].p > got.items[i].p ||
               (got.items[i - 1].p == got.items[i].p &&
                got.items[i - 1].key < got.items[i].key)));
    }
    std::set<std::string> keys;
    for (const RankedPrediction& item : got.items) keys.insert(item.key);
    CHECK(keys.size() == got.items.size());

    REQUIRE(!got.items.empty());
    for (const MolGraph& m : got.items[0].reactants) CHECK(m.num_atoms() > 0);

    // Identical seeds give identical lists.
    std::mt19937_64 a(7), b(7);
    InferConfig quick = cfg;
    quick.k = 5;
    RankedPredictions r1 = infer(policy, lib, product, quick, a);
    RankedPredictions r2 = infer(policy, lib, product, quick, b);
    REQUIRE(r1.items.size() == r2.items.size());
    for (std::size_t i = 0; i < r1.items.size(); ++i) {
        CHECK(r1.items[i].key == r2.items[i].key);
        CHECK(r1.items[i].p == r2.items[i].p);
    }

    // The list budget truncates the output.
    std::mt19937_64 r3(3);
    InferConfig tiny = cfg;
    tiny.n = 3;
    tiny.k = 100;
    RankedPredictions short_list = infer(policy, lib, product, tiny, r3);
    CHECK(short_list.items.size() <= 3);
}

TEST_CASE("inference handles unsolvable products and bad configs") {
    PatternLibrary lib = diamine_library();
    Policy policy(small_config(), 1, 3, 20);
    InferConfig cfg;
    cfg.env.max_reactants = 2;
    std::mt19937_64 rng(1);

    MolGraph water = parse_smiles("O");  // the amine pattern cannot match
    RankedPredictions empty = infer(policy, lib, water, cfg, rng);
    CHECK(empty.items.empty());
    CHECK(empty.product_key == canonical_key(water));

    InferConfig bad = cfg;
    bad.n = 0;
    CHECK_THROWS_AS(infer(policy, lib, water, bad, rng), std::invalid_argument);
    bad = cfg;
    bad.alpha = 0.0;
    CHECK_THROWS_AS(infer(policy, lib, water, bad, rng), std::invalid_argument);
}

TEST_CASE("per-product seeds are stable and key-sensitive") {
    CHECK(product_seed(7, "CCO") == product_seed(7, "CCO"));
    CHECK(product_seed(7, "CCO") != product_seed(7, "CCN"));
    CHECK(product_seed(7, "CCO") != product_seed(8, "CCO"));
}

TEST_CASE("predictions survive a save/load round trip") {
    std::vector<RankedPredictions> preds = {
        synthetic_row("CCO", {{"CC.O", 0.5}, {"C.CO", 0.25}}),
        synthetic_row("CCN", {}),  // unsolved row
    };
    std::string path = "eval_preds_roundtrip.jsonl";
    save_predictions(path, preds);
    std::vector<RankedPredictions> loaded = load_predictions(path);
    std::remove(path.c_str());

    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].product_key == preds[0].product_key);
    REQUIRE(loaded[0].items.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(loaded[0].items[i].key == preds[0].items[i].key);
        CHECK(loaded[0].items[i].p == preds[0].items[i].p);
    }
    CHECK(loaded[1].items.empty());
    CHECK(loaded[1].product_key == preds[1].product_key);

    CHECK_THROWS_AS(load_predictions("does_not_exist.jsonl"), std::runtime_error);
}

TEST_CASE("the assembled report is complete and serializes canonically") {
    std::vector<ReactionRecord> dataset = {
        parse_reaction("CC.O>>CCO"),
        parse_reaction("CC.N>>CCN"),
    };
    std::vector<RankedPredictions> preds = {
        synthetic_row("CCO", {{"CC.O", 0.5}, {"CCC", 0.2}}),
        synthetic_row("CCN", {}),
    };
    BacktranslateFn bt = passes({preds[0].items[0].key});
    FeasibilityProxy scorer = [](const std::vector<MolGraph>&, const MolGraph&) { return 0.95; };

    MetricsReport report =
        build_report(preds, dataset, bt, scorer, {}, 0.9, default_k_grid());
    CHECK(report.ks == default_k_grid());
    CHECK(report.accuracy[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(report.mrr == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(report.products == 2);
    CHECK(report.unsolved == 1);
    CHECK(report.dataset_rows == 2);
    CHECK(report.missing == 0);
    REQUIRE(report.ftc.size() == report.ks.size());
    REQUIRE(report.round_trip.size() == report.ks.size());
    REQUIRE(report.scaffold.size() == report.ks.size());

    std::string text = report_to_json(report);
    MetricsReport back = report_from_json(text);
    CHECK(back.ks == report.ks);
    CHECK(back.accuracy == report.accuracy);
    CHECK(back.mrr == report.mrr);
    CHECK(back.round_trip == report.round_trip);
    CHECK(back.ftc == report.ftc);
    CHECK(back.scaffold == report.scaffold);
    CHECK(back.products == report.products);
    CHECK(back.missing == report.missing);

    // Equal reports render to identical bytes.
    CHECK(report_to_json(back) == text);

    SUBCASE("the scorer is optional") {
        MetricsReport bare = build_report(preds, dataset, bt, {}, {}, 0.9, default_k_grid());
        CHECK(bare.ftc.empty());
        CHECK(bare.accuracy == report.accuracy);
    }

    SUBCASE("a dataset product missing from the predictions is counted") {
        dataset.push_back(parse_reaction("C.CC>>CCC"));
        MetricsReport wider = build_report(preds, dataset, bt, {}, {}, 0.9, default_k_grid());
        CHECK(wider.missing == 1);
        CHECK(wider.dataset_rows == 3);
    }
}
