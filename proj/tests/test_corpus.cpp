#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <map>
#include <set>

#include "retroflow/canonical.hpp"
#include "retroflow/corpus.hpp"
#include "retroflow/templates.hpp"

using namespace retroflow;

namespace {

std::multiset<std::string> keys_of(const std::vector<MolGraph>& mols) {
    std::multiset<std::string> keys;
    for (const MolGraph& m : mols) keys.insert(canonical_key(m));
    return keys;
}

}  // namespace

TEST_CASE("corpus generation is deterministic and fully split") {
    CorpusSplits a = generate_corpus(42);
    CorpusSplits b = generate_corpus(42);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
    CHECK(a.train.size() == 240);
    CHECK(a.val.size() == 24);
    CHECK(a.test.size() == 36);

    CorpusSplits c = generate_corpus(7);
    CHECK(c.train.size() == 240);
    CHECK(c.train != a.train);  // seed shuffles the substituent combos

    // No reaction appears in two splits.
    std::set<std::string> seen;
    for (const auto* split : {&a.train, &a.val, &a.test})
        for (const std::string& line : *split)
            CHECK(seen.insert(reaction_key(parse_reaction(line))).second);
}

TEST_CASE("every corpus product is fully atom mapped") {
    CorpusSplits s = generate_corpus(42);
    for (const auto* split : {&s.train, &s.val, &s.test}) {
        for (const std::string& line : *split) {
            ReactionRecord r = parse_reaction(line);
            for (const Atom& a : r.product.atoms) CHECK(a.map_number > 0);
            // Mapping is total on the product side: every product atom pairs.
            CHECK(r.atom_map_pairs().size() ==
                  static_cast<std::size_t>(r.product.num_atoms()));
        }
    }
}

TEST_CASE("every corpus reaction survives the extract/apply round trip") {
    CorpusSplits s = generate_corpus(42);
    std::vector<std::string> all;
    all.insert(all.end(), s.train.begin(), s.train.end());
    all.insert(all.end(), s.val.begin(), s.val.end());
    all.insert(all.end(), s.test.begin(), s.test.end());
    int ok = 0;
    for (const std::string& line : all) {
        CAPTURE(line);
        ReactionRecord r = parse_reaction(line);
        Match origin;
        Template t = extract_template(r, 1, &origin);
        ApplyResult res = apply_template(t, r.product, origin);
        REQUIRE(res.ok);
        CHECK(keys_of(res.reactants) == keys_of(r.reactants));
        ++ok;
    }
    CHECK(ok == 300);
}

TEST_CASE("write/load round trip preserves the corpus") {
    CorpusSplits s = generate_corpus(42);
    std::string path = "test_corpus_roundtrip.txt";
    write_corpus(path, s.val);
    auto records = load_corpus(path);
    REQUIRE(records.size() == s.val.size());
    for (std::size_t i = 0; i < records.size(); ++i)
        CHECK(reaction_key(records[i]) == reaction_key(parse_reaction(s.val[i])));
    std::remove(path.c_str());

    // Comments and blank lines are skipped; bad lines carry line numbers.
    write_corpus(path, {"# header", "", s.val[0], "not a reaction"});
    try {
        load_corpus(path);
        CHECK(false);
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find(":4:") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("train split supports a compact template library") {
    CorpusSplits s = generate_corpus(42);
    std::vector<Template> templates;
    std::set<std::string> distinct;
    for (const std::string& line : s.train) {
        Template t = extract_template(parse_reaction(line));
        if (distinct.insert(template_key(t)).second) templates.push_back(t);
    }
    // Variants differ only in substituent-context hydrogen counts, so the
    // library stays far smaller than the corpus.
    CHECK(distinct.size() >= 12);
    CHECK(distinct.size() <= 120);
    PatternLibrary lib = build_library(templates);
    CHECK(lib.pps.size() >= 12);
    CHECK(lib.rps.size() >= 12);
    CHECK(lib.pps.size() <= distinct.size());

    // Every held-out product is solvable by some train template: applying
    // it at a match reproduces the ground-truth reactant multiset.
    for (const std::string& line : s.test) {
        CAPTURE(line);
        ReactionRecord r = parse_reaction(line);
        auto want = keys_of(r.reactants);
        bool solved = false;
        for (const Template& t : templates) {
            if (solved) break;
            for (const Match& m : find_matches(t.product_pattern, r.product)) {
                ApplyResult res = apply_template(t, r.product, m);
                if (res.ok && keys_of(res.reactants) == want) {
                    solved = true;
                    break;
                }
            }
        }
        CHECK(solved);
    }
}
