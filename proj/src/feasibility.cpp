#include "retroflow/feasibility.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "retroflow/canonical.hpp"
#include "retroflow/mol_ops.hpp"

namespace retroflow {

namespace {

std::vector<MolGraph> strip_maps(const std::vector<MolGraph>& mols) {
    std::vector<MolGraph> out;
    out.reserve(mols.size());
    for (const MolGraph& m : mols) out.push_back(m.without_maps());
    return out;
}

}  // namespace

ForwardModel ForwardModel::from_corpus(const std::vector<ReactionRecord>& corpus, int radius) {
    ForwardModel fm;
    std::unordered_map<std::string, std::size_t> index;
    for (const ReactionRecord& r : corpus) {
        Template t;
        try {
            t = extract_template(r, radius);
        } catch (const ExtractError&) {
            ++fm.skipped_;
            continue;
        }
        std::string key = template_key(t);
        auto it = index.find(key);
        if (it == index.end()) {
            index.emplace(key, fm.entries_.size());
            fm.entries_.push_back({std::move(t), 1, std::move(key)});
        } else {
            ++fm.entries_[it->second].count;
        }
    }
    std::sort(fm.entries_.begin(), fm.entries_.end(), [](const Entry& a, const Entry& b) {
        if (a.count != b.count) return a.count > b.count;
        return a.key < b.key;
    });
    return fm;
}

std::vector<ForwardModel::Prediction> ForwardModel::predict(
    const std::vector<MolGraph>& reactants, int top) const {
    if (reactants.empty()) throw std::invalid_argument("predict requires at least one reactant");
    // Entries are rank-ordered, so the first producer of a product key is its
    // best-ranked witness.
    std::vector<Prediction> out;
    std::unordered_set<std::string> seen;
    for (const Entry& e : entries_) {
        for (MolGraph& p : forward_apply(e.tmpl, reactants)) {
            std::string key = canonical_key(p);
            if (!seen.insert(key).second) continue;
            out.push_back({std::move(p), std::move(key), e.count, e.key});
        }
    }
    std::sort(out.begin(), out.end(), [](const Prediction& a, const Prediction& b) {
        if (a.template_count != b.template_count) return a.template_count > b.template_count;
        return a.product_key < b.product_key;
    });
    if (top > 0 && static_cast<int>(out.size()) > top) out.resize(top);
    return out;
}

int ForwardModel::backtranslate_indicator(const std::vector<MolGraph>& reactants,
                                          const MolGraph& product) const {
    std::vector<Prediction> best = predict(reactants, 1);
    if (best.empty()) return 0;
    return best[0].product_key == canonical_key(product) ? 1 : 0;
}

int ForwardModel::backtranslate_indicator(const ReactionRecord& r) const {
    return backtranslate_indicator(r.reactants, r.product);
}

namespace {

// Distinct corpus products with fingerprints, sorted by canonical key, plus
// each key's nearest other product (max Tanimoto, key-ascending tiebreak).
struct ProductPool {
    std::vector<std::string> keys;
    std::vector<MolGraph> mols;  // map-stripped
    std::unordered_map<std::string, int> nearest_other;
};

ProductPool build_product_pool(const std::vector<ReactionRecord>& corpus) {
    std::map<std::string, const MolGraph*> distinct;
    for (const ReactionRecord& r : corpus) distinct.emplace(canonical_key(r.product), &r.product);
    ProductPool pool;
    for (const auto& [key, mol] : distinct) {
        pool.keys.push_back(key);
        pool.mols.push_back(mol->without_maps());
    }
    std::vector<std::bitset<kFingerprintBits>> fps;
    fps.reserve(pool.mols.size());
    for (const MolGraph& m : pool.mols) fps.push_back(path_fingerprint(m));
    for (std::size_t i = 0; i < pool.keys.size(); ++i) {
        int best = -1;
        double best_sim = -1.0;
        for (std::size_t j = 0; j < pool.keys.size(); ++j) {
            if (j == i) continue;
            auto inter = (fps[i] & fps[j]).count();
            auto uni = (fps[i] | fps[j]).count();
            double sim = uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
            if (sim > best_sim) {
                best_sim = sim;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0) pool.nearest_other.emplace(pool.keys[i], best);
    }
    return pool;
}

std::string own_template_key(const ReactionRecord& r, int radius = 1) {
    try {
        return template_key(extract_template(r, radius));
    } catch (const ExtractError&) {
        return {};
    }
}

}  // namespace

NegativeSet generate_negatives(const ForwardModel& fm,
                               const std::vector<ReactionRecord>& corpus, int ratio,
                               std::mt19937_64& rng) {
    if (corpus.empty()) throw std::invalid_argument("generate_negatives requires a corpus");
    if (ratio <= 0) throw std::invalid_argument("negative ratio must be positive");
    ProductPool pool = build_product_pool(corpus);
    if (pool.keys.size() < 2)
        throw std::invalid_argument("generate_negatives requires >= 2 distinct products");

    std::unordered_set<std::string> seen;
    for (const ReactionRecord& r : corpus) seen.insert(reaction_key(r));
    std::vector<std::string> product_keys;
    product_keys.reserve(corpus.size());
    for (const ReactionRecord& r : corpus) product_keys.push_back(canonical_key(r.product));

    // Per record: non-original templates that actually apply to its reactant
    // set (random pairs almost never match, so rejection sampling starves).
    std::vector<std::vector<int>> applicable(corpus.size());
    for (std::size_t ri = 0; ri < corpus.size(); ++ri) {
        std::string own = own_template_key(corpus[ri]);
        for (std::size_t ei = 0; ei < fm.entries().size(); ++ei) {
            if (fm.entries()[ei].key == own) continue;
            if (!forward_apply(fm.entries()[ei].tmpl, corpus[ri].reactants).empty())
                applicable[ri].push_back(static_cast<int>(ei));
        }
    }

    // Per template pattern: distinct corpus molecules (either side) it
    // embeds into, for assembling fresh reactant sets once the same-set
    // supply of novel products runs dry.
    std::map<std::string, MolGraph> mol_map;
    for (const ReactionRecord& r : corpus) {
        for (const MolGraph& m : r.reactants) mol_map.emplace(canonical_key(m), m.without_maps());
        mol_map.emplace(canonical_key(r.product), r.product.without_maps());
    }
    std::vector<MolGraph> mols;
    mols.reserve(mol_map.size());
    for (auto& [key, m] : mol_map) mols.push_back(std::move(m));
    std::vector<std::vector<std::vector<int>>> supporters(fm.entries().size());
    for (std::size_t ei = 0; ei < fm.entries().size(); ++ei) {
        const Template& t = fm.entries()[ei].tmpl;
        supporters[ei].resize(t.reactant_patterns.size());
        for (std::size_t k = 0; k < t.reactant_patterns.size(); ++k)
            for (std::size_t mi = 0; mi < mols.size(); ++mi)
                if (!find_matches(t.reactant_patterns[k], mols[mi]).empty())
                    supporters[ei][k].push_back(static_cast<int>(mi));
    }

    auto emit_template_negative = [&](const std::vector<MolGraph>& reactants,
                                      std::vector<MolGraph>& products, NegativeSet& out) {
        MolGraph& p = products[rng() % products.size()];
        std::string key = reaction_key(reactants, p);
        if (!seen.insert(key).second) return false;
        out.negatives.push_back({strip_maps(reactants), p.without_maps(),
                                 NegativeMethod::ForwardTemplate, std::move(key)});
        return true;
    };

    NegativeSet out;
    long long target = static_cast<long long>(ratio) * static_cast<long long>(corpus.size());
    long long attempts = 0;
    const long long max_attempts = target * 200 + 1000;
    while (static_cast<long long>(out.negatives.size()) < target && attempts < max_attempts) {
        ++attempts;
        std::size_t ri = rng() % corpus.size();
        const ReactionRecord& src = corpus[ri];
        bool swap = fm.entries().empty() || rng() % 2 == 1;
        if (swap) {
            auto it = pool.nearest_other.find(product_keys[ri]);
            if (it == pool.nearest_other.end()) continue;
            const MolGraph& partner = pool.mols[it->second];
            std::string key = reaction_key(src.reactants, partner);
            if (!seen.insert(key).second) continue;
            out.negatives.push_back(
                {strip_maps(src.reactants), partner, NegativeMethod::ProductSwap, std::move(key)});
            continue;
        }
        // Preferred flavor: a non-original template over the source
        // reaction's own reactant set.
        if (!applicable[ri].empty()) {
            const ForwardModel::Entry& e =
                fm.entries()[applicable[ri][rng() % applicable[ri].size()]];
            std::vector<MolGraph> products = forward_apply(e.tmpl, src.reactants);
            if (!products.empty() && emit_template_negative(src.reactants, products, out))
                continue;
        }
        // Fallback flavor: assemble a reactant set from the corpus-wide
        // molecule pool, one supporter per pattern.
        std::size_t ei = rng() % fm.entries().size();
        std::vector<MolGraph> assembled;
        bool ok = true;
        for (const std::vector<int>& supp : supporters[ei]) {
            if (supp.empty()) {
                ok = false;
                break;
            }
            assembled.push_back(mols[supp[rng() % supp.size()]]);
        }
        if (!ok || assembled.empty()) continue;
        std::vector<MolGraph> products = forward_apply(fm.entries()[ei].tmpl, assembled);
        if (products.empty()) continue;
        emit_template_negative(assembled, products, out);
    }
    if (static_cast<long long>(out.negatives.size()) < target)
        out.warning = "generated " + std::to_string(out.negatives.size()) + " of " +
                      std::to_string(target) + " requested negatives";
    return out;
}

NegativeSet generate_negatives(const std::vector<ReactionRecord>& corpus, int ratio,
                               std::mt19937_64& rng) {
    return generate_negatives(ForwardModel::from_corpus(corpus), corpus, ratio, rng);
}

namespace {

const char* method_name(NegativeMethod m) {
    return m == NegativeMethod::ForwardTemplate ? "forward_template" : "product_swap";
}

}  // namespace

void save_negatives(const std::string& path, const std::vector<NegativeReaction>& negatives) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write negatives: " + path);
    for (const NegativeReaction& n : negatives) {
        out << "# method: " << method_name(n.method) << "\n";
        out << write_reaction({n.reactants, n.product}) << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<NegativeReaction> load_negatives(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open negatives: " + path);
    std::vector<NegativeReaction> out;
    std::string line;
    std::string pending;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const std::string prefix = "# method: ";
            if (line.rfind(prefix, 0) == 0) pending = line.substr(prefix.size());
            continue;
        }
        NegativeMethod method;
        if (pending == "forward_template") {
            method = NegativeMethod::ForwardTemplate;
        } else if (pending == "product_swap") {
            method = NegativeMethod::ProductSwap;
        } else {
            throw std::runtime_error("line " + std::to_string(line_no) +
                                     ": reaction without a method tag");
        }
        pending.clear();
        ReactionRecord r = parse_reaction(line);
        std::string key = reaction_key(r);
        out.push_back({std::move(r.reactants), std::move(r.product), method, std::move(key)});
    }
    return out;
}

std::vector<ChallengeGroup> challenging_set(const std::vector<ReactionRecord>& corpus, int m,
                                            std::mt19937_64& rng) {
    if (m < 10) throw std::invalid_argument("challenging_set requires m >= 10");
    if (static_cast<int>(corpus.size()) < m)
        throw std::invalid_argument("challenging_set requires a corpus with >= m reactions");
    ForwardModel fm = ForwardModel::from_corpus(corpus);
    if (fm.entries().empty())
        throw std::runtime_error("challenging_set: insufficient distinct material");

    std::unordered_set<std::string> corpus_keys;
    for (const ReactionRecord& r : corpus) corpus_keys.insert(reaction_key(r));

    // Seed phase: one random non-original template application per sampled
    // reactant set.
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);

    struct Seed {
        std::vector<MolGraph> reactants;
        MolGraph product;
        std::string reaction;  // reaction_key
        std::string rset;      // canonical_multiset_key over reactants
        std::string product_key;
    };
    std::vector<Seed> seeds;
    for (int i = 0; i < m; ++i) {
        const ReactionRecord& src = corpus[order[i]];
        std::string own = own_template_key(src);
        for (int tries = 0; tries < 20; ++tries) {
            const ForwardModel::Entry& e = fm.entries()[rng() % fm.entries().size()];
            if (e.key == own) continue;
            std::vector<MolGraph> products = forward_apply(e.tmpl, src.reactants);
            if (products.empty()) continue;
            MolGraph& p = products[rng() % products.size()];
            std::string key = reaction_key(src.reactants, p);
            if (corpus_keys.count(key)) continue;
            seeds.push_back({strip_maps(src.reactants), p.without_maps(), std::move(key),
                             canonical_multiset_key(src.reactants), canonical_key(p)});
            break;
        }
    }

    // Greedy selection: m/10 seeds with pairwise-distinct products and
    // reactant sets.
    int groups = m / 10;
    std::unordered_set<std::string> used_products, used_rsets;
    std::vector<Seed> picked;
    for (Seed& s : seeds) {
        if (static_cast<int>(picked.size()) == groups) break;
        if (used_products.count(s.product_key) || used_rsets.count(s.rset)) continue;
        used_products.insert(s.product_key);
        used_rsets.insert(s.rset);
        picked.push_back(std::move(s));
    }
    if (static_cast<int>(picked.size()) < groups)
        throw std::runtime_error("challenging_set: insufficient distinct material");

    // Variant pool: every distinct corpus reactant molecule.
    std::map<std::string, MolGraph> mol_pool;
    for (const ReactionRecord& r : corpus)
        for (const MolGraph& mol : r.reactants) mol_pool.emplace(canonical_key(mol), mol.without_maps());
    std::vector<std::string> pool_keys;
    std::vector<MolGraph> pool_mols;
    std::vector<std::bitset<kFingerprintBits>> pool_fps;
    for (auto& [key, mol] : mol_pool) {
        pool_keys.push_back(key);
        pool_fps.push_back(path_fingerprint(mol));
        pool_mols.push_back(std::move(mol));
    }

    std::vector<ChallengeGroup> out;
    for (const Seed& s : picked) {
        ChallengeGroup group;
        group.product = s.product;
        group.product_key = s.product_key;
        group.reactions.push_back(
            {s.reactants, s.product, NegativeMethod::ForwardTemplate, s.reaction});

        // Candidates: swap one reactant for a pool molecule, best Tanimoto
        // against the replaced one first.
        struct Cand {
            double sim;
            std::string rset;
            std::size_t pos;
            std::size_t pool_idx;
        };
        std::vector<Cand> cands;
        for (std::size_t pos = 0; pos < s.reactants.size(); ++pos) {
            auto fp = path_fingerprint(s.reactants[pos]);
            std::string pos_key = canonical_key(s.reactants[pos]);
            for (std::size_t pi = 0; pi < pool_mols.size(); ++pi) {
                if (pool_keys[pi] == pos_key) continue;
                auto inter = (fp & pool_fps[pi]).count();
                auto uni = (fp | pool_fps[pi]).count();
                double sim = uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
                std::vector<std::string> keys;
                for (std::size_t k = 0; k < s.reactants.size(); ++k)
                    keys.push_back(k == pos ? pool_keys[pi] : canonical_key(s.reactants[k]));
                std::sort(keys.begin(), keys.end());
                std::string rset;
                for (std::size_t k = 0; k < keys.size(); ++k) rset += (k ? "|" : "") + keys[k];
                cands.push_back({sim, std::move(rset), pos, pi});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.sim != b.sim) return a.sim > b.sim;
            if (a.rset != b.rset) return a.rset < b.rset;
            return a.pos < b.pos;
        });

        for (const Cand& c : cands) {
            if (group.reactions.size() == 10) break;
            if (used_rsets.count(c.rset)) continue;
            std::vector<MolGraph> variant = s.reactants;
            variant[c.pos] = pool_mols[c.pool_idx];
            std::string key = reaction_key(variant, s.product);
            if (corpus_keys.count(key)) continue;
            used_rsets.insert(c.rset);
            group.reactions.push_back(
                {std::move(variant), s.product, NegativeMethod::ForwardTemplate, std::move(key)});
        }
        if (group.reactions.size() < 10)
            throw std::runtime_error("challenging_set: insufficient distinct material");
        out.push_back(std::move(group));
    }
    return out;
}

std::vector<NegativeReaction> flatten(const std::vector<ChallengeGroup>& groups) {
    std::vector<NegativeReaction> out;
    for (const ChallengeGroup& g : groups)
        out.insert(out.end(), g.reactions.begin(), g.reactions.end());
    return out;
}

void wilson_interval(long long k, long long n, double& low, double& high) {
    if (n <= 0) throw std::invalid_argument("wilson_interval requires n > 0");
    if (k < 0 || k > n) throw std::invalid_argument("wilson_interval requires 0 <= k <= n");
    const double z = 1.959963984540054;  // two-sided 95%
    double nn = static_cast<double>(n);
    double p = static_cast<double>(k) / nn;
    double z2 = z * z;
    double denom = 1.0 + z2 / nn;
    double center = (p + z2 / (2.0 * nn)) / denom;
    double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
    // The boundary cases are exact; don't let rounding pull them inward.
    low = k == 0 ? 0.0 : std::max(0.0, center - half);
    high = k == n ? 1.0 : std::min(1.0, center + half);
}

AcceptanceStats acceptance_accuracy(const ForwardModel& fm,
                                    const std::vector<NegativeReaction>& negatives) {
    if (negatives.empty()) throw std::invalid_argument("acceptance_accuracy requires negatives");
    AcceptanceStats stats;
    stats.total = static_cast<long long>(negatives.size());
    for (const NegativeReaction& n : negatives)
        if (fm.backtranslate_indicator(n.reactants, n.product) == 0) ++stats.rejected;
    stats.rejection_rate = static_cast<double>(stats.rejected) / stats.total;
    wilson_interval(stats.rejected, stats.total, stats.ci_low, stats.ci_high);
    return stats;
}

RfmExample make_rfm_example(const std::vector<MolGraph>& reactants, const MolGraph& product,
                            double label) {
    if (reactants.empty()) throw std::invalid_argument("reaction needs at least one reactant");
    MolGraph merged = merge_graphs(reactants);
    RfmExample ex;
    ex.reactant_features = feature_tensor(featurize(merged).nodes);
    ex.reactant_bonds = merged.bonds;
    ex.product_features = feature_tensor(featurize(product).nodes);
    ex.product_bonds = product.bonds;
    ex.label = label;
    return ex;
}

Rfm::Rfm(const RfmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.hidden_dim <= 0 || cfg.attention_heads <= 0 ||
        cfg.hidden_dim % cfg.attention_heads != 0)
        throw std::invalid_argument("hidden_dim must be a positive multiple of attention_heads");
    if (cfg.rw_pe_steps != kRandomWalkSteps)
        throw std::invalid_argument("featurization schema is fixed at " +
                                    std::to_string(kRandomWalkSteps) + " random-walk steps");
    std::mt19937_64 rng(seed);
    int d = cfg.hidden_dim;
    enc_ = make_encoder("enc", d, cfg.attention_heads, kNodeFeatureDim, 2, rng);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    query_r_ = Param("pool.q_reactants", uniform_scaled(1, d, bound, rng));
    query_p_ = Param("pool.q_product", uniform_scaled(1, d, bound, rng));
    head_ = make_mlp("head", 2 * d, d, 1, rng);
}

std::vector<Param*> Rfm::params() {
    std::vector<Param*> out;
    collect_params(enc_, out);
    out.push_back(&query_r_);
    out.push_back(&query_p_);
    collect_params(head_, out);
    return out;
}

Var Rfm::encode_side(Tape& t, const Tensor& features, const std::vector<Bond>& bonds) {
    return encode_graph(t, cfg_.hidden_dim, cfg_.attention_heads, enc_, features, bonds);
}

Var Rfm::pool(Tape& t, Param& query, Var nodes) {
    Var q = t.use(query);
    Var scores = t.scale(t.matmul(q, t.transpose(nodes)),
                         1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim)));
    return t.matmul(t.softmax_rows(scores), nodes);
}

Var Rfm::logit(Tape& t, const RfmExample& ex) {
    Var pr = pool(t, query_r_, encode_side(t, ex.reactant_features, ex.reactant_bonds));
    Var pp = pool(t, query_p_, encode_side(t, ex.product_features, ex.product_bonds));
    return run_mlp(t, head_, t.concat_cols(pr, pp));
}

Var Rfm::logit(Tape& t, const std::vector<MolGraph>& reactants, const MolGraph& product) {
    return logit(t, make_rfm_example(reactants, product, 0.0));
}

double Rfm::score(const std::vector<MolGraph>& reactants, const MolGraph& product) {
    Tape t;
    Var s = t.sigmoid(logit(t, reactants, product));
    return t.value(s).at(0, 0);
}

void Rfm::save(const std::string& path) { save_checkpoint(path, params()); }

void Rfm::load(const std::string& path) { load_checkpoint(path, params()); }

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("scores and labels must align");
    long long pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0)
        throw std::invalid_argument("roc_auc requires both classes");
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Average ranks over tie groups, then the Mann-Whitney statistic.
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) pos_rank_sum += avg_rank;
        i = j;
    }
    double p = static_cast<double>(pos);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

RfmTrainResult train_rfm(Rfm& model, const std::vector<ReactionRecord>& positives,
                         const std::vector<NegativeReaction>& negatives,
                         const RfmTrainConfig& cfg, std::ostream* metrics) {
    if (positives.empty() || negatives.empty())
        throw std::invalid_argument("train_rfm requires non-empty positive and negative sets");
    if (cfg.epochs <= 0 || cfg.batch_size <= 0)
        throw std::invalid_argument("epochs and batch_size must be positive");
    if (cfg.val_fraction < 0.0 || cfg.val_fraction >= 1.0)
        throw std::invalid_argument("val_fraction must lie in [0, 1)");

    std::vector<RfmExample> examples;
    examples.reserve(positives.size() + negatives.size());
    for (const ReactionRecord& r : positives)
        examples.push_back(make_rfm_example(r.reactants, r.product, 1.0));
    for (const NegativeReaction& n : negatives)
        examples.push_back(make_rfm_example(n.reactants, n.product, 0.0));

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t val_n = static_cast<std::size_t>(cfg.val_fraction * examples.size());
    std::vector<std::size_t> val(order.begin(), order.begin() + val_n);
    std::vector<std::size_t> train(order.begin() + val_n, order.end());
    if (train.empty()) throw std::invalid_argument("no training examples after the split");

    Adam opt(model.params(), cfg.lr);
    RfmTrainResult result;
    result.train_count = static_cast<long long>(train.size());
    result.val_count = static_cast<long long>(val.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(train.begin(), train.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
            std::size_t end = std::min(train.size(), start + cfg.batch_size);
            Tape t;
            Var logits;
            Tensor targets(1, static_cast<int>(end - start));
            for (std::size_t b = start; b < end; ++b) {
                Var z = model.logit(t, examples[train[b]]);
                logits = b == start ? z : t.concat_cols(logits, z);
                targets.at(0, static_cast<int>(b - start)) = examples[train[b]].label;
            }
            Var loss = t.bce_with_logits(logits, t.input(std::move(targets)));
            double value = t.value(loss).at(0, 0);
            if (!std::isfinite(value))
                throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                         std::to_string(epoch));
            loss_sum += value * static_cast<double>(end - start);
            opt.zero_grad();
            t.backward(loss);
            opt.step();
        }
        double epoch_loss = loss_sum / static_cast<double>(train.size());
        result.epoch_losses.push_back(epoch_loss);
        if (metrics) {
            nlohmann::json line{{"epoch", epoch}, {"loss", epoch_loss}};
            *metrics << line.dump() << "\n";
        }
    }

    if (!val.empty()) {
        std::vector<double> scores;
        std::vector<int> labels;
        bool both = false;
        for (std::size_t idx : val) {
            Tape t;
            Var s = t.sigmoid(model.logit(t, examples[idx]));
            scores.push_back(t.value(s).at(0, 0));
            labels.push_back(examples[idx].label > 0.5 ? 1 : 0);
            if (!labels.empty() && labels.back() != labels.front()) both = true;
        }
        if (both) result.val_auc = roc_auc(scores, labels);
    }
    return result;
}

}  // namespace retroflow
