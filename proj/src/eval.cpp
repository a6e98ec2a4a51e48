#include "retroflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "retroflow/canonical.hpp"
#include "retroflow/corpus.hpp"
#include "retroflow/mol_ops.hpp"
#include "retroflow/smiles.hpp"

namespace retroflow {

namespace {

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Stable identity of a trajectory: the action sequence, nothing else.
std::string action_signature(const std::vector<Action>& actions) {
    std::string sig;
    for (const Action& a : actions) {
        switch (a.kind) {
            case ActionKind::Match:
                sig += 'M';
                sig += std::to_string(a.match.pattern_index);
                for (int i : a.match.atom_indices) {
                    sig += ',';
                    sig += std::to_string(i);
                }
                break;
            case ActionKind::Reactant:
                sig += 'R';
                sig += std::to_string(a.rp);
                break;
            case ActionKind::Advance:
                sig += 'A';
                break;
            case ActionKind::Map:
                sig += 'P';
                sig += std::to_string(a.triple.j);
                sig += ',';
                sig += std::to_string(a.triple.k);
                sig += ',';
                sig += std::to_string(a.triple.l);
                break;
        }
        sig += '|';
    }
    return sig;
}

// Rank of the first ground-truth proposal (1-based), 0 when absent.
int first_hit_rank(const RankedPredictions& row,
                   const std::unordered_set<std::string>& truth_keys) {
    for (std::size_t i = 0; i < row.items.size(); ++i) {
        if (truth_keys.count(row.items[i].key)) return static_cast<int>(i) + 1;
    }
    return 0;
}

std::unordered_map<std::string, const RankedPredictions*> index_by_product(
    const std::vector<RankedPredictions>& preds) {
    std::unordered_map<std::string, const RankedPredictions*> by_product;
    for (const RankedPredictions& row : preds) by_product[row.product_key] = &row;
    return by_product;
}

void require_cutoffs(const std::vector<int>& ks) {
    if (ks.empty()) throw std::invalid_argument("metrics: cutoff list is empty");
    for (int k : ks)
        if (k <= 0) throw std::invalid_argument("metrics: cutoffs must be positive");
}

}  // namespace

std::uint64_t product_seed(std::uint64_t seed, const std::string& product_key) {
    return seed ^ fnv1a64(product_key);
}

std::vector<int> default_k_grid() { return {1, 3, 5, 10, 20, 50}; }

RankedPredictions infer(Policy& policy, const PatternLibrary& lib, const MolGraph& product,
                        const InferConfig& cfg, std::mt19937_64& rng) {
    if (cfg.n <= 0 || cfg.k <= 0) throw std::invalid_argument("infer: n and k must be positive");
    if (cfg.alpha <= 0.0) throw std::invalid_argument("infer: alpha must be positive");

    RankedPredictions out;
    out.product = product;
    out.product_key = canonical_key(product);

    State root = initial_state(product);
    if (enumerate_actions(root, lib, cfg.env).empty()) return out;  // unsolvable

    struct Group {
        std::vector<MolGraph> reactants;
        double p = 0.0;
    };
    std::map<std::string, Group> groups;  // reaction key -> mass
    std::unordered_set<std::string> seen_trajectories;
    double total = 0.0;

    long long rollouts = static_cast<long long>(cfg.k) * cfg.n;
    for (long long r = 0; r < rollouts; ++r) {
        Tape tape;
        Policy::Context ctx{&tape};
        auto scored = sample_forward(policy, ctx, product, lib, cfg.env, cfg.alpha,
                                     /*epsilon=*/0.0, rng);
        if (!scored) continue;  // dead end; the mass stays unclaimed

        if (!seen_trajectories.insert(action_signature(scored->traj.actions)).second) continue;
        double log_p = 0.0;
        for (double lp : scored->traj.log_pf) log_p += lp;
        double p = std::exp(log_p);

        const State& terminal = scored->traj.states.back();
        Group& g = groups[terminal.reaction];
        if (g.reactants.empty()) {
            g.reactants = terminal.reactants;
            std::sort(g.reactants.begin(), g.reactants.end(),
                      [](const MolGraph& a, const MolGraph& b) {
                          return canonical_key(a) < canonical_key(b);
                      });
        }
        g.p += p;
        total += p;
    }
    if (total > 1.0 + 1e-9) throw std::runtime_error("infer: trajectory mass exceeds one");

    out.items.reserve(groups.size());
    for (auto& [key, g] : groups) out.items.push_back({std::move(g.reactants), key, g.p});
    std::sort(out.items.begin(), out.items.end(),
              [](const RankedPrediction& a, const RankedPrediction& b) {
                  if (a.p != b.p) return a.p > b.p;
                  return a.key < b.key;
              });
    std::size_t cap = std::min<std::size_t>(std::min(cfg.n, 50), out.items.size());
    out.items.resize(cap);
    return out;
}

std::vector<double> topk_accuracy(const std::vector<RankedPredictions>& preds,
                                  const std::vector<ReactionRecord>& dataset,
                                  const std::vector<int>& ks) {
    require_cutoffs(ks);
    if (dataset.empty()) throw std::invalid_argument("topk_accuracy: dataset is empty");
    auto by_product = index_by_product(preds);
    std::unordered_set<std::string> truth;
    for (const ReactionRecord& r : dataset) truth.insert(reaction_key(r.reactants, r.product));

    std::vector<double> hits(ks.size(), 0.0);
    for (const ReactionRecord& r : dataset) {
        auto it = by_product.find(canonical_key(r.product));
        if (it == by_product.end()) continue;  // zero row
        int rank = first_hit_rank(*it->second, truth);
        if (rank == 0) continue;
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (rank <= ks[i]) hits[i] += 1.0;
    }
    for (double& h : hits) h /= static_cast<double>(dataset.size());
    return hits;
}

double mrr(const std::vector<RankedPredictions>& preds,
           const std::vector<ReactionRecord>& dataset) {
    if (dataset.empty()) throw std::invalid_argument("mrr: dataset is empty");
    auto by_product = index_by_product(preds);
    std::unordered_set<std::string> truth;
    for (const ReactionRecord& r : dataset) truth.insert(reaction_key(r.reactants, r.product));

    double sum = 0.0;
    for (const ReactionRecord& r : dataset) {
        auto it = by_product.find(canonical_key(r.product));
        if (it == by_product.end()) continue;
        int rank = first_hit_rank(*it->second, truth);
        if (rank > 0) sum += 1.0 / rank;
    }
    return sum / static_cast<double>(dataset.size());
}

std::vector<double> round_trip(const std::vector<RankedPredictions>& preds,
                               const BacktranslateFn& backtranslate,
                               const std::vector<int>& ks) {
    require_cutoffs(ks);
    if (preds.empty()) throw std::invalid_argument("round_trip: no predictions");
    if (!backtranslate) throw std::invalid_argument("round_trip: missing forward model");

    std::vector<double> means(ks.size(), 0.0);
    for (const RankedPredictions& row : preds) {
        std::vector<int> ok(row.items.size());
        for (std::size_t i = 0; i < row.items.size(); ++i)
            ok[i] = backtranslate(row.items[i].reactants, row.product);
        for (std::size_t j = 0; j < ks.size(); ++j) {
            std::size_t upto = std::min<std::size_t>(ks[j], ok.size());
            int passing = 0;
            for (std::size_t i = 0; i < upto; ++i) passing += ok[i];
            means[j] += static_cast<double>(passing) / ks[j];
        }
    }
    for (double& m : means) m /= static_cast<double>(preds.size());
    return means;
}

std::vector<double> ftc(const std::vector<RankedPredictions>& preds,
                        const FeasibilityProxy& scorer,
                        const std::unordered_set<std::string>& corpus_keys, double threshold,
                        const std::vector<int>& ks) {
    require_cutoffs(ks);
    if (preds.empty()) throw std::invalid_argument("ftc: no predictions");

    std::vector<double> means(ks.size(), 0.0);
    for (const RankedPredictions& row : preds) {
        std::vector<int> ok(row.items.size());
        for (std::size_t i = 0; i < row.items.size(); ++i) {
            const RankedPrediction& item = row.items[i];
            if (corpus_keys.count(item.key)) {
                ok[i] = 1;  // known reactions are feasible by definition
            } else {
                double s = scorer ? scorer(item.reactants, row.product) : 0.0;
                ok[i] = s >= threshold ? 1 : 0;
            }
        }
        for (std::size_t j = 0; j < ks.size(); ++j) {
            std::size_t upto = std::min<std::size_t>(ks[j], ok.size());
            int passing = 0;
            for (std::size_t i = 0; i < upto; ++i) passing += ok[i];
            means[j] += static_cast<double>(passing) / ks[j];
        }
    }
    for (double& m : means) m /= static_cast<double>(preds.size());
    return means;
}

std::vector<double> scaffold_diversity(const std::vector<RankedPredictions>& preds,
                                       const BacktranslateFn& backtranslate,
                                       const std::vector<int>& ks) {
    require_cutoffs(ks);
    if (preds.empty()) throw std::invalid_argument("scaffold_diversity: no predictions");
    if (!backtranslate) throw std::invalid_argument("scaffold_diversity: missing forward model");

    std::vector<double> means(ks.size(), 0.0);
    for (const RankedPredictions& row : preds) {
        std::vector<int> ok(row.items.size());
        std::vector<std::vector<std::string>> keys(row.items.size());
        for (std::size_t i = 0; i < row.items.size(); ++i) {
            ok[i] = backtranslate(row.items[i].reactants, row.product);
            if (!ok[i]) continue;
            for (const MolGraph& m : row.items[i].reactants) {
                MolGraph sc = scaffold(m);
                if (sc.num_atoms() > 0) keys[i].push_back(canonical_key(sc));
            }
        }
        for (std::size_t j = 0; j < ks.size(); ++j) {
            std::size_t upto = std::min<std::size_t>(ks[j], ok.size());
            std::set<std::string> distinct;
            for (std::size_t i = 0; i < upto; ++i)
                if (ok[i]) distinct.insert(keys[i].begin(), keys[i].end());
            means[j] += static_cast<double>(distinct.size());
        }
    }
    for (double& m : means) m /= static_cast<double>(preds.size());
    return means;
}

std::vector<RankedPredictions> filter_ablation(const std::vector<RankedPredictions>& preds,
                                               const BacktranslateFn& backtranslate) {
    if (!backtranslate) throw std::invalid_argument("filter_ablation: missing forward model");
    std::vector<RankedPredictions> out;
    out.reserve(preds.size());
    for (const RankedPredictions& row : preds) {
        RankedPredictions kept;
        kept.product = row.product;
        kept.product_key = row.product_key;
        for (const RankedPrediction& item : row.items)
            if (backtranslate(item.reactants, row.product)) kept.items.push_back(item);
        out.push_back(std::move(kept));  // empty rows stay so denominators hold
    }
    return out;
}

MetricsReport build_report(const std::vector<RankedPredictions>& preds,
                           const std::vector<ReactionRecord>& dataset,
                           const BacktranslateFn& backtranslate, const FeasibilityProxy& scorer,
                           const std::unordered_set<std::string>& corpus_keys, double threshold,
                           const std::vector<int>& ks) {
    MetricsReport report;
    report.ks = ks;
    report.accuracy = topk_accuracy(preds, dataset, ks);
    report.mrr = mrr(preds, dataset);
    report.round_trip = round_trip(preds, backtranslate, ks);
    if (scorer) report.ftc = ftc(preds, scorer, corpus_keys, threshold, ks);
    report.scaffold = scaffold_diversity(preds, backtranslate, ks);

    report.products = static_cast<long long>(preds.size());
    for (const RankedPredictions& row : preds)
        if (row.items.empty()) ++report.unsolved;
    report.dataset_rows = static_cast<long long>(dataset.size());
    auto by_product = index_by_product(preds);
    for (const ReactionRecord& r : dataset)
        if (!by_product.count(canonical_key(r.product))) ++report.missing;
    return report;
}

void save_predictions(const std::string& path, const std::vector<RankedPredictions>& preds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write predictions file: " + path);
    for (const RankedPredictions& row : preds) {
        nlohmann::json o;
        o["product"] = write_smiles(row.product.without_maps());
        nlohmann::json items = nlohmann::json::array();
        for (const RankedPrediction& item : row.items) {
            nlohmann::json e;
            nlohmann::json smis = nlohmann::json::array();
            for (const MolGraph& m : item.reactants) smis.push_back(write_smiles(m.without_maps()));
            e["reactants"] = std::move(smis);
            e["p_estimate"] = item.p;
            items.push_back(std::move(e));
        }
        o["predictions"] = std::move(items);
        out << o.dump() << '\n';
    }
}

std::vector<RankedPredictions> load_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open predictions file: " + path);
    std::vector<RankedPredictions> preds;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json o = nlohmann::json::parse(line);
        RankedPredictions row;
        row.product = parse_smiles(o.at("product").get<std::string>());
        row.product_key = canonical_key(row.product);
        for (const nlohmann::json& e : o.at("predictions")) {
            RankedPrediction item;
            for (const nlohmann::json& smi : e.at("reactants"))
                item.reactants.push_back(parse_smiles(smi.get<std::string>()));
            item.p = e.at("p_estimate").get<double>();
            item.key = reaction_key(item.reactants, row.product);
            row.items.push_back(std::move(item));
        }
        preds.push_back(std::move(row));
    }
    return preds;
}

std::string report_to_json(const MetricsReport& report) {
    nlohmann::json j;
    j["ks"] = report.ks;
    j["accuracy"] = report.accuracy;
    j["mrr"] = report.mrr;
    j["round_trip"] = report.round_trip;
    j["ftc"] = report.ftc;
    j["scaffold"] = report.scaffold;
    j["products"] = report.products;
    j["unsolved"] = report.unsolved;
    j["dataset_rows"] = report.dataset_rows;
    j["missing"] = report.missing;
    return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    MetricsReport report;
    report.ks = j.at("ks").get<std::vector<int>>();
    report.accuracy = j.at("accuracy").get<std::vector<double>>();
    report.mrr = j.at("mrr").get<double>();
    report.round_trip = j.at("round_trip").get<std::vector<double>>();
    report.ftc = j.at("ftc").get<std::vector<double>>();
    report.scaffold = j.at("scaffold").get<std::vector<double>>();
    report.products = j.at("products").get<long long>();
    report.unsolved = j.at("unsolved").get<long long>();
    report.dataset_rows = j.at("dataset_rows").get<long long>();
    report.missing = j.at("missing").get<long long>();
    return report;
}

}  // namespace retroflow
