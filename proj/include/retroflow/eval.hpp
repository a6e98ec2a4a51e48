#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "retroflow/train.hpp"

namespace retroflow {

/// One proposed reactant set with its estimated policy mass.
struct RankedPrediction {
    std::vector<MolGraph> reactants;
    std::string key;  // canonical reactant-multiset key (prediction identity)
    double p = 0.0;   // summed mass of the distinct trajectories reaching it
};

/// Ranked proposals for one product: p non-increasing, keys pairwise
/// distinct, at most min(n, 50) entries. An unsolvable product keeps an
/// empty list.
struct RankedPredictions {
    MolGraph product;
    std::string product_key;
    std::vector<RankedPrediction> items;
};

struct InferConfig {
    int n = 100;        // ranked-list budget; also scales the sample count
    int k = 20;         // samples per list slot (k * n rollouts total)
    double alpha = 0.7; // softmax temperature for sampling and scoring
    EnvConfig env;
};

/// Samples k*n trajectories from the tempered policy, estimates each
/// reaction's probability as the sum over distinct trajectories (deduplicated
/// by action sequence) of their exact sampling probability, groups by
/// reaction key, sorts by mass descending (key ascending on ties), and
/// truncates to min(n, 50). Dead-ended rollouts are dropped; the estimate is
/// a lower bound on each reaction's true mass, so the returned masses sum to
/// at most one.
RankedPredictions infer(Policy& policy, const PatternLibrary& lib, const MolGraph& product,
                        const InferConfig& cfg, std::mt19937_64& rng);

/// Stable per-product RNG seed so evaluation order and worker count never
/// change a product's samples.
std::uint64_t product_seed(std::uint64_t seed, const std::string& product_key);

/// 1 when the proposal round-trips (the forward model's top prediction from
/// these reactants equals the product), otherwise 0.
using BacktranslateFn = std::function<int(const std::vector<MolGraph>&, const MolGraph&)>;

std::vector<int> default_k_grid();  // {1, 3, 5, 10, 20, 50}

/// Fraction of dataset rows whose recorded reactant set appears in the top k
/// proposals for its product, one value per cutoff. A dataset product with no
/// predictions entry scores zero (and is still counted). Ground truth matches
/// by canonical reactant-multiset key, so any dataset reaction for the same
/// product counts as a hit.
std::vector<double> topk_accuracy(const std::vector<RankedPredictions>& preds,
                                  const std::vector<ReactionRecord>& dataset,
                                  const std::vector<int>& ks);

/// Mean reciprocal rank of the first ground-truth hit per dataset row; 0 for
/// rows whose ground truth never appears.
double mrr(const std::vector<RankedPredictions>& preds,
           const std::vector<ReactionRecord>& dataset);

/// Mean over products of (round-tripping proposals in the top k) / k. The
/// divisor is k even for shorter lists, so products with few proposals are
/// penalized rather than flattered.
std::vector<double> round_trip(const std::vector<RankedPredictions>& preds,
                               const BacktranslateFn& backtranslate,
                               const std::vector<int>& ks);

/// Mean over products of (top-k proposals scored feasible) / k. A proposal
/// counts when its reaction key is in `corpus_keys` (known reactions are
/// feasible by definition) or the scorer puts it at or above `threshold`.
std::vector<double> ftc(const std::vector<RankedPredictions>& preds,
                        const FeasibilityProxy& scorer,
                        const std::unordered_set<std::string>& corpus_keys, double threshold,
                        const std::vector<int>& ks);

/// Mean over products of the number of distinct non-empty scaffold keys among
/// the reactants of round-tripping top-k proposals. Acyclic reactants have an
/// empty scaffold and are excluded.
std::vector<double> scaffold_diversity(const std::vector<RankedPredictions>& preds,
                                       const BacktranslateFn& backtranslate,
                                       const std::vector<int>& ks);

/// Drops every proposal whose reactants do not round-trip under the supplied
/// (train-split) forward model. Order is preserved; nothing is re-scored.
std::vector<RankedPredictions> filter_ablation(const std::vector<RankedPredictions>& preds,
                                               const BacktranslateFn& backtranslate);

struct MetricsReport {
    std::vector<int> ks;
    std::vector<double> accuracy;   // per cutoff
    double mrr = 0.0;
    std::vector<double> round_trip; // per cutoff
    std::vector<double> ftc;        // per cutoff; empty when no scorer was given
    std::vector<double> scaffold;   // per cutoff
    long long products = 0;         // prediction rows
    long long unsolved = 0;         // prediction rows with empty lists
    long long dataset_rows = 0;     // ground-truth rows scored
    long long missing = 0;          // dataset rows with no prediction entry
};

/// Runs every metric over one prediction set. Pass an empty scorer to skip
/// the feasible-top-k columns.
MetricsReport build_report(const std::vector<RankedPredictions>& preds,
                           const std::vector<ReactionRecord>& dataset,
                           const BacktranslateFn& backtranslate, const FeasibilityProxy& scorer,
                           const std::unordered_set<std::string>& corpus_keys, double threshold,
                           const std::vector<int>& ks);

/// Serialization used by the CLI: one JSON object per line per product, rank
/// order preserved. Loading reparses the stored structures and recomputes
/// keys.
void save_predictions(const std::string& path, const std::vector<RankedPredictions>& preds);
std::vector<RankedPredictions> load_predictions(const std::string& path);

/// Canonical JSON rendering (sorted keys, two-space indent); byte-identical
/// for equal reports.
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);

}  // namespace retroflow
