#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "retroflow/autodiff.hpp"
#include "retroflow/corpus.hpp"
#include "retroflow/encoder.hpp"
#include "retroflow/molgraph.hpp"
#include "retroflow/smiles.hpp"
#include "retroflow/templates.hpp"

namespace retroflow {

/// Rule-based forward reaction prediction: every stored template runs in the
/// reactants -> product direction and candidates are ranked by (source-corpus
/// template frequency desc, product canonical key asc). Two instances cover
/// the two evaluation roles: one built from the train split (guides training
/// and the filtering ablation) and one from train+test (scores round-trip).
class ForwardModel {
public:
    struct Entry {
        Template tmpl;
        long long count = 0;  // occurrences in the source corpus
        std::string key;      // template_key, the dedup identity
    };

    struct Prediction {
        MolGraph product;
        std::string product_key;
        long long template_count = 0;
        std::string template_key;  // best-ranked producing template
    };

    ForwardModel() = default;

    /// Extracts one template per record, deduplicates by template key, and
    /// stores entries sorted by (count desc, key asc). Records that fail
    /// extraction are skipped and counted.
    static ForwardModel from_corpus(const std::vector<ReactionRecord>& corpus, int radius = 1);

    const std::vector<Entry>& entries() const { return entries_; }
    long long skipped() const { return skipped_; }

    /// Distinct products over all templates, each credited to its best-ranked
    /// producer, sorted by (template count desc, product key asc). top <= 0
    /// returns the whole list; otherwise the top prefix. Pure function of the
    /// reactant set.
    std::vector<Prediction> predict(const std::vector<MolGraph>& reactants, int top) const;

    /// 1 iff the rank-1 prediction reproduces the product (the beam-1
    /// back-translation test); 0 when nothing matches.
    int backtranslate_indicator(const std::vector<MolGraph>& reactants,
                                const MolGraph& product) const;
    int backtranslate_indicator(const ReactionRecord& r) const;

private:
    std::vector<Entry> entries_;
    long long skipped_ = 0;
};

enum class NegativeMethod { ForwardTemplate, ProductSwap };

struct NegativeReaction {
    std::vector<MolGraph> reactants;
    MolGraph product;
    NegativeMethod method = NegativeMethod::ForwardTemplate;
    std::string key;  // reaction_key(reactants, product)
};

struct NegativeSet {
    std::vector<NegativeReaction> negatives;
    std::string warning;  // non-empty when the target ratio was not reached
};

/// Synthetic non-feasible reactions, `ratio` per positive, mixed from two
/// methods: applying a random non-original template to corpus reactants
/// (first the source reaction's own set, then template-matched assemblies
/// from the corpus-wide reactant pool once that supply of novel products
/// runs dry) and swapping a reaction's product for the most-similar other
/// corpus product by Tanimoto. Negatives are pairwise distinct and disjoint
/// from the corpus by reaction key. Falls short only when the corpus lacks
/// material (warning set).
NegativeSet generate_negatives(const ForwardModel& fm,
                               const std::vector<ReactionRecord>& corpus, int ratio,
                               std::mt19937_64& rng);
NegativeSet generate_negatives(const std::vector<ReactionRecord>& corpus, int ratio,
                               std::mt19937_64& rng);

/// Corpus-format serialization with a method-tag comment line preceding each
/// reaction (the files stay loadable as plain corpora).
void save_negatives(const std::string& path, const std::vector<NegativeReaction>& negatives);
std::vector<NegativeReaction> load_negatives(const std::string& path);

/// Hard negatives grouped per product: a template-generated seed reaction
/// plus nine variants that keep the product and swap one reactant for its
/// nearest corpus neighbors.
struct ChallengeGroup {
    MolGraph product;
    std::string product_key;
    std::vector<NegativeReaction> reactions;  // exactly 10, seed first
};

/// Applies random non-original templates to m corpus reactant sets, keeps
/// m/10 seeds with pairwise-distinct products and reactants, then fills each
/// group to 10 reactions. Reactant-set keys are distinct across the whole
/// output and no reaction appears in the corpus. Throws std::runtime_error
/// when the corpus cannot supply enough distinct material.
std::vector<ChallengeGroup> challenging_set(const std::vector<ReactionRecord>& corpus, int m,
                                            std::mt19937_64& rng);

std::vector<NegativeReaction> flatten(const std::vector<ChallengeGroup>& groups);

/// Rejection rate of a negative set under the back-translation test, with a
/// Wilson 95% binomial interval.
struct AcceptanceStats {
    long long total = 0;
    long long rejected = 0;  // backtranslate_indicator == 0
    double rejection_rate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

AcceptanceStats acceptance_accuracy(const ForwardModel& fm,
                                    const std::vector<NegativeReaction>& negatives);

/// Wilson score interval for k successes in n trials at 95% confidence.
void wilson_interval(long long k, long long n, double& low, double& high);

/// Learned feasibility classifier: one shared graph encoder (two
/// message-passing layers and a single self-attention layer) runs over each
/// side of the reaction as one disconnected graph, a learned query per side
/// attention-pools the node embeddings, and an MLP over the concatenated
/// pair emits a logit squashed into [0,1].
struct RfmConfig {
    int hidden_dim = 32;
    int attention_heads = 4;
    int rw_pe_steps = 16;  // must equal the fixed featurization schema width
};

/// A reaction pre-featurized for the classifier (featurization is the
/// expensive part; training reuses examples across epochs).
struct RfmExample {
    Tensor reactant_features;
    std::vector<Bond> reactant_bonds;
    Tensor product_features;
    std::vector<Bond> product_bonds;
    double label = 0.0;
};

RfmExample make_rfm_example(const std::vector<MolGraph>& reactants, const MolGraph& product,
                            double label);

class Rfm {
public:
    Rfm(const RfmConfig& cfg, std::uint64_t seed);

    const RfmConfig& config() const { return cfg_; }
    std::vector<Param*> params();

    /// Pre-squash feasibility logit (1x1) on a caller-owned tape.
    Var logit(Tape& t, const RfmExample& ex);
    Var logit(Tape& t, const std::vector<MolGraph>& reactants, const MolGraph& product);

    /// Squashed score in [0,1]; forward-only.
    double score(const std::vector<MolGraph>& reactants, const MolGraph& product);

    void save(const std::string& path);
    void load(const std::string& path);

private:
    RfmConfig cfg_;
    EncoderParams enc_;        // shared by the reactant and product sides
    Param query_r_, query_p_;  // attention-pooling queries, 1 x d
    Mlp head_;                 // 2d -> d -> 1

    Var encode_side(Tape& t, const Tensor& features, const std::vector<Bond>& bonds);
    Var pool(Tape& t, Param& query, Var nodes);
};

struct RfmTrainConfig {
    double lr = 1e-3;
    int epochs = 30;
    int batch_size = 16;
    double val_fraction = 0.2;  // held-out slice for the AUC report
    std::uint64_t seed = 0;
};

struct RfmTrainResult {
    std::vector<double> epoch_losses;  // mean training cross-entropy per epoch
    double val_auc = -1.0;             // -1 when the held-out slice is single-class
    long long train_count = 0;
    long long val_count = 0;
};

/// Binary cross-entropy training with Adam over positives (label 1) and
/// negatives (label 0). A seeded shuffle carves off the held-out slice
/// before training; the final model is scored on it by ranking AUC.
/// Optional JSON-lines metrics: {"epoch", "loss"} per epoch.
RfmTrainResult train_rfm(Rfm& model, const std::vector<ReactionRecord>& positives,
                         const std::vector<NegativeReaction>& negatives,
                         const RfmTrainConfig& cfg, std::ostream* metrics = nullptr);

/// Rank-based AUC (Mann-Whitney with average ranks on ties); labels in {0,1}.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace retroflow
