#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "retroflow/env.hpp"
#include "retroflow/policy.hpp"

namespace retroflow {

// Feasibility score in [0,1] for a proposed reaction. Training treats corpus
// reactions as feasibility 1 regardless of the proxy.
using FeasibilityProxy =
    std::function<double(const std::vector<MolGraph>& reactants, const MolGraph& product)>;

struct TrainConfig {
    double epsilon = 0.05;    // per-step probability of a uniform random action
    int n_forward = 16;       // on-policy rollouts per iteration
    int n_dataset = 96;       // backward-sampled corpus trajectories per iteration
    int n_replay = 16;        // backward-sampled replay trajectories per iteration
    double lr = 0.0005;
    int iterations = 25000;
    double reward_beta = 12.0;  // reward = exp(beta * feasibility)
    std::uint64_t seed = 0;
    double alpha = 1.0;       // softmax temperature while sampling and scoring
    double replay_threshold = 0.5;    // minimum feasibility for replay admission
    std::size_t replay_capacity = 10000;
    double clip_norm = 10.0;          // global gradient-norm ceiling
    int validate_every = 0;           // iterations between validations; 0 disables
    int val_products = 16;            // held-out products per validation pass
    int val_samples = 20;             // rollouts per validation product
    int val_top_k = 10;
    EnvConfig env;
    std::string checkpoint_path;      // written after the final iteration if set
    std::string library_path;         // used by the CLI to locate inputs
    std::string corpus_path;
};

// exp(beta * f): f = 1 for corpus reactions, otherwise the proxy's score
// clamped to [0,1] (0 when no proxy is supplied).
double feasibility_of(const State& terminal, const std::unordered_set<std::string>& corpus_keys,
                      const FeasibilityProxy& proxy);
double reward_of(double feasibility, double beta);

// Squared trajectory-balance residual from its parts:
//   (log_flow + sum_log_pf - log_reward - sum_log_pb)^2
double tb_loss(double log_flow, double sum_log_pf, double log_reward, double sum_log_pb);

// Bounded FIFO of sampled terminal states, deduplicated by
// (product key, reaction key); admission requires feasibility >= threshold.
class ReplayBuffer {
public:
    ReplayBuffer(std::size_t capacity, double threshold);

    struct Entry {
        State terminal;
        double feasibility = 0.0;
    };

    // True when the terminal was inserted (above threshold and not a duplicate).
    bool admit(const State& terminal, double feasibility);

    // Uniform sample of min(n, size()) distinct entries.
    std::vector<const Entry*> sample(std::size_t n, std::mt19937_64& rng) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }

private:
    std::size_t capacity_;
    double threshold_;
    std::vector<Entry> entries_;  // ring buffer once full
    std::size_t next_ = 0;        // eviction cursor
    std::unordered_set<std::string> keys_;
};

// A trajectory plus everything needed to rebuild its log-probabilities: the
// legal-action list and chosen index at every step, and the score row on the
// sampling tape (sampled rollouts only; backward replays score lazily).
struct ScoredTrajectory {
    Trajectory traj;
    std::vector<std::vector<Action>> action_sets;
    std::vector<int> chosen;
    std::vector<Var> score_rows;  // one 1xN row per step, on ctx's tape
};

// epsilon-exploratory rollout from the product. Each step samples the
// tempered policy with probability 1-epsilon and a uniform legal action
// otherwise; cached log_pf is always the policy's own log-probability.
// Returns nullopt when the product has no phase-1 action or the rollout
// dead-ends (every final mapping masked).
std::optional<ScoredTrajectory> sample_forward(Policy& policy, Policy::Context& ctx,
                                               const MolGraph& product,
                                               const PatternLibrary& lib, const EnvConfig& env,
                                               double alpha, double epsilon,
                                               std::mt19937_64& rng,
                                               EnvCounters* counters = nullptr);

struct TrainResult {
    int iterations = 0;
    std::vector<double> losses;       // mean batch loss per iteration
    long long resamples = 0;          // skipped rollouts and corpus records
    std::size_t buffer_size = 0;
    double final_val_hit_rate = -1.0; // last validation result; -1 when disabled
};

// The full training loop: per iteration, n_forward exploratory rollouts +
// n_dataset backward-sampled corpus trajectories + n_replay backward-sampled
// buffer trajectories; mean squared trajectory-balance residual; Adam with
// global-norm clipping. Writes one JSON metrics line per iteration to
// `metrics` when given. Throws on a non-finite loss.
TrainResult train_gfn(Policy& policy, const PatternLibrary& lib,
                      const std::vector<ReactionRecord>& train_corpus,
                      const std::vector<ReactionRecord>& val_corpus, const TrainConfig& cfg,
                      const FeasibilityProxy& proxy = {}, std::ostream* metrics = nullptr);

}  // namespace retroflow
