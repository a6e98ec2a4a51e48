#include "retroflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "retroflow/canonical.hpp"
#include "retroflow/corpus.hpp"

namespace retroflow {

namespace {

std::string buffer_key(const std::string& product_key, const std::string& reaction) {
    return product_key + "\n" + reaction;
}

// Tempered softmax over raw scores, computed outside the tape: sampling needs
// probabilities but no gradient, and the score row itself is reused for the
// differentiable log-probability of whichever action gets chosen.
std::vector<double> softmax_of(const std::vector<double>& scores, double alpha) {
    double hi = *std::max_element(scores.begin(), scores.end());
    std::vector<double> p(scores.size());
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(alpha * (scores[i] - hi));
        z += p[i];
    }
    for (double& x : p) x /= z;
    return p;
}

int sample_index(const std::vector<double>& probs, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double u = unif(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

// Attach score rows and chosen indices to a trajectory whose actions are
// already fixed (backward-sampled from the corpus or the replay buffer).
ScoredTrajectory score_replay(Policy& policy, Policy::Context& ctx, Trajectory traj,
                              const PatternLibrary& lib, const EnvConfig& env) {
    ScoredTrajectory out;
    out.traj = std::move(traj);
    for (std::size_t i = 0; i < out.traj.actions.size(); ++i) {
        std::vector<Action> actions = enumerate_actions(out.traj.states[i], lib, env);
        auto it = std::find(actions.begin(), actions.end(), out.traj.actions[i]);
        if (it == actions.end())
            throw std::runtime_error("replayed action is not legal in its recorded state");
        out.chosen.push_back(static_cast<int>(it - actions.begin()));
        out.score_rows.push_back(
            policy.action_score_row(ctx, out.traj.states[i], actions, lib));
        out.action_sets.push_back(std::move(actions));
    }
    return out;
}

struct LossParts {
    Var loss;             // 1x1 squared residual on the tape
    double reward = 0.0;  // exp(beta * f)
    double feasibility = 0.0;
};

// Squared trajectory-balance residual for one trajectory, built on ctx's
// tape so the flow entry and every score row stay differentiable.
LossParts trajectory_loss(Policy& policy, Policy::Context& ctx, const ScoredTrajectory& st,
                          const std::unordered_set<std::string>& corpus_keys,
                          const FeasibilityProxy& proxy, const TrainConfig& cfg) {
    Tape& t = *ctx.tape;
    const State& terminal = st.traj.states.back();
    if (terminal.phase != Phase::Terminal)
        throw std::invalid_argument("trajectory does not end in a terminal state");

    LossParts parts;
    parts.feasibility = feasibility_of(terminal, corpus_keys, proxy);
    parts.reward = reward_of(parts.feasibility, cfg.reward_beta);
    double log_reward = cfg.reward_beta * parts.feasibility;

    double sum_log_pb = 0.0;
    for (double lp : st.traj.log_pb) sum_log_pb += lp;

    Var res = t.use(policy.flow_param(st.traj.states.front().product_key));
    for (std::size_t i = 0; i < st.score_rows.size(); ++i) {
        Var log_probs = t.log_softmax_rows(st.score_rows[i], cfg.alpha);
        res = t.add(res, t.pick(log_probs, 0, st.chosen[i]));
    }
    Tensor offset(1, 1);
    offset.at(0, 0) = log_reward + sum_log_pb;
    res = t.sub(res, t.input(offset));
    parts.loss = t.mul(res, res);
    return parts;
}

}  // namespace

double feasibility_of(const State& terminal, const std::unordered_set<std::string>& corpus_keys,
                      const FeasibilityProxy& proxy) {
    if (terminal.phase != Phase::Terminal)
        throw std::invalid_argument("feasibility_of: state is not terminal");
    if (corpus_keys.count(terminal.reaction)) return 1.0;
    if (!proxy) return 0.0;
    return std::clamp(proxy(terminal.reactants, terminal.product), 0.0, 1.0);
}

double reward_of(double feasibility, double beta) { return std::exp(beta * feasibility); }

double tb_loss(double log_flow, double sum_log_pf, double log_reward, double sum_log_pb) {
    double residual = log_flow + sum_log_pf - log_reward - sum_log_pb;
    return residual * residual;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, double threshold)
    : capacity_(capacity), threshold_(threshold) {
    if (capacity_ == 0) throw std::invalid_argument("replay capacity must be positive");
}

bool ReplayBuffer::admit(const State& terminal, double feasibility) {
    if (terminal.phase != Phase::Terminal)
        throw std::invalid_argument("replay buffer only holds terminal states");
    if (feasibility < threshold_) return false;
    std::string key = buffer_key(terminal.product_key, terminal.reaction);
    if (keys_.count(key)) return false;
    keys_.insert(key);
    Entry entry{terminal, feasibility};
    if (entries_.size() < capacity_) {
        entries_.push_back(std::move(entry));
        return true;
    }
    // Full: overwrite the oldest slot.
    Entry& old = entries_[next_];
    keys_.erase(buffer_key(old.terminal.product_key, old.terminal.reaction));
    old = std::move(entry);
    next_ = (next_ + 1) % capacity_;
    return true;
}

std::vector<const ReplayBuffer::Entry*> ReplayBuffer::sample(std::size_t n,
                                                             std::mt19937_64& rng) const {
    n = std::min(n, entries_.size());
    std::vector<std::size_t> order(entries_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Partial Fisher-Yates: the first n slots are a uniform distinct draw.
    for (std::size_t i = 0; i < n; ++i)
        std::swap(order[i], order[i + rng() % (order.size() - i)]);
    std::vector<const Entry*> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(&entries_[order[i]]);
    return out;
}

std::optional<ScoredTrajectory> sample_forward(Policy& policy, Policy::Context& ctx,
                                               const MolGraph& product,
                                               const PatternLibrary& lib, const EnvConfig& env,
                                               double alpha, double epsilon,
                                               std::mt19937_64& rng, EnvCounters* counters) {
    ScoredTrajectory st;
    State s = initial_state(product);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    while (s.phase != Phase::Terminal) {
        std::vector<Action> actions = enumerate_actions(s, lib, env, counters);
        if (actions.empty()) return std::nullopt;  // unsolvable or dead-ended rollout

        Var row = policy.action_score_row(ctx, s, actions, lib);
        const Tensor& raw = ctx.tape->value(row);
        std::vector<double> probs = softmax_of(raw.v, alpha);
        int chosen = unif(rng) < epsilon
                         ? static_cast<int>(rng() % actions.size())
                         : sample_index(probs, rng);

        StepResult r = step(s, actions[chosen], lib, env);
        if (!r.ok)
            throw std::runtime_error("sampled action failed to apply: " + r.error);

        st.traj.states.push_back(s);
        st.traj.actions.push_back(actions[chosen]);
        st.traj.log_pf.push_back(std::log(probs[chosen]));  // policy's, not the mixture's
        st.traj.log_pb.push_back(-std::log(static_cast<double>(parent_count(r.state))));
        st.chosen.push_back(chosen);
        st.score_rows.push_back(row);
        st.action_sets.push_back(std::move(actions));
        s = std::move(r.state);
    }
    st.traj.states.push_back(std::move(s));
    return st;
}

TrainResult train_gfn(Policy& policy, const PatternLibrary& lib,
                      const std::vector<ReactionRecord>& train_corpus,
                      const std::vector<ReactionRecord>& val_corpus, const TrainConfig& cfg,
                      const FeasibilityProxy& proxy, std::ostream* metrics) {
    if (cfg.iterations < 1) throw std::invalid_argument("iterations must be >= 1");
    if (cfg.n_forward < 0 || cfg.n_dataset < 0 || cfg.n_replay < 0)
        throw std::invalid_argument("batch composition counts must be non-negative");
    if (cfg.n_forward + cfg.n_dataset + cfg.n_replay == 0)
        throw std::invalid_argument("batch is empty");
    if (train_corpus.empty()) throw std::invalid_argument("training corpus is empty");

    // One-time corpus prep: reaction keys for the reward clamp, product keys
    // and graphs for rollouts, and the backward-replay skeleton per record.
    // Records whose templates fall outside the library still provide forward
    // products; only backward sampling needs the skeleton.
    std::unordered_set<std::string> corpus_keys;
    for (const ReactionRecord& r : train_corpus) corpus_keys.insert(reaction_key(r));

    struct CorpusEntry {
        const ReactionRecord* record;
        std::string product_key;
    };
    std::vector<CorpusEntry> products;
    struct DatasetEntry {
        PreparedBackward prep;
    };
    std::vector<DatasetEntry> dataset;
    long long unusable = 0;
    for (const ReactionRecord& r : train_corpus) {
        products.push_back({&r, canonical_key(r.product)});
        std::optional<PreparedBackward> prep = prepare_backward(r, lib, cfg.env);
        if (prep)
            dataset.push_back({std::move(*prep)});
        else
            ++unusable;
    }
    if (cfg.n_dataset > 0 && dataset.empty())
        throw std::invalid_argument("no training reaction is representable in the library");

    // Flow entries must exist before the optimizer snapshots the parameter
    // list; every trajectory starts at a corpus product.
    for (const CorpusEntry& e : products) policy.flow_param(e.product_key);
    Adam opt(policy.params(), cfg.lr);

    std::mt19937_64 rng(cfg.seed);
    ReplayBuffer buffer(cfg.replay_capacity, cfg.replay_threshold);
    TrainResult result;
    result.resamples = unusable;

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        Tape tape;
        Policy::Context ctx{&tape, {}, {}};
        std::vector<ScoredTrajectory> batch;
        EnvCounters counters;

        // Forward rollouts: redraw on unsolvable or dead-ended products, with
        // a bounded number of attempts so a hostile corpus cannot hang us.
        int forward_budget = cfg.n_forward * 8;
        for (int i = 0; i < cfg.n_forward && forward_budget > 0; --forward_budget) {
            const CorpusEntry& e = products[rng() % products.size()];
            std::optional<ScoredTrajectory> st =
                sample_forward(policy, ctx, e.record->product, lib, cfg.env, cfg.alpha,
                               cfg.epsilon, rng, &counters);
            if (!st) {
                ++result.resamples;
                continue;
            }
            const State& terminal = st->traj.states.back();
            buffer.admit(terminal, feasibility_of(terminal, corpus_keys, proxy));
            batch.push_back(std::move(*st));
            ++i;
        }

        for (int i = 0; i < cfg.n_dataset; ++i) {
            const DatasetEntry& e = dataset[rng() % dataset.size()];
            batch.push_back(score_replay(policy, ctx,
                                         sample_backward(e.prep, lib, cfg.env, rng), lib,
                                         cfg.env));
        }

        for (const ReplayBuffer::Entry* entry :
             buffer.sample(static_cast<std::size_t>(cfg.n_replay), rng)) {
            batch.push_back(score_replay(
                policy, ctx,
                sample_backward(prepare_backward(entry->terminal), lib, cfg.env, rng), lib,
                cfg.env));
        }

        if (batch.empty()) throw std::runtime_error("no trajectory survived sampling");

        Var total{};
        double reward_sum = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            LossParts parts = trajectory_loss(policy, ctx, batch[i], corpus_keys, proxy, cfg);
            reward_sum += parts.reward;
            total = i == 0 ? parts.loss : tape.add(total, parts.loss);
        }
        total = tape.scale(total, 1.0 / static_cast<double>(batch.size()));

        double loss = tape.value(total).at(0, 0);
        if (!std::isfinite(loss))
            throw std::runtime_error("training diverged: non-finite loss at iteration " +
                                     std::to_string(iter));
        tape.backward(total);
        double grad_norm = opt.clip_gradients(cfg.clip_norm);
        opt.step();
        opt.zero_grad();

        result.losses.push_back(loss);
        result.buffer_size = buffer.size();
        ++result.iterations;

        bool validate = cfg.validate_every > 0 && !val_corpus.empty() &&
                        ((iter + 1) % cfg.validate_every == 0 || iter + 1 == cfg.iterations);
        if (validate) {
            int hits = 0, tried = 0;
            int n_products = std::min<int>(cfg.val_products, val_corpus.size());
            for (int p = 0; p < n_products; ++p) {
                const ReactionRecord& r = val_corpus[p];
                std::unordered_map<std::string, int> freq;
                Tape val_tape;
                Policy::Context val_ctx{&val_tape, {}, {}};
                for (int k = 0; k < cfg.val_samples; ++k) {
                    std::optional<ScoredTrajectory> st = sample_forward(
                        policy, val_ctx, r.product, lib, cfg.env, cfg.alpha, 0.0, rng);
                    if (st) ++freq[st->traj.states.back().reaction];
                }
                if (freq.empty()) continue;
                ++tried;
                std::vector<std::pair<int, std::string>> ranked;
                for (const auto& [key, count] : freq) ranked.push_back({-count, key});
                std::sort(ranked.begin(), ranked.end());
                std::string truth = reaction_key(r);
                for (int k = 0; k < std::min<int>(cfg.val_top_k, ranked.size()); ++k)
                    if (ranked[k].second == truth) {
                        ++hits;
                        break;
                    }
            }
            result.final_val_hit_rate = tried > 0 ? static_cast<double>(hits) / tried : 0.0;
        }

        if (metrics) {
            std::ostringstream line;
            line << "{\"iteration\":" << iter << ",\"loss\":" << loss
                 << ",\"mean_reward\":" << reward_sum / static_cast<double>(batch.size())
                 << ",\"buffer_size\":" << buffer.size()
                 << ",\"resample_count\":" << result.resamples;
            if (validate) line << ",\"val_hit_rate\":" << result.final_val_hit_rate;
            if (grad_norm > cfg.clip_norm) line << ",\"grad_norm\":" << grad_norm;
            if (counters.match_cap_hits > 0)
                line << ",\"match_cap_hits\":" << counters.match_cap_hits;
            line << "}";
            *metrics << line.str() << "\n";
        }
    }

    if (!cfg.checkpoint_path.empty()) policy.save(cfg.checkpoint_path);
    return result;
}

}  // namespace retroflow
