#pragma once

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "macpf/numerics.hpp"

namespace macpf {

/// Solver failed to reach its tolerance within the iteration cap.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Mixed-radix codec between per-agent actions and flat joint-action indices.
/// Agent 0 is the most significant digit.
class JointActionSpace {
 public:
  explicit JointActionSpace(std::vector<int> actions_per_agent);

  int num_agents() const { return static_cast<int>(counts_.size()); }
  int size() const { return size_; }
  int action_count(int agent) const { return counts_[agent]; }
  const std::vector<int>& action_counts() const { return counts_; }

  int encode(std::span<const int> actions) const;
  void decode(int joint, std::span<int> actions) const;
  std::vector<int> decode(int joint) const;

 private:
  std::vector<int> counts_;
  int size_;
};

/// Exact finite multi-agent MDP with a shared reward.
struct TabularMMDP {
  int n_states = 0;
  std::vector<int> actions_per_agent;
  double discount = 0.9;
  std::vector<double> transition;  // [s][joint_a][s'], row-major
  std::vector<double> reward;      // [s][joint_a]

  int n_agents() const { return static_cast<int>(actions_per_agent.size()); }
  int n_joint_actions() const;
  JointActionSpace joint_space() const { return JointActionSpace(actions_per_agent); }

  double p(int s, int joint_a, int s_next) const {
    return transition[(static_cast<std::size_t>(s) * n_joint_actions() + joint_a) * n_states + s_next];
  }
  double r(int s, int joint_a) const {
    return reward[static_cast<std::size_t>(s) * n_joint_actions() + joint_a];
  }

  /// Checks row sums, finiteness, and discount range; throws on violation.
  void validate() const;
};

/// Q values indexed by (state, joint action).
struct JointQTable {
  int n_states = 0;
  int n_joint_actions = 0;
  std::vector<double> q;

  JointQTable() = default;
  JointQTable(int states, int joint_actions)
      : n_states(states),
        n_joint_actions(joint_actions),
        q(static_cast<std::size_t>(states) * joint_actions, 0.0) {}

  double& at(int s, int a) { return q[static_cast<std::size_t>(s) * n_joint_actions + a]; }
  double at(int s, int a) const { return q[static_cast<std::size_t>(s) * n_joint_actions + a]; }
  std::span<const double> row(int s) const {
    return {q.data() + static_cast<std::size_t>(s) * n_joint_actions,
            static_cast<std::size_t>(n_joint_actions)};
  }
};

/// Per-state probability table over joint actions.
struct JointDistributionTable {
  int n_states = 0;
  int n_joint_actions = 0;
  std::vector<double> p;

  JointDistributionTable() = default;
  JointDistributionTable(int states, int joint_actions)
      : n_states(states),
        n_joint_actions(joint_actions),
        p(static_cast<std::size_t>(states) * joint_actions, 0.0) {}

  double& at(int s, int a) { return p[static_cast<std::size_t>(s) * n_joint_actions + a]; }
  double at(int s, int a) const { return p[static_cast<std::size_t>(s) * n_joint_actions + a]; }
  std::span<const double> row(int s) const {
    return {p.data() + static_cast<std::size_t>(s) * n_joint_actions,
            static_cast<std::size_t>(n_joint_actions)};
  }
  void validate() const;
};

/// Per-agent conditional policy tables pi_i(a_i | s, a_<i) under a fixed
/// agent ordering. Table k belongs to the agent at position k of the
/// ordering and is indexed by (state, prefix code, own action), where the
/// prefix code mixed-radix-encodes the actions of positions 0..k-1.
struct ConditionalPolicyBundle {
  std::vector<int> ordering;
  double alpha = 1.0;
  std::vector<double> agent_alphas;

  struct Table {
    int agent = 0;        // agent id (ordering[k])
    int prefix_size = 1;  // product of earlier agents' action counts
    int n_actions = 0;
    std::vector<double> p;  // [state][prefix][action]

    double& at(int s, int prefix, int a) {
      return p[(static_cast<std::size_t>(s) * prefix_size + prefix) * n_actions + a];
    }
    double at(int s, int prefix, int a) const {
      return p[(static_cast<std::size_t>(s) * prefix_size + prefix) * n_actions + a];
    }
    std::span<const double> row(int s, int prefix) const {
      return {p.data() + (static_cast<std::size_t>(s) * prefix_size + prefix) * n_actions,
              static_cast<std::size_t>(n_actions)};
    }
  };
  std::vector<Table> tables;

  /// Product over agents of the conditionals, evaluated at one joint action.
  double joint_probability(int state, std::span<const int> actions) const;

  /// Expands the chain-rule product into a full joint table.
  JointDistributionTable to_joint(const JointActionSpace& space, int n_states) const;
};

/// Conditional Q tables Q_i(s, a_<i, a_i): the tail log-sum-exp of the joint
/// Q at temperature alpha. Shares the Table layout with the policy bundle.
using ConditionalQTables = std::vector<ConditionalPolicyBundle::Table>;

/// Fixed point of the entropy-augmented policy evaluation backup
///   Q(s,a) = r(s,a) + gamma * E_{s'}[ E_pi[Q(s',.) - alpha log pi(.|s')] ].
/// Stops when the successive-iterate sup-norm difference is <= tol.
JointQTable joint_soft_policy_evaluation(const TabularMMDP& mmdp,
                                         const JointDistributionTable& policy,
                                         double alpha, double tol,
                                         int max_iters = 1000000,
                                         const JointQTable* warm_start = nullptr);

/// Per-state softmax of the joint Q row at temperature alpha.
JointDistributionTable boltzmann_joint(const JointQTable& q, double alpha);

/// Chain-rule factorization of a joint distribution. Conditionals on a
/// zero-probability prefix are defined as uniform so every table is total.
ConditionalPolicyBundle chain_rule_conditionals(
    const JointDistributionTable& joint, const JointActionSpace& space,
    std::span<const int> ordering, double alpha = 1.0,
    std::span<const double> agent_alphas = {});

/// Q_i(s, a_<i, a_i) = alpha * log sum_{a_>i} exp(Q_jt(s, a) / alpha); the
/// empty tail (last agent) reduces to Q_jt itself.
ConditionalQTables conditional_q_values(const JointQTable& q,
                                        const JointActionSpace& space,
                                        double alpha,
                                        std::span<const int> ordering);

struct FactorizedSolveResult {
  ConditionalPolicyBundle policy;
  JointDistributionTable joint_policy;
  JointQTable q;  // evaluation of the final policy
  int improvement_steps = 0;
  double final_policy_change = 0.0;
};

/// Alternates exact joint soft policy evaluation with the closed-form
/// Boltzmann improvement whose chain-rule conditionals solve the per-agent
/// KL projection. Stops when the policy change sup-norm is <= tol.
FactorizedSolveResult conditional_factorized_soft_policy_iteration(
    const TabularMMDP& mmdp, double alpha, double tol, int max_iters = 10000,
    std::span<const int> ordering = {});

/// Brute-force optimum: soft value iteration treating the joint action as a
/// single agent's action. Serves as the cross-check for the factorized solver.
JointQTable joint_soft_value_iteration(const TabularMMDP& mmdp, double alpha,
                                       double tol, int max_iters = 1000000);

/// Product policy (one distribution per agent) whose expected Q matches the
/// dependent policy's expected Q within tol. Constructed by bisecting a
/// logit-space path between smoothed argmin/argmax product policies.
std::vector<std::vector<double>> independent_counterpart(
    std::span<const double> q_row, std::span<const double> dep,
    const JointActionSpace& space, double tol);

/// sum_a dist[a] * q_row[a].
double expected_value_under_policy(std::span<const double> q_row,
                                   std::span<const double> dist);

/// Expected Q of a product policy over the joint action space.
double expected_value_under_product(std::span<const double> q_row,
                                    const std::vector<std::vector<double>>& product,
                                    const JointActionSpace& space);

/// Structured text serialization (versioned) used by the CLI and fixtures.
void save_mmdp(const TabularMMDP& mmdp, std::ostream& out);
TabularMMDP load_mmdp(std::istream& in);

}  // namespace macpf
