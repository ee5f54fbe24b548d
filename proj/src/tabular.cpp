#include "macpf/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace macpf {

namespace {

// Endpoint smoothing for the Theorem-2 logit path: the deterministic
// argmax/argmin product policies are represented as one-hot logits scaled by
// 1/0.05, which keeps the interpolation differentiable while staying within
// ~1e-8 of the exact extreme expectations on unit-scale Q tables.
constexpr double kEndpointTemperature = 0.05;

}  // namespace

JointActionSpace::JointActionSpace(std::vector<int> actions_per_agent)
    : counts_(std::move(actions_per_agent)) {
  if (counts_.empty()) {
    throw std::invalid_argument("JointActionSpace: need at least one agent");
  }
  size_ = 1;
  for (int c : counts_) {
    if (c <= 0) {
      throw std::invalid_argument("JointActionSpace: action counts must be positive");
    }
    size_ *= c;
  }
}

int JointActionSpace::encode(std::span<const int> actions) const {
  if (actions.size() != counts_.size()) {
    throw std::invalid_argument("JointActionSpace::encode: agent count mismatch");
  }
  int code = 0;
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    if (actions[i] < 0 || actions[i] >= counts_[i]) {
      throw std::invalid_argument("JointActionSpace::encode: action out of range");
    }
    code = code * counts_[i] + actions[i];
  }
  return code;
}

void JointActionSpace::decode(int joint, std::span<int> actions) const {
  if (joint < 0 || joint >= size_) {
    throw std::invalid_argument("JointActionSpace::decode: index out of range");
  }
  for (int i = num_agents() - 1; i >= 0; --i) {
    actions[i] = joint % counts_[i];
    joint /= counts_[i];
  }
}

std::vector<int> JointActionSpace::decode(int joint) const {
  std::vector<int> actions(counts_.size());
  decode(joint, actions);
  return actions;
}

int TabularMMDP::n_joint_actions() const {
  int total = 1;
  for (int c : actions_per_agent) total *= c;
  return total;
}

void TabularMMDP::validate() const {
  if (n_states <= 0) throw std::invalid_argument("TabularMMDP: n_states must be positive");
  if (actions_per_agent.empty()) {
    throw std::invalid_argument("TabularMMDP: need at least one agent");
  }
  for (int c : actions_per_agent) {
    if (c <= 0) throw std::invalid_argument("TabularMMDP: action counts must be positive");
  }
  if (!(discount >= 0.0 && discount < 1.0)) {
    throw std::invalid_argument("TabularMMDP: discount must lie in [0, 1)");
  }
  const std::size_t sa = static_cast<std::size_t>(n_states) * n_joint_actions();
  if (transition.size() != sa * n_states) {
    throw std::invalid_argument("TabularMMDP: transition table size mismatch");
  }
  if (reward.size() != sa) {
    throw std::invalid_argument("TabularMMDP: reward table size mismatch");
  }
  for (double r : reward) {
    if (!std::isfinite(r)) throw std::invalid_argument("TabularMMDP: non-finite reward");
  }
  for (std::size_t row = 0; row < sa; ++row) {
    double sum = 0.0;
    for (int s2 = 0; s2 < n_states; ++s2) {
      const double p = transition[row * n_states + s2];
      if (!(p >= -1e-12) || !std::isfinite(p)) {
        throw std::invalid_argument("TabularMMDP: invalid transition probability");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("TabularMMDP: transition row does not sum to 1");
    }
  }
}

void JointDistributionTable::validate() const {
  for (int s = 0; s < n_states; ++s) {
    double sum = 0.0;
    for (int a = 0; a < n_joint_actions; ++a) {
      const double v = at(s, a);
      if (!(v >= -1e-12) || !std::isfinite(v)) {
        throw std::invalid_argument("JointDistributionTable: invalid probability");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("JointDistributionTable: row does not sum to 1");
    }
  }
}

double ConditionalPolicyBundle::joint_probability(
    int state, std::span<const int> actions) const {
  double prob = 1.0;
  for (std::size_t k = 0; k < tables.size(); ++k) {
    const Table& t = tables[k];
    int prefix = 0;
    for (std::size_t j = 0; j < k; ++j) {
      prefix = prefix * tables[j].n_actions + actions[ordering[j]];
    }
    prob *= t.at(state, prefix, actions[t.agent]);
  }
  return prob;
}

JointDistributionTable ConditionalPolicyBundle::to_joint(
    const JointActionSpace& space, int n_states) const {
  JointDistributionTable joint(n_states, space.size());
  std::vector<int> actions(space.num_agents());
  for (int s = 0; s < n_states; ++s) {
    for (int a = 0; a < space.size(); ++a) {
      space.decode(a, actions);
      joint.at(s, a) = joint_probability(s, actions);
    }
  }
  return joint;
}

JointQTable joint_soft_policy_evaluation(const TabularMMDP& mmdp,
                                         const JointDistributionTable& policy,
                                         double alpha, double tol, int max_iters,
                                         const JointQTable* warm_start) {
  mmdp.validate();
  policy.validate();
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (!(tol > 0.0)) throw std::invalid_argument("tol must be positive");
  const int S = mmdp.n_states;
  const int A = mmdp.n_joint_actions();
  if (policy.n_states != S || policy.n_joint_actions != A) {
    throw std::invalid_argument("policy shape does not match mmdp");
  }

  JointQTable q = warm_start ? *warm_start : JointQTable(S, A);
  std::vector<double> value(S, 0.0);
  double residual = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    // V(s) = E_pi[Q - alpha log pi]; zero-probability actions contribute 0.
    for (int s = 0; s < S; ++s) {
      double v = 0.0;
      for (int a = 0; a < A; ++a) {
        const double p = policy.at(s, a);
        if (p > 0.0) v += p * (q.at(s, a) - alpha * std::log(p));
      }
      value[s] = v;
    }
    residual = 0.0;
    for (int s = 0; s < S; ++s) {
      for (int a = 0; a < A; ++a) {
        double next = 0.0;
        const std::size_t row =
            (static_cast<std::size_t>(s) * A + a) * S;
        for (int s2 = 0; s2 < S; ++s2) {
          next += mmdp.transition[row + s2] * value[s2];
        }
        const double updated = mmdp.r(s, a) + mmdp.discount * next;
        residual = std::max(residual, std::abs(updated - q.at(s, a)));
        q.at(s, a) = updated;
      }
    }
    if (residual <= tol) return q;
  }
  throw ConvergenceError("joint_soft_policy_evaluation: iteration cap reached",
                         residual);
}

JointDistributionTable boltzmann_joint(const JointQTable& q, double alpha) {
  JointDistributionTable out(q.n_states, q.n_joint_actions);
  for (int s = 0; s < q.n_states; ++s) {
    const std::vector<double> row = softmax(q.row(s), alpha);
    for (int a = 0; a < q.n_joint_actions; ++a) out.at(s, a) = row[a];
  }
  return out;
}

namespace {

std::vector<int> default_ordering(int n) {
  std::vector<int> ord(n);
  for (int i = 0; i < n; ++i) ord[i] = i;
  return ord;
}

std::vector<int> resolve_ordering(std::span<const int> ordering, int n) {
  if (ordering.empty()) return default_ordering(n);
  if (static_cast<int>(ordering.size()) != n) {
    throw std::invalid_argument("ordering length must equal agent count");
  }
  std::vector<bool> seen(n, false);
  for (int i : ordering) {
    if (i < 0 || i >= n || seen[i]) {
      throw std::invalid_argument("ordering must be a permutation of 0..N-1");
    }
    seen[i] = true;
  }
  return {ordering.begin(), ordering.end()};
}

// Prefix code of the actions of ordering positions 0..k-1.
int prefix_code(std::span<const int> actions, std::span<const int> ordering,
                const JointActionSpace& space, int k) {
  int code = 0;
  for (int j = 0; j < k; ++j) {
    code = code * space.action_count(ordering[j]) + actions[ordering[j]];
  }
  return code;
}

}  // namespace

ConditionalPolicyBundle chain_rule_conditionals(
    const JointDistributionTable& joint, const JointActionSpace& space,
    std::span<const int> ordering, double alpha,
    std::span<const double> agent_alphas) {
  joint.validate();
  const int n = space.num_agents();
  ConditionalPolicyBundle bundle;
  bundle.ordering = resolve_ordering(ordering, n);
  bundle.alpha = alpha;
  bundle.agent_alphas = agent_alphas.empty()
                            ? std::vector<double>(n, alpha)
                            : std::vector<double>(agent_alphas.begin(), agent_alphas.end());

  const int S = joint.n_states;
  std::vector<int> actions(n);
  for (int k = 0; k < n; ++k) {
    const int agent = bundle.ordering[k];
    ConditionalPolicyBundle::Table table;
    table.agent = agent;
    table.n_actions = space.action_count(agent);
    table.prefix_size = 1;
    for (int j = 0; j < k; ++j) {
      table.prefix_size *= space.action_count(bundle.ordering[j]);
    }
    table.p.assign(static_cast<std::size_t>(S) * table.prefix_size * table.n_actions, 0.0);

    // Marginalize the joint over the tail agents.
    for (int s = 0; s < S; ++s) {
      for (int a = 0; a < space.size(); ++a) {
        space.decode(a, actions);
        const int prefix = prefix_code(actions, bundle.ordering, space, k);
        table.at(s, prefix, actions[agent]) += joint.at(s, a);
      }
    }
    // Normalize; zero-probability prefixes become uniform so tables are total.
    for (int s = 0; s < S; ++s) {
      for (int prefix = 0; prefix < table.prefix_size; ++prefix) {
        double mass = 0.0;
        for (int a = 0; a < table.n_actions; ++a) mass += table.at(s, prefix, a);
        if (mass > 0.0) {
          for (int a = 0; a < table.n_actions; ++a) table.at(s, prefix, a) /= mass;
        } else {
          const double u = 1.0 / table.n_actions;
          for (int a = 0; a < table.n_actions; ++a) table.at(s, prefix, a) = u;
        }
      }
    }
    bundle.tables.push_back(std::move(table));
  }
  return bundle;
}

ConditionalQTables conditional_q_values(const JointQTable& q,
                                        const JointActionSpace& space,
                                        double alpha,
                                        std::span<const int> ordering) {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  const int n = space.num_agents();
  const std::vector<int> ord = resolve_ordering(ordering, n);
  const int S = q.n_states;

  ConditionalQTables out;
  std::vector<int> actions(n);
  for (int k = 0; k < n; ++k) {
    const int agent = ord[k];
    ConditionalPolicyBundle::Table table;
    table.agent = agent;
    table.n_actions = space.action_count(agent);
    table.prefix_size = 1;
    for (int j = 0; j < k; ++j) table.prefix_size *= space.action_count(ord[j]);

    const std::size_t groups =
        static_cast<std::size_t>(S) * table.prefix_size * table.n_actions;
    std::vector<std::vector<double>> buckets(groups);
    for (int s = 0; s < S; ++s) {
      for (int a = 0; a < space.size(); ++a) {
        space.decode(a, actions);
        const int prefix = prefix_code(actions, ord, space, k);
        const std::size_t g =
            (static_cast<std::size_t>(s) * table.prefix_size + prefix) * table.n_actions +
            actions[agent];
        buckets[g].push_back(q.at(s, a));
      }
    }
    table.p.resize(groups);
    for (std::size_t g = 0; g < groups; ++g) {
      table.p[g] = log_sum_exp(buckets[g], alpha);
    }
    out.push_back(std::move(table));
  }
  return out;
}

FactorizedSolveResult conditional_factorized_soft_policy_iteration(
    const TabularMMDP& mmdp, double alpha, double tol, int max_iters,
    std::span<const int> ordering) {
  mmdp.validate();
  if (!(alpha > 0.0) || !(tol > 0.0)) {
    throw std::invalid_argument("alpha and tol must be positive");
  }
  const int S = mmdp.n_states;
  const int A = mmdp.n_joint_actions();
  const double eval_tol = std::max(1e-13, tol * 1e-2);

  JointDistributionTable policy(S, A);
  for (double& p : policy.p) p = 1.0 / A;

  JointQTable q(S, A);
  double change = std::numeric_limits<double>::infinity();
  int steps = 0;
  bool converged = false;
  for (; steps < max_iters; ++steps) {
    q = joint_soft_policy_evaluation(mmdp, policy, alpha, eval_tol, 1000000, &q);
    JointDistributionTable improved = boltzmann_joint(q, alpha);
    change = 0.0;
    for (std::size_t i = 0; i < policy.p.size(); ++i) {
      change = std::max(change, std::abs(improved.p[i] - policy.p[i]));
    }
    policy = std::move(improved);
    if (change <= tol) {
      converged = true;
      ++steps;
      break;
    }
  }
  if (!converged) {
    throw ConvergenceError(
        "conditional_factorized_soft_policy_iteration: iteration cap reached",
        change);
  }

  FactorizedSolveResult result;
  result.q = joint_soft_policy_evaluation(mmdp, policy, alpha, eval_tol, 1000000, &q);
  result.policy = chain_rule_conditionals(policy, mmdp.joint_space(), ordering, alpha);
  result.joint_policy = std::move(policy);
  result.improvement_steps = steps;
  result.final_policy_change = change;
  return result;
}

JointQTable joint_soft_value_iteration(const TabularMMDP& mmdp, double alpha,
                                       double tol, int max_iters) {
  mmdp.validate();
  if (!(alpha > 0.0) || !(tol > 0.0)) {
    throw std::invalid_argument("alpha and tol must be positive");
  }
  const int S = mmdp.n_states;
  const int A = mmdp.n_joint_actions();
  JointQTable q(S, A);
  std::vector<double> value(S, 0.0);
  double residual = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    for (int s = 0; s < S; ++s) value[s] = log_sum_exp(q.row(s), alpha);
    residual = 0.0;
    for (int s = 0; s < S; ++s) {
      for (int a = 0; a < A; ++a) {
        double next = 0.0;
        const std::size_t row = (static_cast<std::size_t>(s) * A + a) * S;
        for (int s2 = 0; s2 < S; ++s2) next += mmdp.transition[row + s2] * value[s2];
        const double updated = mmdp.r(s, a) + mmdp.discount * next;
        residual = std::max(residual, std::abs(updated - q.at(s, a)));
        q.at(s, a) = updated;
      }
    }
    if (residual <= tol) return q;
  }
  throw ConvergenceError("joint_soft_value_iteration: iteration cap reached",
                         residual);
}

double expected_value_under_policy(std::span<const double> q_row,
                                   std::span<const double> dist) {
  if (q_row.size() != dist.size()) {
    throw std::invalid_argument("expected_value_under_policy: size mismatch");
  }
  double e = 0.0;
  for (std::size_t i = 0; i < q_row.size(); ++i) e += dist[i] * q_row[i];
  return e;
}

double expected_value_under_product(std::span<const double> q_row,
                                    const std::vector<std::vector<double>>& product,
                                    const JointActionSpace& space) {
  if (static_cast<int>(product.size()) != space.num_agents()) {
    throw std::invalid_argument("expected_value_under_product: agent count mismatch");
  }
  std::vector<int> actions(space.num_agents());
  double e = 0.0;
  for (int a = 0; a < space.size(); ++a) {
    space.decode(a, actions);
    double p = 1.0;
    for (int i = 0; i < space.num_agents(); ++i) p *= product[i][actions[i]];
    e += p * q_row[a];
  }
  return e;
}

std::vector<std::vector<double>> independent_counterpart(
    std::span<const double> q_row, std::span<const double> dep,
    const JointActionSpace& space, double tol) {
  if (static_cast<int>(q_row.size()) != space.size() || dep.size() != q_row.size()) {
    throw std::invalid_argument("independent_counterpart: size mismatch");
  }
  if (!(tol > 0.0)) throw std::invalid_argument("tol must be positive");
  const int n = space.num_agents();
  const double target = expected_value_under_policy(q_row, dep);

  // Endpoint logits: smoothed one-hots of the argmax / argmin joint actions
  // (ties break toward the lowest joint index).
  const int best = static_cast<int>(
      std::max_element(q_row.begin(), q_row.end()) - q_row.begin());
  const int worst = static_cast<int>(
      std::min_element(q_row.begin(), q_row.end()) - q_row.begin());
  const std::vector<int> best_actions = space.decode(best);
  const std::vector<int> worst_actions = space.decode(worst);

  const double scale = 1.0 / kEndpointTemperature;
  auto policy_at = [&](double t) {
    std::vector<std::vector<double>> product(n);
    for (int i = 0; i < n; ++i) {
      std::vector<double> logits(space.action_count(i), 0.0);
      for (int a = 0; a < space.action_count(i); ++a) {
        const double hi = a == best_actions[i] ? scale : 0.0;
        const double lo = a == worst_actions[i] ? scale : 0.0;
        logits[a] = (1.0 - t) * lo + t * hi;
      }
      product[i] = softmax(logits, 1.0);
    }
    return product;
  };
  auto gap_at = [&](const std::vector<std::vector<double>>& product) {
    return expected_value_under_product(q_row, product, space) - target;
  };

  std::vector<std::vector<double>> at_lo = policy_at(0.0);
  std::vector<std::vector<double>> at_hi = policy_at(1.0);
  const double f_lo = gap_at(at_lo);
  const double f_hi = gap_at(at_hi);
  if (std::abs(f_lo) <= tol) return at_lo;
  if (std::abs(f_hi) <= tol) return at_hi;
  if (f_lo > 0.0 || f_hi < 0.0) {
    // The smoothed endpoints span [min+eps, max-eps]; a target outside that
    // range by more than tol means the precondition was violated.
    throw ConvergenceError(
        "independent_counterpart: target not bracketed by endpoint policies",
        std::min(std::abs(f_lo), std::abs(f_hi)));
  }

  double lo = 0.0, hi = 1.0;
  std::vector<std::vector<double>> mid_policy;
  double f_mid = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    mid_policy = policy_at(mid);
    f_mid = gap_at(mid_policy);
    if (std::abs(f_mid) <= tol) return mid_policy;
    if (f_mid > 0.0) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  throw ConvergenceError("independent_counterpart: bisection did not converge",
                         std::abs(f_mid));
}

void save_mmdp(const TabularMMDP& mmdp, std::ostream& out) {
  mmdp.validate();
  out.precision(17);
  out << "macpf-mmdp v1\n";
  out << "states " << mmdp.n_states << "\n";
  out << "agents " << mmdp.n_agents() << "\n";
  out << "actions";
  for (int c : mmdp.actions_per_agent) out << " " << c;
  out << "\n";
  out << "gamma " << mmdp.discount << "\n";
  const int A = mmdp.n_joint_actions();
  out << "transition\n";
  for (int s = 0; s < mmdp.n_states; ++s) {
    for (int a = 0; a < A; ++a) {
      out << s << " " << a << " :";
      for (int s2 = 0; s2 < mmdp.n_states; ++s2) out << " " << mmdp.p(s, a, s2);
      out << "\n";
    }
  }
  out << "reward\n";
  for (int s = 0; s < mmdp.n_states; ++s) {
    out << s << " :";
    for (int a = 0; a < A; ++a) out << " " << mmdp.r(s, a);
    out << "\n";
  }
  out << "end\n";
}

TabularMMDP load_mmdp(std::istream& in) {
  auto fail = [](const std::string& why) -> void {
    throw std::runtime_error("load_mmdp: " + why);
  };
  std::string line;
  if (!std::getline(in, line) || line != "macpf-mmdp v1") {
    fail("bad magic or unsupported version");
  }
  TabularMMDP mmdp;
  std::string token;
  int n_agents = 0;
  in >> token >> mmdp.n_states;
  if (token != "states") fail("expected 'states'");
  in >> token >> n_agents;
  if (token != "agents") fail("expected 'agents'");
  in >> token;
  if (token != "actions") fail("expected 'actions'");
  mmdp.actions_per_agent.resize(n_agents);
  for (int i = 0; i < n_agents; ++i) in >> mmdp.actions_per_agent[i];
  in >> token >> mmdp.discount;
  if (token != "gamma") fail("expected 'gamma'");
  in >> token;
  if (token != "transition") fail("expected 'transition'");
  const int A = mmdp.n_joint_actions();
  const int S = mmdp.n_states;
  mmdp.transition.assign(static_cast<std::size_t>(S) * A * S, 0.0);
  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) {
      int rs = 0, ra = 0;
      std::string colon;
      in >> rs >> ra >> colon;
      if (!in || rs != s || ra != a || colon != ":") fail("malformed transition row");
      for (int s2 = 0; s2 < S; ++s2) {
        in >> mmdp.transition[(static_cast<std::size_t>(s) * A + a) * S + s2];
      }
    }
  }
  in >> token;
  if (token != "reward") fail("expected 'reward'");
  mmdp.reward.assign(static_cast<std::size_t>(S) * A, 0.0);
  for (int s = 0; s < S; ++s) {
    int rs = 0;
    std::string colon;
    in >> rs >> colon;
    if (!in || rs != s || colon != ":") fail("malformed reward row");
    for (int a = 0; a < A; ++a) {
      in >> mmdp.reward[static_cast<std::size_t>(s) * A + a];
    }
  }
  in >> token;
  if (!in || token != "end") fail("missing 'end'");
  mmdp.validate();
  return mmdp;
}

}  // namespace macpf
