#pragma once

// Exact finite-horizon MDP harness: dynamic-programming values, the
// exponential-tilt policy update, the performance difference identity,
// first-order expansion checks and the improvement-bound trials.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tabprm/table.hpp"

namespace tabprm::npg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Layered MDP. States carry a layer in [0, horizon]; actions in layer t lead
/// to layer t + 1; layer `horizon` is terminal and scored by `correctness`.
/// Every state has the same action count; rows of terminal states are unused.
struct FiniteMdp {
  int horizon = 1;
  int num_actions = 1;
  std::vector<int> layer;             // per state
  std::vector<Matrix> transition;     // per action: S x S, row s = P(. | s, a)
  Vector correctness;                 // per state, 0/1 on terminal states
  Vector rho;                         // initial distribution

  int num_states() const { return static_cast<int>(layer.size()); }
  bool terminal(int s) const { return layer[static_cast<std::size_t>(s)] == horizon; }
};

/// Throws std::invalid_argument unless rows sum to 1 (1e-12), transitions go
/// to the next layer, rho lives on layer 0 and horizon >= 1.
void validate(const FiniteMdp& mdp);

using Policy = Matrix;  // S x A, rows sum to 1

void validate_policy(const FiniteMdp& mdp, const Policy& pi);

struct RewardField {
  Matrix r_tab;  // S x A
  Matrix r_rea;  // S x A
  bool mutually_exclusive = false;

  Matrix total() const { return r_tab + r_rea; }
};

struct Values {
  Matrix q;  // S x A
  Vector v;  // S
  Matrix a;  // S x A
};

Values exact_values(const FiniteMdp& mdp, const Policy& pi);

/// State occupancy summed over layers (each state lives in one layer).
Vector occupancy(const FiniteMdp& mdp, const Policy& pi);

/// pi'(a|s) proportional to pi(a|s) exp(gamma (A(s,a) + r(s,a))).
Policy npg_update(const Policy& pi, const Matrix& advantage, const Matrix& reward, double gamma);

/// E_rho[V' - V] - E_{d'} E_{pi'}[A].
double pdl_residual(const FiniteMdp& mdp, const Policy& old_policy, const Policy& new_policy);

struct BoundTerms {
  double var_tab = 0.0;
  double var_rea = 0.0;
  double cov = 0.0;
  double align_tab = 0.0;
  double align_rea = 0.0;
  double mean_product = 0.0;  // rho-weighted E[r_tab] E[r_rea]

  /// var_tab + var_rea + 2 cov + align_tab + align_rea.
  double rhs() const { return var_tab + var_rea + 2.0 * cov + align_tab + align_rea; }
};

/// rho-weighted per-state variance, covariance and alignment terms over the
/// non-terminal states. With `center`, each reward component is shifted by
/// its per-state mean first.
BoundTerms bound_terms(const FiniteMdp& mdp, const Policy& pi, const RewardField& rewards, bool center);

/// Per-state moments under pi at state s.
double state_mean(const Policy& pi, int s, const Matrix& f);
double state_cov(const Policy& pi, int s, const Matrix& f, const Matrix& g);

/// max over non-terminal states of |D(gamma) - (Var[r] + Cov[r, A])|, with
/// D(gamma) = <pi'_gamma - pi, r> / gamma. Gammas must be positive and descending.
std::vector<double> first_order_check(const FiniteMdp& mdp, const Policy& pi, const RewardField& rewards,
                                      const std::vector<double>& gammas);

struct RandomMdpSpec {
  int min_states = 2;
  int max_states = 12;
  int min_actions = 2;
  int max_actions = 4;
  int min_horizon = 1;
  int max_horizon = 4;
};

FiniteMdp random_mdp(std::mt19937_64& rng, const RandomMdpSpec& spec);
Policy random_policy(std::mt19937_64& rng, const FiniteMdp& mdp);
/// Values in {-1, 0, 1}; at each (s, a) at most one channel is non-zero.
RewardField random_exclusive_rewards(std::mt19937_64& rng, const FiniteMdp& mdp);

enum class RewardModel { RandomExclusive, SignAligned };

struct TrialConfig {
  std::size_t count = 1000;
  RandomMdpSpec sizes;
  double gamma = 0.05;
  bool center = true;
  double rhs_threshold = 0.01;
  std::uint64_t seed = 0;
  RewardModel reward_model = RewardModel::RandomExclusive;
};

Json trial_config_to_json(const TrialConfig& c);
TrialConfig trial_config_from_json(const Json& j);

struct BoundReport {
  double improvement = 0.0;
  BoundTerms terms;
  double rhs = 0.0;
  double ratio = 0.0;  // improvement / (gamma * rhs); 0 when rhs <= threshold
  double gamma = 0.0;
  double cov_law_residual = 0.0;  // |cov - (-E[tab] E[rea])| summed over states
  bool in_population = false;     // rhs > threshold
  bool violation = false;         // in population and improvement < 0
};

struct TrialSummary {
  std::size_t trials = 0;
  std::size_t population = 0;
  std::size_t violations = 0;
  double min_ratio = 0.0;
  double median_ratio = 0.0;
  double min_positive_ratio = 0.0;
  double max_cov_law_residual = 0.0;
  double gamma = 0.0;
};

Json bound_report_to_json(const BoundReport& r);
Json summary_to_json(const TrialSummary& s);
Json mdp_to_json(const FiniteMdp& mdp);
Json matrix_to_json(const Matrix& m);

using UpdateFn = std::function<Policy(const Policy&, const Matrix&, const Matrix&, double)>;

struct TrialInstance {
  FiniteMdp mdp;
  Policy pi;
  RewardField rewards;
};

/// The instance drawn for trial `index` under `config`.
TrialInstance trial_instance(const TrialConfig& config, std::size_t index);

/// Horizon-1 MDP with a single decision state, `actions` actions and
/// Gaussian mutually exclusive rewards.
TrialInstance single_state_instance(std::mt19937_64& rng, int actions);

/// True when every consecutive pair of the residual curve shrinks by at least
/// `min_factor` per decade of gamma (residuals under `floor` count as decayed).
bool decays(const std::vector<double>& gammas, const std::vector<double>& curve, double min_factor,
            double floor = 1e-13);

BoundReport evaluate_instance(const TrialInstance& inst, const TrialConfig& config, const UpdateFn& update = npg_update);

using ViolationFn = std::function<void(std::size_t, const TrialInstance&, const BoundReport&)>;

Json instance_to_json(std::size_t index, const TrialInstance& inst, const BoundReport& report);

/// Runs config.count trials; when `audit` is non-empty every instance is
/// written there as one JSON line. `on_violation` sees each violating trial.
TrialSummary falsify_bound(const TrialConfig& config, const std::filesystem::path& audit = {},
                           const UpdateFn& update = npg_update, const ViolationFn& on_violation = {});

}  // namespace tabprm::npg
