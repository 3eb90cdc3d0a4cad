#include "tabprm/npg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace tabprm::npg {

namespace {

constexpr double kRowTol = 1e-12;

Vector dirichlet(std::mt19937_64& rng, int n) {
  std::exponential_distribution<double> e(1.0);
  Vector w(n);
  for (int i = 0; i < n; ++i) w(i) = e(rng);
  return w / w.sum();
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::vector<std::vector<int>> states_by_layer(const FiniteMdp& mdp) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(mdp.horizon) + 1);
  for (int s = 0; s < mdp.num_states(); ++s) out[static_cast<std::size_t>(mdp.layer[static_cast<std::size_t>(s)])].push_back(s);
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void validate(const FiniteMdp& mdp) {
  const int S = mdp.num_states();
  if (mdp.horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  if (mdp.num_actions < 1) throw std::invalid_argument("need at least one action");
  if (S == 0) throw std::invalid_argument("need at least one state");
  if (static_cast<int>(mdp.transition.size()) != mdp.num_actions)
    throw std::invalid_argument("one transition matrix per action required");
  if (mdp.correctness.size() != S || mdp.rho.size() != S) throw std::invalid_argument("vector sizes must match states");
  for (int s = 0; s < S; ++s) {
    int l = mdp.layer[static_cast<std::size_t>(s)];
    if (l < 0 || l > mdp.horizon) throw std::invalid_argument("state layer out of range");
    if (mdp.rho(s) < 0 || (l != 0 && mdp.rho(s) != 0)) throw std::invalid_argument("rho must live on layer 0");
    if (mdp.terminal(s)) {
      if (mdp.correctness(s) != 0.0 && mdp.correctness(s) != 1.0)
        throw std::invalid_argument("terminal correctness must be 0 or 1");
      continue;
    }
    for (const auto& P : mdp.transition) {
      if (P.rows() != S || P.cols() != S) throw std::invalid_argument("transition matrices must be S x S");
      if (std::fabs(P.row(s).sum() - 1.0) > kRowTol) throw std::invalid_argument("transition row does not sum to 1");
      for (int t = 0; t < S; ++t) {
        if (P(s, t) < 0) throw std::invalid_argument("negative transition probability");
        if (P(s, t) > 0 && mdp.layer[static_cast<std::size_t>(t)] != l + 1)
          throw std::invalid_argument("transitions must lead to the next layer");
      }
    }
  }
  if (std::fabs(mdp.rho.sum() - 1.0) > kRowTol) throw std::invalid_argument("rho does not sum to 1");
}

void validate_policy(const FiniteMdp& mdp, const Policy& pi) {
  if (pi.rows() != mdp.num_states() || pi.cols() != mdp.num_actions) throw std::invalid_argument("policy shape mismatch");
  for (int s = 0; s < pi.rows(); ++s) {
    if ((pi.row(s).array() < 0).any()) throw std::invalid_argument("negative policy entry");
    if (std::fabs(pi.row(s).sum() - 1.0) > kRowTol) throw std::invalid_argument("policy row does not sum to 1");
  }
}

Values exact_values(const FiniteMdp& mdp, const Policy& pi) {
  const int S = mdp.num_states(), A = mdp.num_actions;
  Values out{Matrix::Zero(S, A), Vector::Zero(S), Matrix::Zero(S, A)};
  auto layers = states_by_layer(mdp);
  for (int s : layers.back()) {
    out.v(s) = mdp.correctness(s);
    out.q.row(s).setConstant(out.v(s));
  }
  for (int t = mdp.horizon - 1; t >= 0; --t) {
    for (int s : layers[static_cast<std::size_t>(t)]) {
      for (int a = 0; a < A; ++a) out.q(s, a) = mdp.transition[static_cast<std::size_t>(a)].row(s).dot(out.v);
      out.v(s) = pi.row(s).dot(out.q.row(s));
    }
  }
  for (int s = 0; s < S; ++s) {
    if (mdp.terminal(s)) continue;
    out.a.row(s) = out.q.row(s).array() - out.v(s);
  }
  return out;
}

Vector occupancy(const FiniteMdp& mdp, const Policy& pi) {
  Vector d = mdp.rho;
  auto layers = states_by_layer(mdp);
  for (int t = 0; t < mdp.horizon; ++t) {
    for (int s : layers[static_cast<std::size_t>(t)]) {
      for (int a = 0; a < mdp.num_actions; ++a) {
        double w = d(s) * pi(s, a);
        if (w != 0.0) d += w * mdp.transition[static_cast<std::size_t>(a)].row(s).transpose();
      }
    }
  }
  return d;
}

Policy npg_update(const Policy& pi, const Matrix& advantage, const Matrix& reward, double gamma) {
  if (gamma < 0) throw std::invalid_argument("gamma must be >= 0");
  Matrix signal = gamma * (advantage + reward);
  Policy out(pi.rows(), pi.cols());
  for (int s = 0; s < pi.rows(); ++s) {
    double shift = signal.row(s).maxCoeff();
    Eigen::RowVectorXd w = pi.row(s).array() * (signal.row(s).array() - shift).exp();
    out.row(s) = w / w.sum();
  }
  return out;
}

double pdl_residual(const FiniteMdp& mdp, const Policy& old_policy, const Policy& new_policy) {
  auto old_v = exact_values(mdp, old_policy);
  auto new_v = exact_values(mdp, new_policy);
  double lhs = mdp.rho.dot(new_v.v - old_v.v);
  Vector d = occupancy(mdp, new_policy);
  double rhs = 0.0;
  for (int s = 0; s < mdp.num_states(); ++s) {
    if (mdp.terminal(s) || d(s) == 0.0) continue;
    rhs += d(s) * new_policy.row(s).dot(old_v.a.row(s));
  }
  return lhs - rhs;
}

double state_mean(const Policy& pi, int s, const Matrix& f) { return pi.row(s).dot(f.row(s)); }

double state_cov(const Policy& pi, int s, const Matrix& f, const Matrix& g) {
  double mf = state_mean(pi, s, f), mg = state_mean(pi, s, g);
  return (pi.row(s).array() * (f.row(s).array() - mf) * (g.row(s).array() - mg)).sum();
}

BoundTerms bound_terms(const FiniteMdp& mdp, const Policy& pi, const RewardField& rewards, bool center) {
  auto values = exact_values(mdp, pi);
  Matrix tab = rewards.r_tab, rea = rewards.r_rea;
  BoundTerms t;
  for (int s = 0; s < mdp.num_states(); ++s) {
    if (mdp.terminal(s) || mdp.rho(s) == 0.0) continue;
    double w = mdp.rho(s);
    double m_tab = state_mean(pi, s, rewards.r_tab), m_rea = state_mean(pi, s, rewards.r_rea);
    if (center) {
      tab.row(s).array() -= m_tab;
      rea.row(s).array() -= m_rea;
    }
    t.var_tab += w * state_cov(pi, s, tab, tab);
    t.var_rea += w * state_cov(pi, s, rea, rea);
    t.cov += w * state_cov(pi, s, tab, rea);
    t.align_tab += w * (pi.row(s).array() * tab.row(s).array() * values.a.row(s).array()).sum();
    t.align_rea += w * (pi.row(s).array() * rea.row(s).array() * values.a.row(s).array()).sum();
    t.mean_product += w * m_tab * m_rea;
  }
  return t;
}

std::vector<double> first_order_check(const FiniteMdp& mdp, const Policy& pi, const RewardField& rewards,
                                      const std::vector<double>& gammas) {
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    if (!(gammas[i] > 0)) throw std::invalid_argument("gammas must be positive");
    if (i > 0 && !(gammas[i] < gammas[i - 1])) throw std::invalid_argument("gammas must be descending");
  }
  auto values = exact_values(mdp, pi);
  Matrix r = rewards.total();
  std::vector<double> curve;
  for (double g : gammas) {
    Policy next = npg_update(pi, values.a, r, g);
    double worst = 0.0;
    for (int s = 0; s < mdp.num_states(); ++s) {
      if (mdp.terminal(s)) continue;
      double d = (next.row(s) - pi.row(s)).dot(r.row(s)) / g;
      double limit = state_cov(pi, s, r, r) + state_cov(pi, s, r, values.a);
      worst = std::max(worst, std::fabs(d - limit));
    }
    curve.push_back(worst);
  }
  return curve;
}

FiniteMdp random_mdp(std::mt19937_64& rng, const RandomMdpSpec& spec) {
  FiniteMdp mdp;
  mdp.horizon = uniform_int(rng, spec.min_horizon, spec.max_horizon);
  mdp.num_actions = uniform_int(rng, spec.min_actions, spec.max_actions);
  int S = uniform_int(rng, std::max(spec.min_states, mdp.horizon + 2), std::max(spec.max_states, mdp.horizon + 2));

  // one state per layer, two terminal states, the rest spread at random
  std::vector<int> sizes(static_cast<std::size_t>(mdp.horizon) + 1, 1);
  sizes.back() = 2;
  for (int extra = S - (mdp.horizon + 2); extra > 0; --extra) ++sizes[static_cast<std::size_t>(uniform_int(rng, 0, mdp.horizon))];
  std::vector<std::vector<int>> layers(sizes.size());
  for (std::size_t l = 0; l < sizes.size(); ++l)
    for (int k = 0; k < sizes[l]; ++k) {
      layers[l].push_back(static_cast<int>(mdp.layer.size()));
      mdp.layer.push_back(static_cast<int>(l));
    }

  mdp.correctness = Vector::Zero(S);
  std::bernoulli_distribution coin(0.5);
  const auto& term = layers.back();
  for (int s : term) mdp.correctness(s) = coin(rng) ? 1.0 : 0.0;
  mdp.correctness(term[0]) = 1.0;
  mdp.correctness(term[1]) = 0.0;

  std::bernoulli_distribution sparse(0.3);
  mdp.transition.assign(static_cast<std::size_t>(mdp.num_actions), Matrix::Zero(S, S));
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    const auto& next = layers[l + 1];
    for (int s : layers[l])
      for (auto& P : mdp.transition) {
        Vector w = dirichlet(rng, static_cast<int>(next.size()));
        for (Eigen::Index k = 0; k < w.size(); ++k)
          if (w.size() > 1 && sparse(rng)) w(k) = 0.0;
        if (w.sum() == 0.0) w(uniform_int(rng, 0, static_cast<int>(w.size()) - 1)) = 1.0;
        w /= w.sum();
        for (std::size_t k = 0; k < next.size(); ++k) P(s, next[k]) = w(static_cast<Eigen::Index>(k));
      }
  }
  for (int s : term)
    for (auto& P : mdp.transition) P(s, s) = 1.0;

  mdp.rho = Vector::Zero(S);
  Vector r0 = dirichlet(rng, static_cast<int>(layers[0].size()));
  for (std::size_t k = 0; k < layers[0].size(); ++k) mdp.rho(layers[0][k]) = r0(static_cast<Eigen::Index>(k));
  return mdp;
}

Policy random_policy(std::mt19937_64& rng, const FiniteMdp& mdp) {
  Policy pi(mdp.num_states(), mdp.num_actions);
  for (int s = 0; s < mdp.num_states(); ++s) pi.row(s) = dirichlet(rng, mdp.num_actions).transpose();
  return pi;
}

RewardField random_exclusive_rewards(std::mt19937_64& rng, const FiniteMdp& mdp) {
  const int S = mdp.num_states(), A = mdp.num_actions;
  RewardField f{Matrix::Zero(S, A), Matrix::Zero(S, A), true};
  std::uniform_int_distribution<int> channel(0, 2);
  std::bernoulli_distribution sign(0.5);
  for (int s = 0; s < S; ++s) {
    if (mdp.terminal(s)) continue;
    for (int a = 0; a < A; ++a) {
      double v = sign(rng) ? 1.0 : -1.0;
      switch (channel(rng)) {
        case 0: f.r_tab(s, a) = v; break;
        case 1: f.r_rea(s, a) = v; break;
        default: break;
      }
    }
  }
  return f;
}

Json trial_config_to_json(const TrialConfig& c) {
  return Json{{"count", c.count},
              {"min_states", c.sizes.min_states},
              {"max_states", c.sizes.max_states},
              {"min_actions", c.sizes.min_actions},
              {"max_actions", c.sizes.max_actions},
              {"min_horizon", c.sizes.min_horizon},
              {"max_horizon", c.sizes.max_horizon},
              {"gamma", c.gamma},
              {"center", c.center},
              {"rhs_threshold", c.rhs_threshold},
              {"seed", c.seed},
              {"reward_model", c.reward_model == RewardModel::SignAligned ? "sign_aligned" : "random_exclusive"}};
}

TrialConfig trial_config_from_json(const Json& j) {
  TrialConfig c;
  c.count = j.value("count", c.count);
  c.sizes.min_states = j.value("min_states", c.sizes.min_states);
  c.sizes.max_states = j.value("max_states", c.sizes.max_states);
  c.sizes.min_actions = j.value("min_actions", c.sizes.min_actions);
  c.sizes.max_actions = j.value("max_actions", c.sizes.max_actions);
  c.sizes.min_horizon = j.value("min_horizon", c.sizes.min_horizon);
  c.sizes.max_horizon = j.value("max_horizon", c.sizes.max_horizon);
  c.gamma = j.value("gamma", c.gamma);
  c.center = j.value("center", c.center);
  c.rhs_threshold = j.value("rhs_threshold", c.rhs_threshold);
  c.seed = j.value("seed", c.seed);
  auto model = j.value("reward_model", std::string("random_exclusive"));
  if (model == "sign_aligned") {
    c.reward_model = RewardModel::SignAligned;
  } else if (model != "random_exclusive") {
    throw std::invalid_argument("unknown reward_model: " + model);
  }
  if (!(c.gamma > 0)) throw std::invalid_argument("gamma must be > 0");
  if (c.sizes.min_states > c.sizes.max_states || c.sizes.min_actions > c.sizes.max_actions ||
      c.sizes.min_horizon > c.sizes.max_horizon || c.sizes.min_actions < 1 || c.sizes.min_horizon < 1)
    throw std::invalid_argument("invalid size ranges");
  return c;
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (int i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (int k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(std::move(row));
  }
  return rows;
}

Json mdp_to_json(const FiniteMdp& mdp) {
  Json trans = Json::array();
  for (const auto& P : mdp.transition) trans.push_back(matrix_to_json(P));
  return Json{{"horizon", mdp.horizon},
              {"num_actions", mdp.num_actions},
              {"layer", mdp.layer},
              {"transition", std::move(trans)},
              {"correctness", std::vector<double>(mdp.correctness.data(), mdp.correctness.data() + mdp.correctness.size())},
              {"rho", std::vector<double>(mdp.rho.data(), mdp.rho.data() + mdp.rho.size())}};
}

Json bound_report_to_json(const BoundReport& r) {
  return Json{{"improvement", r.improvement},
              {"rhs_terms",
               {{"var_tab", r.terms.var_tab},
                {"var_rea", r.terms.var_rea},
                {"cov", r.terms.cov},
                {"align_tab", r.terms.align_tab},
                {"align_rea", r.terms.align_rea}}},
              {"rhs", r.rhs},
              {"ratio", r.ratio},
              {"gamma", r.gamma},
              {"cov_law_residual", r.cov_law_residual},
              {"violation", r.violation}};
}

Json summary_to_json(const TrialSummary& s) {
  return Json{{"min_ratio", s.min_ratio},
              {"median_ratio", s.median_ratio},
              {"min_positive_ratio", s.min_positive_ratio},
              {"violations", s.violations},
              {"population", s.population},
              {"trials", s.trials},
              {"max_cov_law_residual", s.max_cov_law_residual},
              {"gamma", s.gamma}};
}

TrialInstance trial_instance(const TrialConfig& config, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  TrialInstance inst;
  inst.mdp = random_mdp(rng, config.sizes);
  inst.pi = random_policy(rng, inst.mdp);
  if (config.reward_model == RewardModel::RandomExclusive) {
    inst.rewards = random_exclusive_rewards(rng, inst.mdp);
  } else {
    auto values = exact_values(inst.mdp, inst.pi);
    const int S = inst.mdp.num_states(), A = inst.mdp.num_actions;
    inst.rewards = RewardField{Matrix::Zero(S, A), Matrix::Zero(S, A), true};
    std::bernoulli_distribution coin(0.5);
    for (int s = 0; s < S; ++s) {
      if (inst.mdp.terminal(s)) continue;
      for (int a = 0; a < A; ++a) {
        double v = values.a(s, a) > 0 ? 1.0 : values.a(s, a) < 0 ? -1.0 : 0.0;
        (coin(rng) ? inst.rewards.r_tab : inst.rewards.r_rea)(s, a) = v;
      }
    }
  }
  return inst;
}

TrialInstance single_state_instance(std::mt19937_64& rng, int actions) {
  TrialInstance inst;
  auto& mdp = inst.mdp;
  mdp.horizon = 1;
  mdp.num_actions = actions;
  const int terminals = std::max(2, actions);
  const int S = 1 + terminals;
  mdp.layer.assign(static_cast<std::size_t>(S), 1);
  mdp.layer[0] = 0;
  mdp.correctness = Vector::Zero(S);
  std::bernoulli_distribution coin(0.5);
  for (int s = 1; s < S; ++s) mdp.correctness(s) = coin(rng) ? 1.0 : 0.0;
  mdp.correctness(1) = 1.0;
  mdp.correctness(2) = 0.0;
  mdp.transition.assign(static_cast<std::size_t>(actions), Matrix::Zero(S, S));
  for (auto& P : mdp.transition) {
    P.block(0, 1, 1, terminals) = dirichlet(rng, terminals).transpose();
    for (int s = 1; s < S; ++s) P(s, s) = 1.0;
  }
  mdp.rho = Vector::Zero(S);
  mdp.rho(0) = 1.0;
  inst.pi = random_policy(rng, mdp);
  inst.rewards = RewardField{Matrix::Zero(S, actions), Matrix::Zero(S, actions), true};
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int a = 0; a < actions; ++a) (coin(rng) ? inst.rewards.r_tab : inst.rewards.r_rea)(0, a) = normal(rng);
  return inst;
}

bool decays(const std::vector<double>& gammas, const std::vector<double>& curve, double min_factor, double floor) {
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    if (curve[i + 1] <= floor) continue;
    double decades = std::log10(gammas[i] / gammas[i + 1]);
    double factor = std::pow(curve[i] / curve[i + 1], 1.0 / decades);
    if (!(factor >= min_factor)) return false;
  }
  return true;
}

BoundReport evaluate_instance(const TrialInstance& inst, const TrialConfig& config, const UpdateFn& update) {
  const auto& mdp = inst.mdp;
  auto values = exact_values(mdp, inst.pi);
  Policy next = update(inst.pi, values.a, inst.rewards.total(), config.gamma);
  auto next_values = exact_values(mdp, next);

  BoundReport r;
  r.gamma = config.gamma;
  r.improvement = mdp.rho.dot(next_values.v - values.v);
  r.terms = bound_terms(mdp, inst.pi, inst.rewards, config.center);
  r.rhs = r.terms.rhs();
  for (int s = 0; s < mdp.num_states(); ++s) {
    if (mdp.terminal(s)) continue;
    double cov = state_cov(inst.pi, s, inst.rewards.r_tab, inst.rewards.r_rea);
    double law = -state_mean(inst.pi, s, inst.rewards.r_tab) * state_mean(inst.pi, s, inst.rewards.r_rea);
    r.cov_law_residual += std::fabs(cov - law);
  }
  r.in_population = r.rhs > config.rhs_threshold;
  if (r.in_population) {
    r.ratio = r.improvement / (config.gamma * r.rhs);
    r.violation = r.improvement < 0;
  }
  return r;
}

Json instance_to_json(std::size_t index, const TrialInstance& inst, const BoundReport& report) {
  return Json{{"index", index},
              {"report", bound_report_to_json(report)},
              {"mdp", mdp_to_json(inst.mdp)},
              {"policy", matrix_to_json(inst.pi)},
              {"r_tab", matrix_to_json(inst.rewards.r_tab)},
              {"r_rea", matrix_to_json(inst.rewards.r_rea)}};
}

TrialSummary falsify_bound(const TrialConfig& config, const std::filesystem::path& audit, const UpdateFn& update,
                           const ViolationFn& on_violation) {
  TrialSummary sum;
  sum.gamma = config.gamma;
  std::ofstream out;
  if (!audit.empty()) {
    if (audit.has_parent_path()) std::filesystem::create_directories(audit.parent_path());
    out.open(audit, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + audit.string());
  }
  std::vector<double> ratios;
  for (std::size_t i = 0; i < config.count; ++i) {
    auto inst = trial_instance(config, i);
    auto r = evaluate_instance(inst, config, update);
    ++sum.trials;
    sum.max_cov_law_residual = std::max(sum.max_cov_law_residual, r.cov_law_residual);
    if (r.in_population) {
      ++sum.population;
      ratios.push_back(r.ratio);
      if (r.violation) {
        ++sum.violations;
        if (on_violation) on_violation(i, inst, r);
      }
    }
    if (out.is_open()) out << instance_to_json(i, inst, r).dump() << '\n';
  }
  if (!ratios.empty()) {
    sum.min_ratio = *std::min_element(ratios.begin(), ratios.end());
    sum.median_ratio = median(ratios);
    double min_pos = 0.0;
    for (double x : ratios)
      if (x > 0 && (min_pos == 0.0 || x < min_pos)) min_pos = x;
    sum.min_positive_ratio = min_pos;
  }
  return sum;
}

}  // namespace tabprm::npg
