#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sigs/atoms.hpp"
#include "sigs/grammar.hpp"
#include "sigs/interp.hpp"
#include "sigs/residual.hpp"
#include "sigs/tgvae.hpp"

namespace sigs {

// Variables present plus the family label when given.
std::set<std::string> tag(const std::string& expr_text, const std::string& family = "");

// Tags of every library entry, computed once.
class TagCache {
 public:
  explicit TagCache(const AtomLibrary& lib);
  const std::set<std::string>& operator[](std::size_t i) const { return tags_.at(i); }
  std::size_t size() const { return tags_.size(); }

 private:
  std::vector<std::set<std::string>> tags_;
};

// A placeholder of the ansatz: an atom whose variable set equals `vars`,
// optionally restricted to one family.
struct Slot {
  std::string name;
  std::uint8_t vars = 0;
  std::string family;

  bool accepts(const std::set<std::string>& tags) const;
};

struct ComponentLibrary {
  Slot slot;
  std::vector<int> members;  // indices into the atom library
  std::vector<std::string> texts;
  Eigen::MatrixXd latents;  // latent x members, encoder means

  int size() const { return static_cast<int>(members.size()); }
};

ComponentLibrary filter_component_library(const AtomLibrary& lib, const Slot& slot, const ModelParams& p,
                                          const TagCache* cache = nullptr);

struct KMeansResult {
  std::vector<int> assign;
  Eigen::MatrixXd centroids;  // dim x k
  int iterations = 0;
};

// Lloyd iterations from a k-means++ seeding; points are columns.
KMeansResult kmeans(const Eigen::MatrixXd& pts, int k, std::uint64_t seed, int max_iter = 100);

// Template text with slots written as name(vars) or name(vars:family).
// sumN(body) expands to a_1*body_1 + ... + a_N*body_N, renaming the slots of
// copy j to name<j>; the a_j become amplitude parameters.
class Ansatz {
 public:
  static Ansatz parse(const std::string& text);

  const std::string& source() const { return source_; }
  const std::vector<Slot>& slots() const { return slots_; }
  int amplitudes() const { return amplitudes_; }

  // Components substituted into the skeleton; amplitudes stay Param slots
  // 0..amplitudes()-1.
  ParamTemplate bind(const std::vector<Expr>& components, const std::vector<double>& amps) const;
  Expr instantiate(const std::vector<Expr>& components, const std::vector<double>& amps) const;

 private:
  std::string source_;
  std::vector<Slot> slots_;
  int amplitudes_ = 0;
  Expr skeleton_;
};

// Canonical text of the assembly with unit amplitudes. Throws InvalidAnsatz
// when the result fails validation on `domain` (the length limit of the
// grammar does not apply to assembled expressions).
std::string assemble(const Ansatz& a, const std::vector<std::string>& components, const Grammar& g,
                     const Box& domain);
std::string assemble(const Ansatz& a, const std::vector<std::string>& components, const Grammar& g);

Box problem_box(const PDEProblem& p);

struct Scored {
  double residual = std::numeric_limits<double>::infinity();
  std::vector<double> amplitudes;
};

// Residual of the assembly with amplitudes fitted by Gauss-Newton (one step
// is exact when the operator is linear).
Scored score_components(const Ansatz& a, const std::vector<Expr>& components, const PDEProblem& prob,
                        int gn_iters = 4);

struct RefineConfig {
  int starts = 8;
  double eta = 0.05;
  double eps_tol = 1e-4;  // on sqrt(R)
  int adam_steps = 100;
  double lr = 1e-3;
  double lr_decay = 0.99;  // per step
  int lm_iters = 200;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct RefineResult {
  ParamTemplate tmpl;
  std::vector<double> p;
  Expr expr;
  double residual = std::numeric_limits<double>::infinity();
  std::vector<double> start_residuals;  // +inf for discarded starts
  int starts_ok = 0;
  double hull_penalty = 0.0;
};

// R(p) and, when grad is given, dR/dp.
double stage2_objective(const ParamTemplate& tmpl, std::span<const double> p, const PDEProblem& prob,
                        std::vector<double>* grad = nullptr);

RefineResult stage2_refine(const Expr& w, const PDEProblem& prob, const RefineConfig& cfg);

struct SearchConfig {
  int clusters = 8;      // K per slot
  int subclusters = 4;   // H per focused cluster
  int draws = 64;        // M per stage
  int max_iters = 50;    // T_max
  double eps_struct = 1e-10;
  int min_subcluster = 5;
  double jitter = 0.05;
  int focus = 2;         // clusters per slot kept in focus during Stage I
  double explore = 0.1;  // chance of drawing from an unfocused cluster
  bool member_fallback = true;
  int gn_iters = 4;
  int workers = 1;
  std::uint64_t seed = 0;
  RefineConfig refine;
};

SearchConfig search_config_from_json(const std::string& json_text);
std::string to_json(const SearchConfig& cfg);

struct Incumbent {
  std::vector<int> clusters;  // k*
  std::vector<std::string> components;
  Eigen::MatrixXd latents;    // latent x slots, z*
  std::vector<double> amplitudes;
  double residual = std::numeric_limits<double>::infinity();  // r*

  bool valid() const { return !components.empty(); }
};

struct TraceRow {
  std::string stage;
  int iter = 0;
  int evaluated = 0;
  int finite = 0;
  double best = 0;
};

// Clustered component libraries plus everything Stage 0 and I need.
struct ClusterState {
  const Ansatz* ansatz = nullptr;
  const PDEProblem* problem = nullptr;
  const ModelParams* model = nullptr;
  const Grammar* grammar = nullptr;
  std::vector<ComponentLibrary> libs;
  std::vector<KMeansResult> clusters;
  std::vector<std::vector<double>> cluster_best;  // per slot, per cluster
  Incumbent best;
  std::vector<TraceRow> trace;
  int evaluated = 0;
  int decode_mismatch = 0;
};

ClusterState prepare_clusters(const AtomLibrary& lib, const Ansatz& a, const PDEProblem& prob,
                              const ModelParams& model, const Grammar& g, const SearchConfig& cfg);

void stage0(ClusterState& st, const SearchConfig& cfg);
void stage1(ClusterState& st, const SearchConfig& cfg);

struct SearchResult {
  Incumbent stage0, stage1;
  RefineResult refined;
  std::string expression;  // canonical, refined constants
  double residual = 0;
  std::vector<TraceRow> trace;
  int evaluated = 0;
  int decode_mismatch = 0;
  double seconds_stage0 = 0, seconds_stage1 = 0, seconds_stage2 = 0;
};

SearchResult run_search(const AtomLibrary& lib, const Ansatz& a, const PDEProblem& prob, const ModelParams& model,
                        const Grammar& g, const SearchConfig& cfg);

// Accepts z iff its smallest Mahalanobis distance to the training means is at
// least tau. Sigma defaults to the covariance of the means.
class MahalanobisFilter {
 public:
  MahalanobisFilter(const Eigen::MatrixXd& means, double tau = 0.8,
                    const std::optional<Eigen::MatrixXd>& sigma = std::nullopt);
  double min_distance(const Eigen::VectorXd& z) const;
  bool accept(const Eigen::VectorXd& z) const { return min_distance(z) >= tau_; }

 private:
  Eigen::MatrixXd means_;
  Eigen::MatrixXd whitened_;  // L^{-1} means
  Eigen::MatrixXd L_;
  double tau_;
};

bool mahalanobis_filter(const Eigen::VectorXd& z, const Eigen::MatrixXd& means, const Eigen::MatrixXd& sigma,
                        double tau = 0.8);

Eigen::MatrixXd training_means(const ModelParams& p, const std::vector<RuleSequence>& data,
                               const std::vector<int>& idx);

struct RaceConfig {
  int k = 1000;
  int splits = 10;
  int pool = 15000;  // admissible latents in total
  double tau = 0.8;
  std::uint64_t seed = 0;
  Box domain{kVarX | kVarY | kVarT, {0, 0, 0}, {1, 1, 1}};
};

struct RaceResult {
  std::vector<int> attempts_a, attempts_b;
  std::vector<double> reduction;  // 100 * (b - a) / b per split
  int sampled = 0;                // raw latents drawn to fill the pool
};

double mean(const std::vector<double>& v);
double stddev(const std::vector<double>& v);

// Attempts until k decodes pass validation, per split and model. A decoder is
// any map from a latent to a rule sequence result.
using LatentDecoder = std::function<DecodeResult(const Eigen::VectorXd&)>;
RaceResult race_to_k_valid(const LatentDecoder& a, const LatentDecoder& b, const Grammar& g,
                           const std::vector<const MahalanobisFilter*>& filters, int latent_dim,
                           const RaceConfig& cfg);

struct AblationResult {
  int samples = 0;
  int admissible = 0;
  int atom_samples = 0;
  int atom_admissible = 0;
  double best_residual = std::numeric_limits<double>::infinity();
  std::string best_expression;
  double rate() const { return samples ? static_cast<double>(admissible) / samples : 0.0; }
  double atom_rate() const { return atom_samples ? static_cast<double>(atom_admissible) / atom_samples : 0.0; }
};

// One sample is one uniformly derived expression per slot; it is admissible
// when every component validates on the problem domain with exactly the slot's
// variables. The same check is applied to tuples drawn from the component
// libraries when libs is given.
AblationResult atoms_vs_primitives_ablation(const Grammar& g, const Ansatz& a, const PDEProblem& prob,
                                            int n_samples, std::uint64_t seed,
                                            const std::vector<ComponentLibrary>* libs = nullptr,
                                            int atom_samples = 1000, int score_limit = 200);

}  // namespace sigs
