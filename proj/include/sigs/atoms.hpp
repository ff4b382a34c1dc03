#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "sigs/expr.hpp"
#include "sigs/grammar.hpp"

namespace sigs {

// Axis-aligned box over the variables in `vars`.
struct Box {
  std::uint8_t vars = 0;
  std::array<double, 3> lo{0, 0, 0};
  std::array<double, 3> hi{1, 1, 1};

  bool has(Var v) const { return vars & (1u << static_cast<int>(v)); }
  double length(Var v) const { return hi[static_cast<int>(v)] - lo[static_cast<int>(v)]; }
};

enum class BoundaryKind { Dirichlet, Neumann, Periodic, None };
BoundaryKind boundary_from_string(const std::string& s);

struct Eigenpair {
  std::string text;
  double mu = 0.0;
  std::string mu_text;       // exact symbolic eigenvalue, e.g. "9*pi^2/1.397^2"
  std::string sqrt_mu_text;  // exact symbolic square root, e.g. "3*pi/1.397"
};

// Eigenfunction of -Laplacian on the spatial axes of `box`. k has one entry
// per spatial axis present (x first, then y). For periodic boxes phase picks
// cos (0) or sin (1) per axis.
Eigenpair gen_laplacian_eigenfunction(const Box& box, BoundaryKind bc, const std::vector<int>& k,
                                      const std::vector<int>& phase = {});

enum class TimeFamily { Heat, UndampedWave, DampedWave, Biharmonic, ReactionDiffusion, Fractional };
TimeFamily time_family_from_string(const std::string& s);

// params: kappa (heat, biharmonic, reaction_diffusion, fractional), c (waves),
// gamma (damped wave), rho (reaction_diffusion), s (fractional), branch
// (0/1 selects cos/sin or the slow/fast root).
std::string gen_time_factor(TimeFamily family, const Eigenpair& mode, const std::map<std::string, double>& params);

enum class MotifKind { Shock, Transport, HeatKernel, GaussianBump, OutgoingWave };
MotifKind motif_from_string(const std::string& s);

// Parameters outside the documented ranges raise InvalidParameter when strict,
// otherwise they are accepted and reported through `warning`.
std::string gen_motif(MotifKind kind, const std::map<std::string, double>& params, bool strict = false,
                      std::string* warning = nullptr);

double sample_amplitude(double sigma, double decay_rate, int j, std::mt19937_64& rng);

enum class ProblemClass { Ode, Spatial, Spatiotemporal1d, Spatiotemporal2d, Temporal, Any };
ProblemClass problem_class_from_string(const std::string& s);

enum class Rejection {
  None,
  NotInLanguage,
  TooLong,
  MissingVariable,
  LogDomain,
  SqrtDomain,
  DenominatorNearZero,
  NumericTranscendental,
  PowerTooHigh,
  ConstantRange,
  LiteralPrecision,
  NonFinite,
};
std::string to_string(Rejection r);

struct Validation {
  Rejection reason = Rejection::None;
  std::string detail;
  bool ok() const { return reason == Rejection::None; }
};

struct ValidateOptions {
  int samples_per_axis = 33;
  int max_decimals = 6;
  double denominator_floor = 1e-6;
};

Validation validate(const std::string& expr_text, ProblemClass cls, const Box& domain, const Grammar& g,
                    const ValidateOptions& opt = {});

// Dirichlet multiplies by prod sin(pi*(x_d - lo_d)/L_d). Neumann returns the
// input when it has no sine factor in a spatial variable and rejects it
// otherwise.
std::string apply_boundary_envelope(const std::string& expr_text, const Box& domain, BoundaryKind bc);

// Random grammar expansion: binary 0.6, unary 0.3, terminal 0.1, forced
// terminals at max_depth.
Expr random_cfg_expression(std::mt19937_64& rng, std::uint8_t vars, int max_depth = 8);

// Rounds every literal in the tree to `decimals` places.
Expr round_literals(const Expr& e, int decimals);

struct AtomEntry {
  std::string text;  // canonical
  std::string family;
  std::set<std::string> tags;
  std::uint8_t vars = 0;
  RuleSequence seq;
};

class AtomLibrary {
 public:
  // Returns false when the canonical form is already present.
  bool insert(AtomEntry entry);
  bool contains(const std::string& canonical) const { return index_.count(canonical) > 0; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<AtomEntry>& entries() const { return entries_; }
  const AtomEntry& operator[](std::size_t i) const { return entries_[i]; }

  void sort();
  std::string serialize() const;
  static AtomLibrary deserialize(const std::string& text, const Grammar& g);
  static AtomLibrary load(const std::string& path, const Grammar& g);
  void save(const std::string& path) const;

 private:
  std::vector<AtomEntry> entries_;
  std::set<std::string> index_;
};

struct LibraryStats {
  std::map<std::string, int> generated;
  std::map<std::string, int> rejected;
  std::map<std::string, int> duplicates;
};

// JSON config: {"seed", "retry_budget", "families": [...]}. See README for the
// per-family fields.
AtomLibrary build_library(const std::string& config_json, const Grammar& g, LibraryStats* stats = nullptr);

}  // namespace sigs
