#pragma once

#include <Eigen/Dense>
#include <array>
#include <limits>
#include <span>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sigs/expr.hpp"
#include "sigs/interp.hpp"

namespace sigs {

// coef * u^u_power * d^order u, with order given per variable (x, y, t).
struct OperatorTerm {
  Expr coef;
  std::array<int, 3> order{0, 0, 0};
  int u_power = 0;
};

// Grid data derived once from a problem: point sets and the target values
// that the residual compares against.
struct Discretization {
  PointSet interior;
  PointSet ic;
  PointSet bc;
  std::vector<double> forcing;  // on interior, empty when zero
  std::vector<double> u0;       // on ic
  std::vector<double> v0;       // u_t on ic, empty unless the operator is second order in t
  std::vector<double> g;        // on bc
};

struct PDEProblem {
  std::string name;
  std::uint8_t vars = 0;  // kVarX | kVarY | kVarT
  std::array<double, 3> lo{0, 0, 0};
  std::array<double, 3> hi{1, 1, 1};
  std::array<int, 3> resolution{0, 0, 0};
  std::vector<OperatorTerm> op;
  Expr forcing;  // null means zero
  Expr ic;       // evaluated at t = lo[t]
  Expr ic_dt;
  Expr bc;       // Dirichlet value on every spatial face
  Expr u_true;   // null when no closed form is known
  double beta1 = 1.0;
  double beta2 = 1.0;
  std::shared_ptr<const Discretization> disc;

  bool has(Var v) const { return vars & (1u << static_cast<int>(v)); }
  bool time_dependent() const { return has(Var::T); }
  int time_order() const;
};

// Validates the record and builds the cached grids. Must be called after the
// fields are filled in and before scoring.
PDEProblem finalize(PDEProblem p);

// Same problem on a different tensor grid.
PDEProblem with_resolution(const PDEProblem& p, std::array<int, 3> resolution);

// S[u] as a tree; the forcing is not included.
Expr apply_operator(const PDEProblem& p, const Expr& u);

struct ResidualParts {
  double pde = 0.0;
  double ic = 0.0;
  double bc = 0.0;
  double total = 0.0;
  bool flagged = false;
};

ResidualParts residual_parts(const Expr& u, const PDEProblem& p);
double residual(const Expr& u, const PDEProblem& p);

// Weighted misfit vector r with residual = |r|^2 and its Jacobian with respect
// to the template's slots. flagged is set (and r, J left empty) when any point
// leaves the domain of an operation.
struct ResidualSystem {
  Eigen::VectorXd r;
  Eigen::MatrixXd J;
  bool flagged = false;
  double value() const { return flagged ? std::numeric_limits<double>::infinity() : r.squaredNorm(); }
};

ResidualSystem residual_system(const ParamTemplate& tmpl, std::span<const double> p, const PDEProblem& prob,
                               bool with_jacobian = true);

struct ReferenceGrid {
  PointSet points;
  std::vector<double> values;
  std::string source;
};

ReferenceGrid load_reference_csv(const std::string& path);
void save_reference_csv(const std::string& path, const PointSet& pts, const std::vector<double>& values,
                        const std::string& header);

double relative_l2(const std::vector<double>& u, const std::vector<double>& ref);
double relative_l2(const Expr& u, const ReferenceGrid& ref);
double relative_l2(const Expr& u, const Expr& ref, const PointSet& grid);
// Against the problem's closed form on its interior grid.
double relative_l2(const Expr& u, const PDEProblem& p);

const std::map<std::string, PDEProblem>& builtin_problems();
const PDEProblem& builtin_problem(const std::string& name);

PDEProblem problem_from_json(const std::string& json_text);

}  // namespace sigs
