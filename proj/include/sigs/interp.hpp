#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "sigs/expr.hpp"

namespace sigs {

// Text to tree. Rejects text outside the language and integer powers above 3.
Expr interpret(std::string_view expr_text);

Expr differentiate(const Expr& e, Var v, int order = 1);

// Algebraic shortcuts used when building derivative trees (0 + a, 1 * a, ...).
namespace simplify {
Expr add(Expr a, Expr b);
Expr sub(Expr a, Expr b);
Expr mul(Expr a, Expr b);
Expr div(Expr a, Expr b);
Expr neg(Expr a);
Expr powi(Expr a, int n);
Expr fn(Op op, Expr a);
}  // namespace simplify

struct PointSet {
  std::size_t size = 0;
  std::array<std::vector<double>, 3> coord;  // x, y, t; empty when absent

  const std::vector<double>& operator[](Var v) const { return coord[static_cast<int>(v)]; }
};

enum DomainFlag : std::uint8_t {
  kFlagLog = 1,
  kFlagSqrt = 2,
  kFlagDivision = 4,
  kFlagNonFinite = 8,
};

struct EvalResult {
  std::size_t points = 0;
  int params = 0;
  std::vector<std::vector<double>> values;              // [output][point]
  std::vector<std::vector<std::vector<double>>> grads;  // [output][param][point]
  std::vector<std::uint8_t> flags;                      // [point], OR of DomainFlag

  bool any_flagged() const;
};

// Straight-line program over all requested outputs with common subexpressions
// shared. Param slots are forward-mode dual directions.
class Program {
 public:
  static Program compile(std::span<const Expr> outputs);

  int num_params() const { return num_params_; }
  std::size_t size() const { return code_.size(); }
  // params empty means "use the values stored in the Param nodes".
  EvalResult run(const PointSet& pts, std::span<const double> params = {},
                 bool with_gradients = false) const;

 private:
  struct Instr {
    Op op;
    int a = -1;
    int b = -1;
    int index = 0;
    double value = 0.0;
    bool dual = false;  // depends on a parameter slot
  };
  std::vector<Instr> code_;
  std::vector<int> outputs_;
  std::vector<double> defaults_;
  int num_params_ = 0;
  std::uint8_t vars_ = 0;
};

EvalResult eval_grid(const Expr& e, const PointSet& pts);

struct ParamTemplate {
  Expr tree;               // literals replaced by Param slots, in leftmost order
  std::vector<double> p0;  // literal values
  int size() const { return static_cast<int>(p0.size()); }
};

ParamTemplate extract_constants(const Expr& e);
Expr bind_constants(const ParamTemplate& tmpl, std::span<const double> p);

// Objective over the template's values on pts; it returns J and fills dJ/du.
using GridObjective = std::function<double(std::span<const double> u, std::span<double> dj_du)>;
std::vector<double> grad_constants(const ParamTemplate& tmpl, std::span<const double> p,
                                   const PointSet& pts, const GridObjective& objective);

// Tensor-product grid with x fastest. Missing axes are given as empty vectors.
PointSet make_grid(const std::vector<double>& xs, const std::vector<double>& ys,
                   const std::vector<double>& ts);
std::vector<double> linspace(double a, double b, int n);

}  // namespace sigs
