#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace sigs {

enum class Op : std::uint8_t {
  Const,
  Pi,
  Var,
  Param,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  PowInt,
  Sin,
  Cos,
  Exp,
  Log,
  Tanh,
  Sqrt,
};

enum class Var : std::uint8_t { X = 0, Y = 1, T = 2 };

inline constexpr std::uint8_t kVarX = 1;
inline constexpr std::uint8_t kVarY = 2;
inline constexpr std::uint8_t kVarT = 4;

struct Node;
using Expr = std::shared_ptr<const Node>;

// Immutable expression node. `index` is the variable id for Var, the exponent
// for PowInt and the slot number for Param.
struct Node {
  Op op = Op::Const;
  double value = 0.0;
  int index = 0;
  Expr lhs;
  Expr rhs;
};

int arity(Op op);
bool is_function(Op op);
std::string_view function_name(Op op);

Expr make_const(double v);
Expr make_pi();
Expr make_var(Var v);
Expr make_param(int slot, double value = 0.0);
Expr make_unary(Op op, Expr a);
Expr make_binary(Op op, Expr a, Expr b);
Expr make_powi(Expr base, int n);

// Variable bitmask (kVarX | kVarY | kVarT).
std::uint8_t variables(const Expr& e);
bool has_params(const Expr& e);
bool equal(const Expr& a, const Expr& b);
std::size_t node_count(const Expr& e);

// Infix reader with conventional precedence. Juxtaposed numbers multiply and
// "e-k" suffixes scale by 10^-k. Fractional and negative numeric exponents are
// rewritten to sqrt and reciprocal forms while reading.
Expr parse_infix(std::string_view text);

// Printer whose output stays inside the reference grammar's language.
std::string to_text(const Expr& e);
std::string format_number(double v);

// Folding rules used by text canonicalization: numeric products collapse,
// negated literals fold and sign pairs cancel. Powers and quotients of
// literals are kept so symbolic eigenvalues survive.
Expr canonical_tree(const Expr& e);

struct Lexeme {
  enum Kind { Number, Sci, Ident, Symbol, End } kind = End;
  std::string text;
  double value = 0.0;
  std::size_t pos = 0;
};

std::vector<Lexeme> lex(std::string_view text);

}  // namespace sigs
