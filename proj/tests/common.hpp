#pragma once

#include <random>
#include <string>

#include "sigs/expr.hpp"
#include "sigs/grammar.hpp"

namespace sigs::testing {

inline const Grammar& reference_grammar() {
  static const Grammar g = Grammar::load_file(std::string(SIGS_DATA_DIR) + "/grammar.txt");
  return g;
}

// Random expression trees over the full node set; used to probe printer and
// canonicalizer properties.
inline Expr random_tree(std::mt19937_64& rng, int depth) {
  std::uniform_int_distribution<int> pick(0, 99);
  int roll = pick(rng);
  if (depth <= 0 || roll < 25) {
    int leaf = pick(rng) % 6;
    if (leaf == 0) return make_pi();
    if (leaf <= 3) return make_var(static_cast<Var>(leaf - 1));
    std::uniform_int_distribution<int> digits(0, 2000);
    double v = digits(rng) / (leaf == 4 ? 1.0 : 1000.0);
    if (pick(rng) < 20) v = -v;
    return make_const(v);
  }
  if (roll < 65) {
    static constexpr Op kBin[] = {Op::Add, Op::Sub, Op::Mul, Op::Div};
    return make_binary(kBin[pick(rng) % 4], random_tree(rng, depth - 1), random_tree(rng, depth - 1));
  }
  if (roll < 75) return make_unary(Op::Neg, random_tree(rng, depth - 1));
  if (roll < 82) return make_powi(random_tree(rng, depth - 1), pick(rng) % 4);
  static constexpr Op kFun[] = {Op::Sin, Op::Cos, Op::Exp, Op::Log, Op::Tanh, Op::Sqrt};
  return make_unary(kFun[pick(rng) % 6], random_tree(rng, depth - 1));
}

}  // namespace sigs::testing
