#include "sigs/atoms.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <json.hpp>
#include <numbers>
#include <sstream>

#include "sigs/error.hpp"
#include "sigs/interp.hpp"
#include "sigs/util.hpp"

namespace sigs {

namespace {

double round_to(double v, int decimals) {
  double s = std::pow(10.0, decimals);
  double r = std::round(v * s) / s;
  return r == 0.0 ? 0.0 : r;  // no negative zero in printed literals
}

// Literal for splicing into expression text; negatives are parenthesized so
// the surrounding operator stays unambiguous.
std::string lit(double v) {
  std::string s = format_number(v);
  return v < 0 ? "(" + s + ")" : s;
}

std::string canonical_text(const std::string& text, int decimals) {
  return to_text(round_literals(canonical_tree(parse_infix(text)), decimals));
}

std::string axis_term(const Box& box, int v) {
  const char* name = v == 0 ? "x" : v == 1 ? "y" : "t";
  double lo = box.lo[v];
  if (lo == 0.0) return name;
  if (lo < 0) return fmt::format("({}+{})", name, format_number(-lo));
  return fmt::format("({}-{})", name, format_number(lo));
}

double need(const std::map<std::string, double>& params, const char* key) {
  auto it = params.find(key);
  if (it == params.end()) throw Error(ErrorCode::MissingParameter, std::string("missing parameter '") + key + "'");
  return it->second;
}

double get_or(const std::map<std::string, double>& params, const char* key, double fallback) {
  auto it = params.find(key);
  return it == params.end() ? fallback : it->second;
}

}  // namespace

Expr round_literals(const Expr& e, int decimals) {
  if (!e) return e;
  if (e->op == Op::Const) {
    double r = round_to(e->value, decimals);
    return r == e->value ? e : make_const(r);
  }
  if (arity(e->op) == 0) return e;
  Expr a = round_literals(e->lhs, decimals);
  if (e->op == Op::PowInt) return a == e->lhs ? e : make_powi(a, e->index);
  if (!e->rhs) return a == e->lhs ? e : make_unary(e->op, a);
  Expr b = round_literals(e->rhs, decimals);
  return (a == e->lhs && b == e->rhs) ? e : make_binary(e->op, a, b);
}

BoundaryKind boundary_from_string(const std::string& s) {
  if (s == "dirichlet") return BoundaryKind::Dirichlet;
  if (s == "neumann") return BoundaryKind::Neumann;
  if (s == "periodic") return BoundaryKind::Periodic;
  if (s == "none") return BoundaryKind::None;
  throw Error(ErrorCode::InvalidParameter, "unknown boundary kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Eigenfunctions and time factors

Eigenpair gen_laplacian_eigenfunction(const Box& box, BoundaryKind bc, const std::vector<int>& k,
                                      const std::vector<int>& phase) {
  if (bc == BoundaryKind::None) throw Error(ErrorCode::UnsupportedGeometry, "eigenfunctions need a boundary condition");
  std::vector<int> axes;
  for (int v = 0; v < 2; ++v)
    if (box.vars & (1u << v)) axes.push_back(v);
  if (axes.empty()) throw Error(ErrorCode::UnsupportedGeometry, "box has no spatial axis");
  if (k.size() != axes.size())
    throw Error(ErrorCode::DimensionMismatch, fmt::format("expected {} mode indices, got {}", axes.size(), k.size()));

  const bool periodic = bc == BoundaryKind::Periodic;
  std::vector<std::string> factors;
  std::vector<std::string> mu_terms;  // k^2/L^2 pieces
  std::vector<std::string> root_terms;
  Eigenpair out;
  double sum = 0.0;
  for (std::size_t i = 0; i < axes.size(); ++i) {
    int v = axes[i];
    int kd = k[i];
    double L = box.hi[v] - box.lo[v];
    if (!(L > 0)) throw Error(ErrorCode::UnsupportedGeometry, "degenerate box");
    if (kd < 0) throw Error(ErrorCode::InvalidParameter, "negative mode index");
    if (bc == BoundaryKind::Dirichlet && kd == 0)
      throw Error(ErrorCode::InvalidParameter, "mode index 0 has no Dirichlet eigenfunction");
    int freq = periodic ? 2 * kd : kd;  // multiple of pi in the argument
    sum += static_cast<double>(freq) * freq / (L * L);
    if (kd == 0) continue;
    std::string arg = (freq == 1 ? std::string("pi") : fmt::format("{}*pi", freq)) + "*" + axis_term(box, v);
    if (L != 1.0) arg += "/" + lit(L);
    bool use_sin = bc == BoundaryKind::Dirichlet || (periodic && i < phase.size() && phase[i] == 1);
    factors.push_back(fmt::format("{}({})", use_sin ? "sin" : "cos", arg));
    std::string sq = L == 1.0 ? fmt::format("{}", freq * freq) : fmt::format("{}/{}^2", freq * freq, lit(L));
    mu_terms.push_back(sq);
  }
  out.mu = std::numbers::pi * std::numbers::pi * sum;
  if (factors.empty()) {
    out.text = "1";
  } else {
    out.text = factors[0];
    for (std::size_t i = 1; i < factors.size(); ++i) out.text += "*" + factors[i];
  }
  if (mu_terms.empty()) {
    out.mu_text = "0";
    out.sqrt_mu_text = "0";
  } else if (mu_terms.size() == 1) {
    out.mu_text = mu_terms[0].rfind("1/", 0) == 0 ? "pi^2" + mu_terms[0].substr(1) : "pi^2*" + mu_terms[0];
    if (out.mu_text == "pi^2*1") out.mu_text = "pi^2";
    // single axis: sqrt(mu) = freq*pi/L exactly
    int v = -1;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < axes.size(); ++i)
      if (k[i] != 0) {
        v = axes[i];
        idx = i;
      }
    int freq = periodic ? 2 * k[idx] : k[idx];
    double L = box.hi[v] - box.lo[v];
    out.sqrt_mu_text = fmt::format("{}*pi", freq) + (L == 1.0 ? "" : "/" + lit(L));
  } else {
    std::string inner = mu_terms[0];
    for (std::size_t i = 1; i < mu_terms.size(); ++i) inner += "+" + mu_terms[i];
    out.mu_text = "pi^2*(" + inner + ")";
    out.sqrt_mu_text = "pi*sqrt(" + inner + ")";
  }
  out.text = canonical_text(out.text, 6);
  return out;
}

TimeFamily time_family_from_string(const std::string& s) {
  if (s == "heat") return TimeFamily::Heat;
  if (s == "undamped_wave" || s == "wave") return TimeFamily::UndampedWave;
  if (s == "damped_wave") return TimeFamily::DampedWave;
  if (s == "biharmonic") return TimeFamily::Biharmonic;
  if (s == "reaction_diffusion") return TimeFamily::ReactionDiffusion;
  if (s == "fractional") return TimeFamily::Fractional;
  throw Error(ErrorCode::InvalidParameter, "unknown time-factor family '" + s + "'");
}

std::string gen_time_factor(TimeFamily family, const Eigenpair& mode, const std::map<std::string, double>& params) {
  if (mode.mu < 0) throw Error(ErrorCode::InvalidParameter, "negative eigenvalue");
  const std::string mu = "(" + mode.mu_text + ")";
  const std::string root = "(" + mode.sqrt_mu_text + ")";
  const int branch = static_cast<int>(get_or(params, "branch", 0));
  std::string text;
  switch (family) {
    case TimeFamily::Heat: {
      double kappa = need(params, "kappa");
      if (mode.mu == 0.0) return "1";
      text = fmt::format("exp(-{}*{}*t)", lit(kappa), mu);
      break;
    }
    case TimeFamily::UndampedWave: {
      double c = need(params, "c");
      if (mode.mu == 0.0) return branch == 0 ? "1" : "t";
      text = fmt::format("{}({}*{}*t)", branch == 0 ? "cos" : "sin", lit(c), root);
      break;
    }
    case TimeFamily::DampedWave: {
      double c = need(params, "c");
      double gamma = need(params, "gamma");
      double disc = c * c * mode.mu - gamma * gamma;
      std::string c2mu = fmt::format("{}*{}", lit(c * c), mu);
      std::string decay = fmt::format("exp(-{}*t)", lit(gamma));
      if (std::abs(disc) <= 1e-12 * std::max(1.0, gamma * gamma)) {
        text = branch == 0 ? decay : "t*" + decay;
      } else if (disc > 0) {
        text = fmt::format("{}*{}(sqrt({}-{})*t)", decay, branch == 0 ? "cos" : "sin", c2mu, lit(gamma * gamma));
      } else {
        text = fmt::format("exp(-({}{}sqrt({}-{}))*t)", lit(gamma), branch == 0 ? "-" : "+", lit(gamma * gamma), c2mu);
      }
      break;
    }
    case TimeFamily::Biharmonic: {
      double kappa = need(params, "kappa");
      if (mode.mu == 0.0) return "1";
      text = fmt::format("exp(-{}*{}^2*t)", lit(kappa), mu);
      break;
    }
    case TimeFamily::ReactionDiffusion: {
      double kappa = need(params, "kappa");
      double rho = need(params, "rho");
      text = fmt::format("exp(-({}*{}-{})*t)", lit(kappa), mu, lit(rho));
      break;
    }
    case TimeFamily::Fractional: {
      double kappa = need(params, "kappa");
      double s = need(params, "s");
      if (!(s > 0 && s <= 1)) throw Error(ErrorCode::InvalidParameter, "fractional order must lie in (0, 1]");
      if (mode.mu == 0.0) return "1";
      // mu^s has no exact form in the grammar; the rate is a rounded literal.
      double rate = round_to(kappa * std::pow(mode.mu, s), 6);
      text = fmt::format("exp(-{}*t)", lit(rate));
      break;
    }
  }
  return canonical_text(text, 6);
}

// ---------------------------------------------------------------------------
// Motifs

MotifKind motif_from_string(const std::string& s) {
  if (s == "shock") return MotifKind::Shock;
  if (s == "transport") return MotifKind::Transport;
  if (s == "heat_kernel") return MotifKind::HeatKernel;
  if (s == "gaussian_bump") return MotifKind::GaussianBump;
  if (s == "outgoing_damped_wave" || s == "outgoing_wave") return MotifKind::OutgoingWave;
  throw Error(ErrorCode::InvalidParameter, "unknown motif '" + s + "'");
}

namespace {

struct RangeCheck {
  bool strict;
  std::string* warning;
  void operator()(const char* name, double v, double lo, double hi) const {
    if (v >= lo && v <= hi) return;
    std::string msg = fmt::format("{}={} outside [{}, {}]", name, v, lo, hi);
    if (strict) throw Error(ErrorCode::InvalidParameter, msg);
    if (warning) *warning += (warning->empty() ? "" : "; ") + msg;
  }
};

std::string shifted_square(const char* var, double center) {
  if (center == 0.0) return fmt::format("{}^2", var);
  if (center < 0) return fmt::format("({}+{})^2", var, format_number(-center));
  return fmt::format("({}-{})^2", var, format_number(center));
}

}  // namespace

std::string gen_motif(MotifKind kind, const std::map<std::string, double>& params, bool strict,
                      std::string* warning) {
  RangeCheck check{strict, warning};
  std::string text;
  switch (kind) {
    case MotifKind::Shock: {
      double ul = need(params, "uL"), ur = need(params, "uR");
      double x0 = need(params, "x0"), nu = need(params, "nu");
      // Rankine-Hugoniot speed unless given explicitly
      double s = get_or(params, "s", 0.5 * (ul + ur));
      check("uL", ul, 1, 3);
      check("uR", ur, -1, 1);
      check("s", s, 0.1, 2);
      check("x0", x0, -1, 1);
      check("nu", nu, 0.01, 1);
      if (!(nu > 0)) throw Error(ErrorCode::InvalidParameter, "viscosity must be positive");
      double avg = round_to(0.5 * (ul + ur), 3);
      double half = round_to(0.5 * (ul - ur), 3);
      double k = round_to((ul - ur) / (4 * nu), 3);
      // Viscous profile with the left state on the left: avg - half*tanh(...)
      text = fmt::format("{}-{}*tanh({}*(x-{}-{}*t))", lit(avg), lit(half), lit(k), lit(round_to(x0, 3)),
                         lit(round_to(s, 3)));
      return canonical_text(text, 3);
    }
    case MotifKind::Transport: {
      double k = need(params, "k"), omega = need(params, "omega");
      int g = static_cast<int>(get_or(params, "g", 0));
      const char* fn = g == 0 ? "sin" : g == 1 ? "cos" : "tanh";
      text = fmt::format("{}({}*x-{}*t)", fn, lit(round_to(k, 3)), lit(round_to(omega, 3)));
      return canonical_text(text, 3);
    }
    case MotifKind::HeatKernel: {
      double kappa = need(params, "kappa");
      double x0 = get_or(params, "x0", 0.0);
      double t0 = get_or(params, "t0", 1.0);  // shift keeps t=0 regular
      check("kappa", kappa, 0.01, 1);
      double four_k = round_to(4 * kappa, 3);
      std::string tt = t0 == 0.0 ? "t" : fmt::format("(t+{})", lit(round_to(t0, 3)));
      text = fmt::format("exp(-{}/({}*{}))/sqrt({}*pi*{})", shifted_square("x", round_to(x0, 3)), lit(four_k), tt,
                         lit(four_k), tt);
      return canonical_text(text, 3);
    }
    case MotifKind::GaussianBump: {
      double alpha = need(params, "alpha");
      double x0 = round_to(get_or(params, "x0", 0.0), 3);
      int dim = static_cast<int>(get_or(params, "dim", 2));
      std::string r2 = shifted_square("x", x0);
      if (dim >= 2) r2 += "+" + shifted_square("y", round_to(get_or(params, "y0", 0.0), 3));
      alpha = round_to(alpha, 3);
      if (!(alpha > 0)) throw Error(ErrorCode::InvalidParameter, "alpha must be positive");
      text = alpha == 1.0 ? fmt::format("exp(-({}))", r2) : fmt::format("exp(-{}*({}))", lit(alpha), r2);
      return canonical_text(text, 3);
    }
    case MotifKind::OutgoingWave: {
      double k = need(params, "k"), c = need(params, "c"), a = need(params, "a");
      double x0 = get_or(params, "x0", 0.0), y0 = get_or(params, "y0", 0.0);
      bool envelope = get_or(params, "envelope", 1.0) != 0.0;
      check("k", k, 0.5, 4);
      check("c", c, 0.1, 1);
      check("a", a, 0.02, 0.8);
      check("x0", x0, -6, 6);
      check("y0", y0, -6, 6);
      std::string r2 = shifted_square("x", round_to(x0, 3)) + "+" + shifted_square("y", round_to(y0, 3));
      text = fmt::format("cos({}*sqrt({})-{}*t)*exp(-{}*t)", lit(round_to(k, 3)), r2, lit(round_to(c, 3)),
                         lit(round_to(a, 3)));
      if (envelope) {
        double h = need(params, "h"), w = need(params, "w");
        check("h", h, 0.01, 0.5);
        check("w", w, 0.3, 1);
        text = fmt::format("{}/(exp(({})/({}*(1+t)))+1)*{}", lit(round_to(h, 3)), r2, lit(round_to(w, 3)), text);
      }
      return canonical_text(text, 3);
    }
  }
  return text;
}

double sample_amplitude(double sigma, double decay_rate, int j, std::mt19937_64& rng) {
  if (sigma == 0.0) return 0.0;
  std::normal_distribution<double> n(0.0, sigma * std::exp(-0.5 * decay_rate * j));
  return n(rng);
}

// ---------------------------------------------------------------------------
// Validation

ProblemClass problem_class_from_string(const std::string& s) {
  if (s == "ode") return ProblemClass::Ode;
  if (s == "spatial") return ProblemClass::Spatial;
  if (s == "spatiotemporal_1d") return ProblemClass::Spatiotemporal1d;
  if (s == "spatiotemporal_2d") return ProblemClass::Spatiotemporal2d;
  if (s == "temporal") return ProblemClass::Temporal;
  if (s == "any") return ProblemClass::Any;
  throw Error(ErrorCode::InvalidParameter, "unknown problem class '" + s + "'");
}

std::string to_string(Rejection r) {
  switch (r) {
    case Rejection::None: return "Valid";
    case Rejection::NotInLanguage: return "NotInLanguage";
    case Rejection::TooLong: return "TooLong";
    case Rejection::MissingVariable: return "MissingVariable";
    case Rejection::LogDomain: return "LogDomain";
    case Rejection::SqrtDomain: return "SqrtDomain";
    case Rejection::DenominatorNearZero: return "DenominatorNearZero";
    case Rejection::NumericTranscendental: return "NumericTranscendental";
    case Rejection::PowerTooHigh: return "PowerTooHigh";
    case Rejection::ConstantRange: return "ConstantRange";
    case Rejection::LiteralPrecision: return "LiteralPrecision";
    case Rejection::NonFinite: return "NonFinite";
  }
  return "Unknown";
}

namespace {

struct Guards {
  std::vector<Expr> logs, roots, dens;
};

Validation scan_tree(const Expr& e, const ValidateOptions& opt, Guards& guards) {
  if (!e) return {};
  switch (e->op) {
    case Op::Const: {
      double a = std::abs(e->value);
      if (a != 0.0 && (a < 1e-7 || a > 9.99e6))
        return {Rejection::ConstantRange, format_number(e->value)};
      double r = round_to(e->value, opt.max_decimals);
      if (std::abs(r - e->value) > 1e-9 * std::max(1.0, a))
        return {Rejection::LiteralPrecision, format_number(e->value)};
      return {};
    }
    case Op::PowInt:
      if (std::abs(e->index) > 3) return {Rejection::PowerTooHigh, fmt::format("power {}", e->index)};
      break;
    case Op::Div:
      guards.dens.push_back(e->rhs);
      break;
    case Op::Log:
      guards.logs.push_back(e->lhs);
      break;
    case Op::Sqrt:
      guards.roots.push_back(e->lhs);
      break;
    default:
      break;
  }
  if (is_function(e->op) && e->op != Op::Sqrt && variables(e->lhs) == 0)
    return {Rejection::NumericTranscendental, std::string(function_name(e->op)) + " of a constant"};
  if (auto v = scan_tree(e->lhs, opt, guards); !v.ok()) return v;
  return scan_tree(e->rhs, opt, guards);
}

std::uint8_t required_vars(ProblemClass cls) {
  switch (cls) {
    case ProblemClass::Ode: return kVarX;
    case ProblemClass::Spatial: return kVarX | kVarY;
    case ProblemClass::Spatiotemporal1d: return kVarX | kVarT;
    case ProblemClass::Spatiotemporal2d: return kVarX | kVarY | kVarT;
    case ProblemClass::Temporal: return kVarT;
    case ProblemClass::Any: return 0;
  }
  return 0;
}

}  // namespace

Validation validate(const std::string& expr_text, ProblemClass cls, const Box& domain, const Grammar& g,
                    const ValidateOptions& opt) {
  Expr e;
  try {
    e = parse_infix(expr_text);
  } catch (const Error& err) {
    return {Rejection::NotInLanguage, err.what()};
  }
  Guards guards;
  if (auto v = scan_tree(e, opt, guards); !v.ok()) return v;

  std::uint8_t have = variables(e);
  std::uint8_t need_vars = required_vars(cls);
  if ((have & need_vars) != need_vars) return {Rejection::MissingVariable, "required variables absent"};
  if ((have & ~domain.vars) != 0) return {Rejection::MissingVariable, "variable outside the domain"};

  try {
    parse(expr_text, g, true);
  } catch (const Error& err) {
    if (err.code() == ErrorCode::TooLong) return {Rejection::TooLong, err.what()};
    return {Rejection::NotInLanguage, err.what()};
  }

  // Sample the closed domain. Three-axis boxes use a coarser lattice.
  int axes = std::popcount(static_cast<unsigned>(domain.vars));
  int n = axes >= 3 ? std::min(opt.samples_per_axis, 17) : opt.samples_per_axis;
  std::array<std::vector<double>, 3> ax;
  for (int v = 0; v < 3; ++v)
    if (domain.vars & (1u << v)) ax[v] = linspace(domain.lo[v], domain.hi[v], n);
  PointSet pts = make_grid(ax[0], ax[1], ax[2]);

  std::vector<Expr> outs{e};
  outs.insert(outs.end(), guards.logs.begin(), guards.logs.end());
  outs.insert(outs.end(), guards.roots.begin(), guards.roots.end());
  outs.insert(outs.end(), guards.dens.begin(), guards.dens.end());
  auto r = Program::compile(outs).run(pts);
  std::size_t o = 1;
  for (std::size_t i = 0; i < guards.logs.size(); ++i, ++o)
    for (double v : r.values[o])
      if (!(v > 0)) return {Rejection::LogDomain, "log argument not positive"};
  for (std::size_t i = 0; i < guards.roots.size(); ++i, ++o)
    for (double v : r.values[o])
      if (v < 0) return {Rejection::SqrtDomain, "sqrt argument negative"};
  for (std::size_t i = 0; i < guards.dens.size(); ++i, ++o)
    for (double v : r.values[o])
      if (!(std::abs(v) >= opt.denominator_floor)) return {Rejection::DenominatorNearZero, "denominator near zero"};
  for (double v : r.values[0])
    if (!std::isfinite(v)) return {Rejection::NonFinite, "non-finite value"};
  return {};
}

// ---------------------------------------------------------------------------

std::string apply_boundary_envelope(const std::string& expr_text, const Box& domain, BoundaryKind bc) {
  std::vector<int> axes;
  for (int v = 0; v < 2; ++v)
    if (domain.vars & (1u << v)) axes.push_back(v);
  if (axes.empty()) throw Error(ErrorCode::UnsupportedGeometry, "no spatial axis for an envelope");
  Expr e = parse_infix(expr_text);
  if (bc == BoundaryKind::Dirichlet) {
    std::string env;
    for (int v : axes) {
      double L = domain.hi[v] - domain.lo[v];
      std::string arg = "pi*" + axis_term(domain, v) + (L == 1.0 ? "" : "/" + lit(L));
      env += (env.empty() ? "" : "*") + fmt::format("sin({})", arg);
    }
    Expr wrapped = make_binary(Op::Mul, parse_infix(env), e);
    return to_text(canonical_tree(wrapped));
  }
  if (bc == BoundaryKind::Neumann) {
    // cosine modes already have zero normal derivative; a sine in a spatial
    // variable cannot be made compatible by an envelope
    std::vector<Expr> stack{e};
    while (!stack.empty()) {
      Expr n = stack.back();
      stack.pop_back();
      if (!n) continue;
      if (n->op == Op::Sin && (variables(n->lhs) & (kVarX | kVarY)))
        throw Error(ErrorCode::UnsupportedGeometry, "sine factor is incompatible with Neumann conditions");
      stack.push_back(n->lhs);
      stack.push_back(n->rhs);
    }
    return to_text(canonical_tree(e));
  }
  throw Error(ErrorCode::UnsupportedGeometry, "envelopes exist for Dirichlet and Neumann boxes only");
}

Expr random_cfg_expression(std::mt19937_64& rng, std::uint8_t vars, int max_depth) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Var> pool;
  for (int v = 0; v < 3; ++v)
    if (vars & (1u << v)) pool.push_back(static_cast<Var>(v));
  auto terminal = [&]() -> Expr {
    double r = u(rng);
    if (!pool.empty() && r < 0.7) return make_var(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
    if (r < 0.8) return make_pi();
    return make_const(std::uniform_int_distribution<int>(1, 9)(rng));
  };
  auto node = [&](auto&& self, int depth) -> Expr {
    double r = u(rng);
    if (depth >= max_depth || r >= 0.9) return terminal();
    if (r < 0.6) {
      static constexpr Op kBin[] = {Op::Add, Op::Sub, Op::Mul, Op::Div};
      Op op = kBin[std::uniform_int_distribution<int>(0, 3)(rng)];
      Expr a = self(self, depth + 1);
      return make_binary(op, a, self(self, depth + 1));
    }
    static constexpr Op kUn[] = {Op::Sin, Op::Cos, Op::Exp, Op::Log, Op::Tanh, Op::Sqrt, Op::PowInt, Op::Neg};
    Op op = kUn[std::uniform_int_distribution<int>(0, 7)(rng)];
    Expr a = self(self, depth + 1);
    if (op == Op::PowInt) return make_powi(a, 2);
    return make_unary(op, a);
  };
  return node(node, 0);
}

// ---------------------------------------------------------------------------
// Library

bool AtomLibrary::insert(AtomEntry entry) {
  if (!index_.insert(entry.text).second) return false;
  entries_.push_back(std::move(entry));
  return true;
}

void AtomLibrary::sort() {
  std::sort(entries_.begin(), entries_.end(), [](const AtomEntry& a, const AtomEntry& b) { return a.text < b.text; });
}

std::string AtomLibrary::serialize() const {
  std::vector<const AtomEntry*> order;
  for (const auto& e : entries_) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->text < b->text; });
  std::string out;
  for (const auto* e : order) {
    std::string tags;
    for (const auto& t : e->tags) tags += (tags.empty() ? "" : ",") + t;
    out += e->text + "\t" + e->family + "\t" + tags + "\n";
  }
  return out;
}

AtomLibrary AtomLibrary::deserialize(const std::string& text, const Grammar& g) {
  AtomLibrary lib;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, '\t')) fields.push_back(f);
    if (fields.size() < 2) throw Error(ErrorCode::Io, fmt::format("library line {}: expected tab-separated fields", lineno));
    AtomEntry e;
    e.text = fields[0];
    e.family = fields[1];
    if (fields.size() > 2) {
      std::stringstream ts(fields[2]);
      std::string t;
      while (std::getline(ts, t, ','))
        if (!t.empty()) e.tags.insert(t);
    }
    e.vars = variables(parse_infix(e.text));
    e.seq = parse(e.text, g);
    lib.insert(std::move(e));
  }
  return lib;
}

AtomLibrary AtomLibrary::load(const std::string& path, const Grammar& g) { return deserialize(read_file(path), g); }

void AtomLibrary::save(const std::string& path) const { write_file_atomic(path, serialize()); }

namespace {

using nlohmann::json;

// Parameter spec: number (fixed), [lo, hi] (uniform), {"values": [...]}
// (enumerated or drawn), {"int": [lo, hi]} (uniform integer).
struct ParamSpec {
  enum Kind { Fixed, Range, Values, IntRange } kind = Fixed;
  double a = 0, b = 0;
  std::vector<double> values;
};

ParamSpec param_spec(const json& j) {
  ParamSpec p;
  if (j.is_number()) {
    p.kind = ParamSpec::Fixed;
    p.a = j.get<double>();
  } else if (j.is_array() && j.size() == 2) {
    p.kind = ParamSpec::Range;
    p.a = j[0].get<double>();
    p.b = j[1].get<double>();
  } else if (j.is_object() && j.contains("values")) {
    p.kind = ParamSpec::Values;
    p.values = j["values"].get<std::vector<double>>();
    if (p.values.empty()) throw Error(ErrorCode::InvalidConfig, "empty value list");
  } else if (j.is_object() && j.contains("int")) {
    p.kind = ParamSpec::IntRange;
    p.a = j["int"].at(0).get<double>();
    p.b = j["int"].at(1).get<double>();
  } else {
    throw Error(ErrorCode::InvalidConfig, "bad parameter spec " + j.dump());
  }
  return p;
}

double draw(const ParamSpec& p, std::mt19937_64& rng, int decimals) {
  switch (p.kind) {
    case ParamSpec::Fixed: return p.a;
    case ParamSpec::Range: return round_to(std::uniform_real_distribution<double>(p.a, p.b)(rng), decimals);
    case ParamSpec::Values:
      return p.values[std::uniform_int_distribution<std::size_t>(0, p.values.size() - 1)(rng)];
    case ParamSpec::IntRange:
      return std::uniform_int_distribution<int>(static_cast<int>(p.a), static_cast<int>(p.b))(rng);
  }
  return p.a;
}

// All combinations of enumerable parameters in key order.
std::vector<std::map<std::string, double>> enumerate(const std::map<std::string, ParamSpec>& specs) {
  std::vector<std::map<std::string, double>> out{{}};
  for (const auto& [name, spec] : specs) {
    std::vector<double> vals;
    if (spec.kind == ParamSpec::Fixed)
      vals = {spec.a};
    else if (spec.kind == ParamSpec::Values)
      vals = spec.values;
    else if (spec.kind == ParamSpec::IntRange)
      for (int v = static_cast<int>(spec.a); v <= static_cast<int>(spec.b); ++v) vals.push_back(v);
    else
      throw Error(ErrorCode::InvalidConfig, "parameter '" + name + "' is a range; give a count to sample it");
    std::vector<std::map<std::string, double>> next;
    for (const auto& base : out)
      for (double v : vals) {
        auto m = base;
        m[name] = v;
        next.push_back(std::move(m));
      }
    out = std::move(next);
  }
  return out;
}

Box box_from_json(const json& j, std::uint8_t fallback_vars) {
  Box b;
  if (!j.is_object()) {
    b.vars = fallback_vars;
    return b;
  }
  for (const auto& [var, range] : j.items()) {
    int v = var == "x" ? 0 : var == "y" ? 1 : var == "t" ? 2 : -1;
    if (v < 0) throw Error(ErrorCode::InvalidConfig, "unknown domain variable '" + var + "'");
    b.vars |= static_cast<std::uint8_t>(1u << v);
    b.lo[v] = range.at(0).get<double>();
    b.hi[v] = range.at(1).get<double>();
  }
  return b;
}

std::uint8_t vars_from_string(const std::string& s) {
  std::uint8_t m = 0;
  for (char c : s) {
    if (c == 'x') m |= kVarX;
    else if (c == 'y') m |= kVarY;
    else if (c == 't') m |= kVarT;
    else if (c != ',' && c != ' ') throw Error(ErrorCode::InvalidConfig, std::string("unknown variable '") + c + "'");
  }
  return m;
}

std::vector<int> mode_vector(const std::map<std::string, double>& p, const Box& box) {
  std::vector<int> k;
  if (box.has(Var::X)) k.push_back(static_cast<int>(get_or(p, box.has(Var::Y) ? "kx" : "k", get_or(p, "kx", 1))));
  if (box.has(Var::Y)) k.push_back(static_cast<int>(get_or(p, "ky", 1)));
  return k;
}

struct FamilyContext {
  std::string family;
  json cfg;
  Box domain;
  ProblemClass cls = ProblemClass::Any;
  std::set<std::string> extra_tags;
  int decimals = 3;
};

// One atom from concrete parameter values. Returns raw (uncanonicalized) text.
std::string generate_one(const FamilyContext& fc, const std::map<std::string, double>& p, std::mt19937_64& rng) {
  const std::string& f = fc.family;
  Box spatial = fc.domain;
  spatial.vars &= kVarX | kVarY;
  if (f == "laplacian_eigen") {
    auto bc = boundary_from_string(fc.cfg.value("bc", "dirichlet"));
    std::vector<int> phase;
    if (bc == BoundaryKind::Periodic) phase = {static_cast<int>(get_or(p, "phase", 0)), static_cast<int>(get_or(p, "phase_y", 0))};
    return gen_laplacian_eigenfunction(spatial, bc, mode_vector(p, spatial), phase).text;
  }
  if (f == "time_factor") {
    auto bc = boundary_from_string(fc.cfg.value("bc", "dirichlet"));
    Box modes = box_from_json(fc.cfg.value("mode_domain", json()), kVarX);
    modes.vars &= kVarX | kVarY;
    auto pair = gen_laplacian_eigenfunction(modes, bc, mode_vector(p, modes));
    return gen_time_factor(time_family_from_string(fc.cfg.value("kind", "heat")), pair, p);
  }
  if (f == "separable") {
    auto bc = boundary_from_string(fc.cfg.value("bc", "dirichlet"));
    auto pair = gen_laplacian_eigenfunction(spatial, bc, mode_vector(p, spatial));
    std::string tf = gen_time_factor(time_family_from_string(fc.cfg.value("kind", "heat")), pair, p);
    return "(" + pair.text + ")*(" + tf + ")";
  }
  if (f == "polynomial") {
    int degree = static_cast<int>(get_or(p, "degree", 2));
    std::uniform_real_distribution<double> coef(-2.0, 2.0);
    std::string text;
    std::vector<Var> vs;
    for (int v = 0; v < 3; ++v)
      if (fc.domain.vars & (1u << v)) vs.push_back(static_cast<Var>(v));
    int terms = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int i = 0; i < terms; ++i) {
      double c = round_to(coef(rng), 3);
      if (c == 0.0) c = 1.0;
      std::string mono;
      for (Var v : vs) {
        int d = std::uniform_int_distribution<int>(0, degree)(rng);
        if (d == 0) continue;
        mono += fmt::format("*{}{}", "xyt"[static_cast<int>(v)], d == 1 ? "" : fmt::format("^{}", d));
      }
      if (mono.empty()) mono = fmt::format("*{}", "xyt"[static_cast<int>(vs.at(0))]);
      text += (text.empty() ? "" : "+") + lit(c) + mono;
    }
    return text;
  }
  if (f == "random_cfg") {
    int depth = fc.cfg.value("max_depth", 8);
    return to_text(random_cfg_expression(rng, fc.domain.vars, depth));
  }
  return gen_motif(motif_from_string(f), p, fc.cfg.value("strict", false));
}

ProblemClass default_class(const std::string& family, std::uint8_t vars) {
  if (family == "time_factor") return ProblemClass::Temporal;
  if (family == "shock" || family == "transport" || family == "heat_kernel") return ProblemClass::Spatiotemporal1d;
  if (family == "outgoing_damped_wave" || family == "outgoing_wave") return ProblemClass::Spatiotemporal2d;
  if ((vars & (kVarX | kVarY)) == (kVarX | kVarY)) return ProblemClass::Spatial;
  if (vars & kVarX) return ProblemClass::Ode;
  return ProblemClass::Any;
}

}  // namespace

AtomLibrary build_library(const std::string& config_json, const Grammar& g, LibraryStats* stats) {
  json cfg;
  try {
    cfg = json::parse(config_json);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("library config: ") + e.what());
  }
  LibraryStats local;
  LibraryStats& st = stats ? *stats : local;
  std::mt19937_64 rng(cfg.value("seed", 0ull));
  const int budget = cfg.value("retry_budget", 50);
  AtomLibrary lib;

  try {
    for (const auto& fam : cfg.at("families")) {
      FamilyContext fc;
      fc.family = fam.at("family").get<std::string>();
      static const std::set<std::string> kFamilies{"laplacian_eigen", "time_factor", "separable", "polynomial",
                                                   "random_cfg", "shock", "transport", "heat_kernel",
                                                   "gaussian_bump", "outgoing_damped_wave", "outgoing_wave"};
      if (!kFamilies.count(fc.family)) throw Error(ErrorCode::InvalidConfig, "unknown family '" + fc.family + "'");
      fc.cfg = fam;
      std::uint8_t fallback = fam.contains("vars") ? vars_from_string(fam["vars"].get<std::string>()) : kVarX;
      fc.domain = box_from_json(fam.value("domain", json()), fallback);
      if (fam.contains("vars")) fc.domain.vars = fallback;
      fc.cls = fam.contains("class") ? problem_class_from_string(fam["class"].get<std::string>())
                                     : default_class(fc.family, fc.domain.vars);
      if (fam.contains("tags"))
        for (const auto& t : fam["tags"]) fc.extra_tags.insert(t.get<std::string>());
      Box check_domain = fc.domain;
      if (fc.family == "time_factor") {
        check_domain.vars = kVarT;
        if (!fc.domain.has(Var::T)) check_domain.hi[2] = 1.0;
      }
      std::map<std::string, ParamSpec> specs;
      if (fam.contains("params"))
        for (const auto& [name, spec] : fam["params"].items()) specs[name] = param_spec(spec);
      const int decimals = fam.value("decimals", 3);
      std::string envelope = fam.value("envelope", "");

      auto accept = [&](const std::string& raw) -> bool {
        std::string text;
        try {
          text = to_text(round_literals(canonical_tree(parse_infix(raw)), 6));
          if (!envelope.empty()) text = apply_boundary_envelope(text, fc.domain, boundary_from_string(envelope));
        } catch (const Error&) {
          ++st.rejected[fc.family];
          return false;
        }
        if (lib.contains(text)) {
          ++st.duplicates[fc.family];
          return false;
        }
        auto v = validate(text, fc.cls, check_domain, g);
        if (!v.ok()) {
          ++st.rejected[fc.family];
          return false;
        }
        AtomEntry e;
        e.text = text;
        e.family = fc.family;
        e.vars = variables(parse_infix(text));
        for (int k = 0; k < 3; ++k)
          if (e.vars & (1u << k)) e.tags.insert(std::string(1, "xyt"[k]));
        e.tags.insert(fc.family);
        e.tags.insert(fc.extra_tags.begin(), fc.extra_tags.end());
        e.seq = parse(text, g);
        lib.insert(std::move(e));
        ++st.generated[fc.family];
        return true;
      };

      if (fam.contains("count")) {
        int count = fam["count"].get<int>();
        for (int i = 0; i < count; ++i) {
          int attempts = 0;
          while (true) {
            std::map<std::string, double> p;
            for (const auto& [name, spec] : specs) p[name] = draw(spec, rng, decimals);
            std::string raw;
            try {
              raw = generate_one(fc, p, rng);
            } catch (const Error& e) {
              if (e.code() == ErrorCode::MissingParameter || e.code() == ErrorCode::InvalidConfig) throw;
              raw.clear();
            }
            if (!raw.empty() && accept(raw)) break;
            if (raw.empty()) ++st.rejected[fc.family];
            if (++attempts >= budget)
              throw Error(ErrorCode::RetryBudgetExhausted,
                          fmt::format("family '{}' exhausted {} retries at atom {}", fc.family, budget, i));
          }
        }
      } else {
        for (const auto& p : enumerate(specs)) {
          std::string raw;
          try {
            raw = generate_one(fc, p, rng);
          } catch (const Error& e) {
            if (e.code() == ErrorCode::MissingParameter || e.code() == ErrorCode::InvalidConfig) throw;
            ++st.rejected[fc.family];
            continue;
          }
          accept(raw);
        }
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("library config: ") + e.what());
  }
  lib.sort();
  return lib;
}

}  // namespace sigs
