#include "sigs/interp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>
#include <tuple>
#include <unordered_map>

#include "sigs/error.hpp"

namespace sigs {

namespace {

void check_powers(const Expr& e) {
  if (!e) return;
  if (e->op == Op::PowInt && std::abs(e->index) > 3)
    throw Error(ErrorCode::PowerTooHigh, "integer power " + std::to_string(e->index) + " exceeds 3");
  check_powers(e->lhs);
  check_powers(e->rhs);
}

bool is_const(const Expr& e, double v) { return e->op == Op::Const && e->value == v; }

}  // namespace

Expr interpret(std::string_view expr_text) {
  Expr e = parse_infix(expr_text);
  check_powers(e);
  return e;
}

namespace simplify {

Expr add(Expr a, Expr b) {
  if (is_const(a, 0.0)) return b;
  if (is_const(b, 0.0)) return a;
  if (a->op == Op::Const && b->op == Op::Const) return make_const(a->value + b->value);
  if (b->op == Op::Neg) return make_binary(Op::Sub, a, b->lhs);
  return make_binary(Op::Add, a, b);
}

Expr sub(Expr a, Expr b) {
  if (is_const(b, 0.0)) return a;
  if (is_const(a, 0.0)) return neg(b);
  if (a->op == Op::Const && b->op == Op::Const) return make_const(a->value - b->value);
  if (b->op == Op::Neg) return make_binary(Op::Add, a, b->lhs);
  return make_binary(Op::Sub, a, b);
}

Expr mul(Expr a, Expr b) {
  if (is_const(a, 0.0) || is_const(b, 0.0)) return make_const(0.0);
  if (is_const(a, 1.0)) return b;
  if (is_const(b, 1.0)) return a;
  if (is_const(a, -1.0)) return neg(b);
  if (is_const(b, -1.0)) return neg(a);
  if (a->op == Op::Const && b->op == Op::Const) return make_const(a->value * b->value);
  return make_binary(Op::Mul, a, b);
}

Expr div(Expr a, Expr b) {
  if (is_const(a, 0.0)) return make_const(0.0);
  if (is_const(b, 1.0)) return a;
  if (a->op == Op::Const && b->op == Op::Const) return make_const(a->value / b->value);
  return make_binary(Op::Div, a, b);
}

Expr neg(Expr a) {
  if (a->op == Op::Const) return make_const(-a->value);
  if (a->op == Op::Neg) return a->lhs;
  return make_unary(Op::Neg, a);
}

Expr powi(Expr a, int n) {
  if (n == 0) return make_const(1.0);
  if (n == 1) return a;
  return make_powi(a, n);
}

Expr fn(Op op, Expr a) { return make_unary(op, a); }

}  // namespace simplify

namespace {

Expr d1(const Expr& e, Var v) {
  using namespace simplify;
  if (!(variables(e) & (1u << static_cast<int>(v)))) return make_const(0.0);
  switch (e->op) {
    case Op::Var:
      return make_const(1.0);
    case Op::Add:
      return add(d1(e->lhs, v), d1(e->rhs, v));
    case Op::Sub:
      return sub(d1(e->lhs, v), d1(e->rhs, v));
    case Op::Mul:
      return add(mul(d1(e->lhs, v), e->rhs), mul(e->lhs, d1(e->rhs, v)));
    case Op::Div: {
      Expr da = d1(e->lhs, v);
      Expr db = d1(e->rhs, v);
      if (is_const(db, 0.0)) return div(da, e->rhs);
      return div(sub(mul(da, e->rhs), mul(e->lhs, db)), powi(e->rhs, 2));
    }
    case Op::Neg:
      return neg(d1(e->lhs, v));
    case Op::PowInt: {
      int n = e->index;
      return mul(mul(make_const(n), powi(e->lhs, n - 1)), d1(e->lhs, v));
    }
    case Op::Sin:
      return mul(fn(Op::Cos, e->lhs), d1(e->lhs, v));
    case Op::Cos:
      return mul(neg(fn(Op::Sin, e->lhs)), d1(e->lhs, v));
    case Op::Exp:
      return mul(e, d1(e->lhs, v));
    case Op::Log:
      return div(d1(e->lhs, v), e->lhs);
    case Op::Tanh:
      return mul(sub(make_const(1.0), powi(e, 2)), d1(e->lhs, v));
    case Op::Sqrt:
      return div(d1(e->lhs, v), mul(make_const(2.0), e));
    default:
      return make_const(0.0);
  }
}

}  // namespace

Expr differentiate(const Expr& e, Var v, int order) {
  Expr out = e;
  for (int i = 0; i < order; ++i) out = d1(out, v);
  return out;
}

bool EvalResult::any_flagged() const {
  return std::any_of(flags.begin(), flags.end(), [](std::uint8_t f) { return f != 0; });
}

// ---------------------------------------------------------------------------

Program Program::compile(std::span<const Expr> outputs) {
  Program prog;
  std::unordered_map<const Node*, int> by_pointer;
  std::map<std::tuple<int, int, int, int, std::uint64_t>, int> by_value;

  auto emit = [&](auto&& self, const Expr& e) -> int {
    if (auto it = by_pointer.find(e.get()); it != by_pointer.end()) return it->second;
    int a = e->lhs ? self(self, e->lhs) : -1;
    int b = e->rhs ? self(self, e->rhs) : -1;
    std::uint64_t bits = 0;
    if (e->op == Op::Const) std::memcpy(&bits, &e->value, sizeof bits);
    auto key = std::make_tuple(static_cast<int>(e->op), a, b, e->index, bits);
    int reg;
    if (auto it = by_value.find(key); it != by_value.end()) {
      reg = it->second;
    } else {
      Instr ins;
      ins.op = e->op;
      ins.a = a;
      ins.b = b;
      ins.index = e->index;
      ins.value = e->value;
      ins.dual = e->op == Op::Param || (a >= 0 && prog.code_[a].dual) || (b >= 0 && prog.code_[b].dual);
      if (e->op == Op::Param) {
        prog.num_params_ = std::max(prog.num_params_, e->index + 1);
        if (static_cast<int>(prog.defaults_.size()) <= e->index) prog.defaults_.resize(e->index + 1, 0.0);
        prog.defaults_[e->index] = e->value;
      }
      if (e->op == Op::Var) prog.vars_ |= static_cast<std::uint8_t>(1u << e->index);
      reg = static_cast<int>(prog.code_.size());
      prog.code_.push_back(ins);
      by_value.emplace(key, reg);
    }
    by_pointer.emplace(e.get(), reg);
    return reg;
  };
  for (const auto& e : outputs) prog.outputs_.push_back(emit(emit, e));
  return prog;
}

EvalResult Program::run(const PointSet& pts, std::span<const double> params, bool with_gradients) const {
  for (int v = 0; v < 3; ++v)
    if ((vars_ & (1u << v)) && pts.coord[v].size() != pts.size)
      throw Error(ErrorCode::DimensionMismatch,
                  std::string("points lack coordinate ") + "xyt"[v]);
  std::vector<double> p(defaults_);
  if (!params.empty()) {
    if (static_cast<int>(params.size()) != num_params_)
      throw Error(ErrorCode::DimensionMismatch, "expected " + std::to_string(num_params_) +
                                                    " parameters, got " + std::to_string(params.size()));
    p.assign(params.begin(), params.end());
  }
  const int P = with_gradients ? num_params_ : 0;
  const std::size_t n = pts.size;
  const std::size_t nout = outputs_.size();

  EvalResult res;
  res.points = n;
  res.params = P;
  res.values.assign(nout, std::vector<double>(n));
  if (P > 0) res.grads.assign(nout, std::vector<std::vector<double>>(P, std::vector<double>(n)));
  res.flags.assign(n, 0);

  constexpr std::size_t B = 128;
  const std::size_t nreg = code_.size();
  std::vector<double> V(nreg * B);
  std::vector<double> D(P > 0 ? nreg * P * B : 0);
  std::vector<double> scale(B);
  std::uint8_t* flags = res.flags.data();

  for (std::size_t s = 0; s < n; s += B) {
    const std::size_t nb = std::min(B, n - s);
    for (std::size_t k = 0; k < nreg; ++k) {
      const Instr& ins = code_[k];
      double* v = &V[k * B];
      const double* va = ins.a >= 0 ? &V[ins.a * B] : nullptr;
      const double* vb = ins.b >= 0 ? &V[ins.b * B] : nullptr;
      bool need_scale = false;
      switch (ins.op) {
        case Op::Const:
          std::fill(v, v + nb, ins.value);
          break;
        case Op::Pi:
          std::fill(v, v + nb, std::numbers::pi);
          break;
        case Op::Var:
          std::copy_n(pts.coord[ins.index].data() + s, nb, v);
          break;
        case Op::Param:
          std::fill(v, v + nb, p[ins.index]);
          break;
        case Op::Add:
          for (std::size_t i = 0; i < nb; ++i) v[i] = va[i] + vb[i];
          break;
        case Op::Sub:
          for (std::size_t i = 0; i < nb; ++i) v[i] = va[i] - vb[i];
          break;
        case Op::Mul:
          for (std::size_t i = 0; i < nb; ++i) v[i] = va[i] * vb[i];
          break;
        case Op::Div:
          for (std::size_t i = 0; i < nb; ++i) {
            if (std::abs(vb[i]) < 1e-12) flags[s + i] |= kFlagDivision;
            v[i] = va[i] / vb[i];
          }
          break;
        case Op::Neg:
          for (std::size_t i = 0; i < nb; ++i) v[i] = -va[i];
          break;
        case Op::PowInt: {
          const int e = ins.index;
          for (std::size_t i = 0; i < nb; ++i) {
            double x = va[i];
            double r = 1.0;
            for (int j = 0; j < std::abs(e); ++j) r *= x;
            v[i] = e >= 0 ? r : 1.0 / r;
            if (P > 0 && ins.dual) {
              double rm = 1.0;
              for (int j = 0; j < std::abs(e) - 1; ++j) rm *= x;
              scale[i] = e >= 0 ? e * rm : -e / (r * x);
            }
          }
          need_scale = true;
          break;
        }
        case Op::Sin:
          for (std::size_t i = 0; i < nb; ++i) v[i] = std::sin(va[i]);
          if (P > 0 && ins.dual)
            for (std::size_t i = 0; i < nb; ++i) scale[i] = std::cos(va[i]);
          need_scale = true;
          break;
        case Op::Cos:
          for (std::size_t i = 0; i < nb; ++i) v[i] = std::cos(va[i]);
          if (P > 0 && ins.dual)
            for (std::size_t i = 0; i < nb; ++i) scale[i] = -std::sin(va[i]);
          need_scale = true;
          break;
        case Op::Exp:
          for (std::size_t i = 0; i < nb; ++i) v[i] = std::exp(va[i]);
          if (P > 0 && ins.dual) std::copy_n(v, nb, scale.data());
          need_scale = true;
          break;
        case Op::Log:
          for (std::size_t i = 0; i < nb; ++i) {
            if (!(va[i] > 0.0)) flags[s + i] |= kFlagLog;
            v[i] = std::log(va[i]);
            scale[i] = 1.0 / va[i];
          }
          need_scale = true;
          break;
        case Op::Tanh:
          for (std::size_t i = 0; i < nb; ++i) {
            v[i] = std::tanh(va[i]);
            scale[i] = 1.0 - v[i] * v[i];
          }
          need_scale = true;
          break;
        case Op::Sqrt:
          for (std::size_t i = 0; i < nb; ++i) {
            if (va[i] < 0.0) flags[s + i] |= kFlagSqrt;
            v[i] = std::sqrt(va[i]);
            scale[i] = 0.5 / v[i];
          }
          need_scale = true;
          break;
      }
      for (std::size_t i = 0; i < nb; ++i)
        if (!std::isfinite(v[i])) flags[s + i] |= kFlagNonFinite;

      if (P == 0 || !ins.dual) continue;
      for (int q = 0; q < P; ++q) {
        double* d = &D[(k * P + q) * B];
        const double* da = ins.a >= 0 && code_[ins.a].dual ? &D[(ins.a * P + q) * B] : nullptr;
        const double* db = ins.b >= 0 && code_[ins.b].dual ? &D[(ins.b * P + q) * B] : nullptr;
        switch (ins.op) {
          case Op::Param:
            std::fill(d, d + nb, ins.index == q ? 1.0 : 0.0);
            break;
          case Op::Add:
            for (std::size_t i = 0; i < nb; ++i) d[i] = (da ? da[i] : 0.0) + (db ? db[i] : 0.0);
            break;
          case Op::Sub:
            for (std::size_t i = 0; i < nb; ++i) d[i] = (da ? da[i] : 0.0) - (db ? db[i] : 0.0);
            break;
          case Op::Mul:
            for (std::size_t i = 0; i < nb; ++i)
              d[i] = (da ? da[i] * vb[i] : 0.0) + (db ? va[i] * db[i] : 0.0);
            break;
          case Op::Div:
            for (std::size_t i = 0; i < nb; ++i)
              d[i] = ((da ? da[i] : 0.0) - (db ? v[i] * db[i] : 0.0)) / vb[i];
            break;
          case Op::Neg:
            for (std::size_t i = 0; i < nb; ++i) d[i] = -da[i];
            break;
          default:
            if (need_scale)
              for (std::size_t i = 0; i < nb; ++i) d[i] = scale[i] * da[i];
            break;
        }
      }
    }
    for (std::size_t o = 0; o < nout; ++o) {
      int r = outputs_[o];
      std::copy_n(&V[r * B], nb, res.values[o].data() + s);
      if (P == 0) continue;
      for (int q = 0; q < P; ++q) {
        auto& g = res.grads[o][q];
        if (code_[r].dual)
          std::copy_n(&D[(r * P + q) * B], nb, g.data() + s);
        else
          std::fill(g.begin() + s, g.begin() + s + nb, 0.0);
      }
    }
  }
  return res;
}

EvalResult eval_grid(const Expr& e, const PointSet& pts) {
  std::vector<Expr> outs{e};
  return Program::compile(outs).run(pts);
}

// ---------------------------------------------------------------------------

namespace {

Expr to_slots(const Expr& e, std::vector<double>& p0) {
  switch (e->op) {
    case Op::Const: {
      int slot = static_cast<int>(p0.size());
      p0.push_back(e->value);
      return make_param(slot, e->value);
    }
    case Op::Pi:
    case Op::Var:
    case Op::Param:
      return e;
    default:
      break;
  }
  Expr a = to_slots(e->lhs, p0);
  if (e->op == Op::PowInt) return make_powi(a, e->index);
  if (!e->rhs) return make_unary(e->op, a);
  Expr b = to_slots(e->rhs, p0);
  return make_binary(e->op, a, b);
}

Expr fill_slots(const Expr& e, std::span<const double> p) {
  switch (e->op) {
    case Op::Param:
      return make_const(p[e->index]);
    case Op::Const:
    case Op::Pi:
    case Op::Var:
      return e;
    default:
      break;
  }
  Expr a = fill_slots(e->lhs, p);
  if (e->op == Op::PowInt) return make_powi(a, e->index);
  if (!e->rhs) return make_unary(e->op, a);
  return make_binary(e->op, a, fill_slots(e->rhs, p));
}

}  // namespace

ParamTemplate extract_constants(const Expr& e) {
  ParamTemplate t;
  t.tree = to_slots(e, t.p0);
  return t;
}

Expr bind_constants(const ParamTemplate& tmpl, std::span<const double> p) {
  if (p.size() != tmpl.p0.size())
    throw Error(ErrorCode::DimensionMismatch, "template has " + std::to_string(tmpl.p0.size()) +
                                                  " slots, got " + std::to_string(p.size()));
  return fill_slots(tmpl.tree, p);
}

std::vector<double> grad_constants(const ParamTemplate& tmpl, std::span<const double> p,
                                   const PointSet& pts, const GridObjective& objective) {
  std::vector<Expr> outs{tmpl.tree};
  Program prog = Program::compile(outs);
  std::vector<double> full(tmpl.size(), 0.0);
  if (prog.num_params() == 0) return full;
  // Slots that do not survive into the program have zero gradient.
  std::vector<double> used(p.begin(), p.begin() + prog.num_params());
  EvalResult r = prog.run(pts, used, true);
  std::vector<double> dj(pts.size, 0.0);
  objective(r.values[0], dj);
  for (std::size_t i = 0; i < pts.size; ++i) {
    if (r.flags[i]) continue;
    for (int q = 0; q < prog.num_params(); ++q) full[q] += dj[i] * r.grads[0][q][i];
  }
  return full;
}

PointSet make_grid(const std::vector<double>& xs, const std::vector<double>& ys,
                   const std::vector<double>& ts) {
  PointSet pts;
  std::size_t nx = std::max<std::size_t>(xs.size(), 1);
  std::size_t ny = std::max<std::size_t>(ys.size(), 1);
  std::size_t nt = std::max<std::size_t>(ts.size(), 1);
  pts.size = nx * ny * nt;
  if (!xs.empty()) pts.coord[0].reserve(pts.size);
  if (!ys.empty()) pts.coord[1].reserve(pts.size);
  if (!ts.empty()) pts.coord[2].reserve(pts.size);
  for (std::size_t k = 0; k < nt; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        if (!xs.empty()) pts.coord[0].push_back(xs[i]);
        if (!ys.empty()) pts.coord[1].push_back(ys[j]);
        if (!ts.empty()) pts.coord[2].push_back(ts[k]);
      }
  return pts;
}

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = a;
    return out;
  }
  for (int i = 0; i < n; ++i) out[i] = a + (b - a) * i / (n - 1);
  out[n - 1] = b;
  return out;
}

}  // namespace sigs
