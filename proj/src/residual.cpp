#include "sigs/residual.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "sigs/error.hpp"
#include "sigs/util.hpp"

namespace sigs {

namespace {

constexpr const char* kAxis = "xyt";

std::vector<double> axis(const PDEProblem& p, int v) {
  if (!(p.vars & (1u << v))) return {};
  return linspace(p.lo[v], p.hi[v], p.resolution[v]);
}

// Spatial boundary nodes of the tensor grid, repeated for every time level.
PointSet boundary_points(const PDEProblem& p) {
  PointSet out;
  auto xs = axis(p, 0);
  auto ys = axis(p, 1);
  auto ts = axis(p, 2);
  if (xs.empty() && ys.empty()) return out;
  std::size_t nt = std::max<std::size_t>(ts.size(), 1);
  std::size_t nx = std::max<std::size_t>(xs.size(), 1);
  std::size_t ny = std::max<std::size_t>(ys.size(), 1);
  for (std::size_t k = 0; k < nt; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        bool edge = (!xs.empty() && (i == 0 || i + 1 == nx)) || (!ys.empty() && (j == 0 || j + 1 == ny));
        if (!edge) continue;
        if (!xs.empty()) out.coord[0].push_back(xs[i]);
        if (!ys.empty()) out.coord[1].push_back(ys[j]);
        if (!ts.empty()) out.coord[2].push_back(ts[k]);
        ++out.size;
      }
  return out;
}

std::vector<double> eval_values(const Expr& e, const PointSet& pts, const char* what) {
  auto r = eval_grid(e, pts);
  if (r.any_flagged()) throw Error(ErrorCode::InvalidProblem, std::string(what) + " is not finite on its grid");
  return std::move(r.values[0]);
}

double mean_square_diff(std::span<const double> a, std::span<const double> b) {
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - (b.empty() ? 0.0 : b[i]);
    s += d * d;
  }
  return s / a.size();
}

struct Compiled {
  Program prog;
  bool with_dt = false;
};

// Outputs: 0 = S[u], 1 = u, 2 = u_t (when an initial velocity is prescribed).
Compiled compile_residual(const PDEProblem& p, const Expr& u) {
  Compiled c;
  std::vector<Expr> outs{apply_operator(p, u), u};
  c.with_dt = !p.disc->v0.empty();
  if (c.with_dt) outs.push_back(differentiate(u, Var::T));
  c.prog = Program::compile(outs);
  return c;
}

void require_finalized(const PDEProblem& p) {
  if (!p.disc) throw Error(ErrorCode::InvalidProblem, "problem '" + p.name + "' is not finalized");
}

}  // namespace

int PDEProblem::time_order() const {
  int o = 0;
  for (const auto& term : op) o = std::max(o, term.order[2]);
  return o;
}

PDEProblem finalize(PDEProblem p) {
  if (p.vars == 0 || p.vars > 7) throw Error(ErrorCode::InvalidProblem, "problem has no variables");
  if (p.op.empty()) throw Error(ErrorCode::InvalidProblem, "empty operator");
  for (int v = 0; v < 3; ++v) {
    if (!(p.vars & (1u << v))) continue;
    if (!(p.lo[v] < p.hi[v]))
      throw Error(ErrorCode::InvalidProblem, fmt::format("empty interval for {}", kAxis[v]));
    if (p.resolution[v] < 2)
      throw Error(ErrorCode::InvalidProblem, fmt::format("resolution for {} must be at least 2", kAxis[v]));
  }
  for (const auto& term : p.op) {
    if (!term.coef) throw Error(ErrorCode::InvalidProblem, "operator term without coefficient");
    for (int v = 0; v < 3; ++v)
      if (term.order[v] < 0 || (term.order[v] > 0 && !(p.vars & (1u << v))))
        throw Error(ErrorCode::InvalidProblem, fmt::format("operator differentiates in absent variable {}", kAxis[v]));
    if ((variables(term.coef) & ~p.vars) != 0)
      throw Error(ErrorCode::InvalidProblem, "coefficient uses a variable outside the problem");
  }
  bool spatial = p.vars & (kVarX | kVarY);
  if (p.time_dependent()) {
    if (!p.ic) p.ic = p.u_true;
    if (!p.ic) throw Error(ErrorCode::InvalidProblem, "time-dependent problem without initial condition");
    if (!p.ic_dt && p.time_order() >= 2 && p.u_true) p.ic_dt = differentiate(p.u_true, Var::T);
  }
  if (spatial) {
    if (!p.bc) p.bc = p.u_true;
    if (!p.bc) throw Error(ErrorCode::InvalidProblem, "problem without boundary values");
  }

  auto d = std::make_shared<Discretization>();
  auto xs = axis(p, 0);
  auto ys = axis(p, 1);
  auto ts = axis(p, 2);
  d->interior = make_grid(xs, ys, ts);
  if (p.forcing) d->forcing = eval_values(p.forcing, d->interior, "forcing");
  if (p.time_dependent()) {
    d->ic = make_grid(xs, ys, {p.lo[2]});
    d->u0 = eval_values(p.ic, d->ic, "initial condition");
    if (p.ic_dt) d->v0 = eval_values(p.ic_dt, d->ic, "initial velocity");
  }
  if (spatial) {
    d->bc = boundary_points(p);
    d->g = eval_values(p.bc, d->bc, "boundary values");
  }
  p.disc = std::move(d);
  return p;
}

PDEProblem with_resolution(const PDEProblem& p, std::array<int, 3> resolution) {
  PDEProblem q = p;
  q.resolution = resolution;
  q.disc.reset();
  return finalize(std::move(q));
}

Expr apply_operator(const PDEProblem& p, const Expr& u) {
  using namespace simplify;
  std::map<std::array<int, 3>, Expr> cache;
  auto deriv = [&](const std::array<int, 3>& order) {
    if (auto it = cache.find(order); it != cache.end()) return it->second;
    Expr d = u;
    for (int v = 0; v < 3; ++v)
      if (order[v] > 0) d = differentiate(d, static_cast<Var>(v), order[v]);
    cache.emplace(order, d);
    return d;
  };
  Expr total = make_const(0.0);
  for (const auto& term : p.op) {
    Expr piece = deriv(term.order);
    for (int k = 0; k < term.u_power; ++k) piece = mul(u, piece);
    total = add(total, mul(term.coef, piece));
  }
  return total;
}

ResidualParts residual_parts(const Expr& u, const PDEProblem& p) {
  require_finalized(p);
  const Discretization& d = *p.disc;
  Compiled c = compile_residual(p, u);
  ResidualParts out;

  auto in = c.prog.run(d.interior);
  out.flagged = in.any_flagged();
  out.pde = mean_square_diff(in.values[0], d.forcing);
  if (!d.u0.empty()) {
    auto r = c.prog.run(d.ic);
    out.flagged = out.flagged || r.any_flagged();
    out.ic = mean_square_diff(r.values[1], d.u0);
    if (c.with_dt) out.ic += mean_square_diff(r.values[2], d.v0);
  }
  if (!d.g.empty()) {
    auto r = c.prog.run(d.bc);
    out.flagged = out.flagged || r.any_flagged();
    out.bc = mean_square_diff(r.values[1], d.g);
  }
  out.total = out.pde + p.beta1 * out.ic + p.beta2 * out.bc;
  if (out.flagged || !std::isfinite(out.total)) {
    out.flagged = true;
    out.total = std::numeric_limits<double>::infinity();
  }
  return out;
}

double residual(const Expr& u, const PDEProblem& p) { return residual_parts(u, p).total; }

ResidualSystem residual_system(const ParamTemplate& tmpl, std::span<const double> p, const PDEProblem& prob,
                               bool with_jacobian) {
  require_finalized(prob);
  const Discretization& d = *prob.disc;
  if (static_cast<int>(p.size()) != tmpl.size())
    throw Error(ErrorCode::DimensionMismatch, "parameter vector does not match template");
  Compiled c = compile_residual(prob, tmpl.tree);
  const int P = tmpl.size();
  std::span<const double> used = p.first(c.prog.num_params());

  struct Block {
    const PointSet* pts;
    int output;
    const std::vector<double>* target;
    double weight;
  };
  std::vector<Block> blocks;
  blocks.push_back({&d.interior, 0, &d.forcing, 1.0 / d.interior.size});
  if (!d.u0.empty()) {
    blocks.push_back({&d.ic, 1, &d.u0, prob.beta1 / d.ic.size});
    if (c.with_dt) blocks.push_back({&d.ic, 2, &d.v0, prob.beta1 / d.ic.size});
  }
  if (!d.g.empty()) blocks.push_back({&d.bc, 1, &d.g, prob.beta2 / d.bc.size});

  std::size_t rows = 0;
  for (const auto& b : blocks) rows += b.pts->size;
  ResidualSystem sys;
  sys.r.resize(static_cast<Eigen::Index>(rows));
  if (with_jacobian) sys.J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), P);

  std::size_t row = 0;
  const PointSet* last = nullptr;
  EvalResult res;
  for (const auto& b : blocks) {
    if (b.pts != last) {
      res = c.prog.run(*b.pts, used, with_jacobian);
      last = b.pts;
      if (res.any_flagged()) {
        sys.flagged = true;
        sys.r.resize(0);
        sys.J.resize(0, 0);
        return sys;
      }
    }
    double w = std::sqrt(b.weight);
    const auto& vals = res.values[b.output];
    for (std::size_t i = 0; i < b.pts->size; ++i) {
      double target = b.target->empty() ? 0.0 : (*b.target)[i];
      sys.r[static_cast<Eigen::Index>(row + i)] = w * (vals[i] - target);
    }
    if (with_jacobian)
      for (int q = 0; q < c.prog.num_params(); ++q) {
        const auto& g = res.grads[b.output][q];
        for (std::size_t i = 0; i < b.pts->size; ++i) sys.J(static_cast<Eigen::Index>(row + i), q) = w * g[i];
      }
    row += b.pts->size;
  }
  if (!sys.r.allFinite()) {
    sys.flagged = true;
    sys.r.resize(0);
    sys.J.resize(0, 0);
  }
  return sys;
}

// ---------------------------------------------------------------------------

ReferenceGrid load_reference_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::InvalidProblem, path + ": empty reference file");
  std::vector<int> cols;
  int value_col = -1;
  {
    std::stringstream hs(line);
    std::string name;
    int i = 0;
    while (std::getline(hs, name, ',')) {
      while (!name.empty() && std::isspace(static_cast<unsigned char>(name.back()))) name.pop_back();
      while (!name.empty() && std::isspace(static_cast<unsigned char>(name.front()))) name.erase(name.begin());
      if (name == "value") {
        value_col = i;
        cols.push_back(-1);
      } else if (name == "x" || name == "y" || name == "t") {
        cols.push_back(static_cast<int>(std::string_view(kAxis).find(name[0])));
      } else {
        throw Error(ErrorCode::InvalidProblem, path + ": unknown column '" + name + "'");
      }
      ++i;
    }
  }
  if (value_col < 0) throw Error(ErrorCode::InvalidProblem, path + ": missing value column");
  ReferenceGrid ref;
  ref.source = path;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::stringstream ls(line);
    std::string cell;
    std::size_t i = 0;
    while (std::getline(ls, cell, ',')) {
      if (i >= cols.size()) throw Error(ErrorCode::ShapeMismatch, fmt::format("{}:{}: too many fields", path, lineno));
      char* end = nullptr;
      double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || !std::isfinite(v))
        throw Error(ErrorCode::InvalidProblem, fmt::format("{}:{}: bad number '{}'", path, lineno, cell));
      if (cols[i] < 0)
        ref.values.push_back(v);
      else
        ref.points.coord[cols[i]].push_back(v);
      ++i;
    }
    if (i != cols.size()) throw Error(ErrorCode::ShapeMismatch, fmt::format("{}:{}: too few fields", path, lineno));
    ++ref.points.size;
  }
  return ref;
}

void save_reference_csv(const std::string& path, const PointSet& pts, const std::vector<double>& values,
                        const std::string& header) {
  if (values.size() != pts.size) throw Error(ErrorCode::ShapeMismatch, "values do not match points");
  std::vector<int> cols;
  std::stringstream hs(header);
  std::string name;
  while (std::getline(hs, name, ',')) {
    if (name == "value")
      cols.push_back(-1);
    else
      cols.push_back(static_cast<int>(std::string_view(kAxis).find(name[0])));
  }
  std::string out = header + "\n";
  for (std::size_t i = 0; i < pts.size; ++i) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (c) out += ',';
      double v = cols[c] < 0 ? values[i] : pts.coord[cols[c]][i];
      out += fmt::format("{:.17g}", v);
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

double relative_l2(const std::vector<double>& u, const std::vector<double>& ref) {
  if (u.size() != ref.size()) throw Error(ErrorCode::ShapeMismatch, "grids differ in size");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    double d = u[i] - ref[i];
    num += d * d;
    den += ref[i] * ref[i];
  }
  if (den == 0.0) throw Error(ErrorCode::ZeroReference, "reference has zero norm");
  return std::sqrt(num / den);
}

double relative_l2(const Expr& u, const ReferenceGrid& ref) {
  auto r = eval_grid(u, ref.points);
  if (r.any_flagged()) return std::numeric_limits<double>::infinity();
  return relative_l2(r.values[0], ref.values);
}

double relative_l2(const Expr& u, const Expr& ref, const PointSet& grid) {
  auto a = eval_grid(u, grid);
  auto b = eval_grid(ref, grid);
  if (b.any_flagged()) throw Error(ErrorCode::InvalidProblem, "reference is not finite on the grid");
  if (a.any_flagged()) return std::numeric_limits<double>::infinity();
  return relative_l2(a.values[0], b.values[0]);
}

double relative_l2(const Expr& u, const PDEProblem& p) {
  require_finalized(p);
  if (!p.u_true) throw Error(ErrorCode::InvalidProblem, "problem '" + p.name + "' has no closed-form solution");
  return relative_l2(u, p.u_true, p.disc->interior);
}

// ---------------------------------------------------------------------------

namespace {

OperatorTerm term(double coef, int ox, int oy, int ot, int u_power = 0) {
  return OperatorTerm{make_const(coef), {ox, oy, ot}, u_power};
}

PDEProblem manufactured(PDEProblem p) {
  p.forcing = apply_operator(p, p.u_true);
  return p;
}

std::string gaussian_sources(const std::vector<std::pair<double, double>>& centers) {
  std::string f;
  for (const auto& [a, b] : centers) {
    if (!f.empty()) f += "+";
    f += fmt::format("exp(-((x-{})^2+(y-{})^2)/0.02)", format_number(a), format_number(b));
  }
  return f;
}

PDEProblem poisson_gauss(const std::string& name, const std::vector<std::pair<double, double>>& centers) {
  PDEProblem p;
  p.name = name;
  p.vars = kVarX | kVarY;
  p.lo = {0, 0, 0};
  p.hi = {1, 1, 0};
  p.resolution = {128, 128, 0};
  p.op = {term(-1.0, 2, 0, 0), term(-1.0, 0, 2, 0)};
  p.forcing = parse_infix(gaussian_sources(centers));
  p.bc = make_const(0.0);
  return p;
}

std::map<std::string, PDEProblem> make_catalog() {
  std::map<std::string, PDEProblem> cat;

  PDEProblem burgers;
  burgers.name = "burgers";
  burgers.vars = kVarX | kVarT;
  burgers.lo = {-5, 0, 0};
  burgers.hi = {5, 0, 2};
  burgers.resolution = {128, 0, 128};
  burgers.op = {term(1.0, 0, 0, 1), term(1.0, 1, 0, 0, 1), term(-0.01, 2, 0, 0)};
  burgers.u_true = parse_infix("0.86+0.6*tanh(25.8*t-30*x+9.9)");
  cat["burgers"] = burgers;

  PDEProblem diffusion;
  diffusion.name = "diffusion";
  diffusion.vars = kVarX | kVarT;
  diffusion.lo = {0, 0, 0};
  diffusion.hi = {1.397, 0, 1};
  diffusion.resolution = {128, 0, 128};
  diffusion.op = {term(1.0, 0, 0, 1), term(-0.697, 2, 0, 0)};
  diffusion.u_true = parse_infix(
      "3.974*(sin(pi*x/1.397)*exp(-0.697*pi^2*t/1.397^2)"
      "-sin(3*pi*x/1.397)*exp(-9*0.697*pi^2*t/1.397^2)"
      "+sin(5*pi*x/1.397)*exp(-25*0.697*pi^2*t/1.397^2))");
  cat["diffusion"] = diffusion;

  // The radial cosine is not an exact free-space solution in 2D, so the
  // forcing is manufactured from it.
  PDEProblem damp;
  damp.name = "damping_wave";
  damp.vars = kVarX | kVarY | kVarT;
  damp.lo = {-8, -8, 0};
  damp.hi = {8, 8, 4};
  damp.resolution = {64, 64, 64};
  damp.op = {term(1.0, 0, 0, 2), term(1.0, 0, 0, 1), term(-0.64, 2, 0, 0), term(-0.64, 0, 2, 0)};
  damp.u_true = parse_infix("exp(-0.45*t)*cos(0.4*t-2.5*sqrt((0.2*x+1)^2+(0.2*y-1)^2))");
  cat["damping_wave"] = manufactured(damp);

  cat["pg2"] = poisson_gauss("pg2", {{0.3, 0.8}, {0.7, 0.2}});
  cat["pg3"] = poisson_gauss("pg3", {{0.3, 0.8}, {0.7, 0.2}, {0.5, 0.2}});
  cat["pg4"] = poisson_gauss("pg4", {{0.3, 0.8}, {0.7, 0.2}, {0.5, 0.2}, {0.4, 0.6}});

  PDEProblem poisson1;
  poisson1.name = "poisson1";
  poisson1.vars = kVarX | kVarY;
  poisson1.lo = {0, 0, 0};
  poisson1.hi = {1, 1, 0};
  poisson1.resolution = {64, 64, 0};
  poisson1.op = {term(1.0, 2, 0, 0), term(1.0, 0, 2, 0)};
  poisson1.u_true = parse_infix("sin(pi*x)*sin(pi*y)");
  cat["poisson1"] = manufactured(poisson1);

  PDEProblem adv;
  adv.name = "advection3";
  adv.vars = kVarX | kVarY | kVarT;
  adv.lo = {0, 0, 0};
  adv.hi = {1, 1, 2};
  adv.resolution = {64, 64, 64};
  adv.op = {term(1.0, 0, 0, 1), term(1.0, 1, 0, 0), term(1.0, 0, 1, 0)};
  adv.u_true = parse_infix("sin(x-t)+sin(y-t)");
  cat["advection3"] = adv;

  PDEProblem wave;
  wave.name = "wave2d";
  wave.vars = kVarX | kVarY | kVarT;
  wave.lo = {-1, -1, 0};
  wave.hi = {1, 1, 1};
  wave.resolution = {8, 8, 8};
  wave.op = {term(1.0, 0, 0, 2), term(-1.0, 2, 0, 0), term(-1.0, 0, 2, 0)};
  wave.u_true = parse_infix("exp(x^2)*sin(y)*exp(-0.5*t)");
  cat["wave2d"] = manufactured(wave);

  for (auto& [name, p] : cat) p = finalize(std::move(p));
  return cat;
}

}  // namespace

const std::map<std::string, PDEProblem>& builtin_problems() {
  static const std::map<std::string, PDEProblem> cat = make_catalog();
  return cat;
}

const PDEProblem& builtin_problem(const std::string& name) {
  const auto& cat = builtin_problems();
  auto it = cat.find(name);
  if (it == cat.end()) throw Error(ErrorCode::InvalidProblem, "unknown problem '" + name + "'");
  return it->second;
}

PDEProblem problem_from_json(const std::string& json_text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidProblem, std::string("problem spec: ") + e.what());
  }
  auto expr = [&](const char* key) -> Expr {
    if (!j.contains(key) || j[key].is_null()) return nullptr;
    if (j[key].is_number()) return make_const(j[key].get<double>());
    return parse_infix(j[key].get<std::string>());
  };
  try {
    PDEProblem p;
    p.name = j.value("name", "custom");
    for (const auto& [var, range] : j.at("domain").items()) {
      auto pos = std::string_view(kAxis).find(var);
      if (var.size() != 1 || pos == std::string_view::npos)
        throw Error(ErrorCode::InvalidProblem, "unknown domain variable '" + var + "'");
      p.vars |= static_cast<std::uint8_t>(1u << pos);
      p.lo[pos] = range.at(0).get<double>();
      p.hi[pos] = range.at(1).get<double>();
      p.resolution[pos] = j.contains("resolution") ? j["resolution"].value(var, 64) : 64;
    }
    for (const auto& t : j.at("operator")) {
      OperatorTerm term;
      const auto& c = t.at("coef");
      term.coef = c.is_number() ? make_const(c.get<double>()) : parse_infix(c.get<std::string>());
      if (t.contains("d"))
        for (const auto& [var, n] : t["d"].items()) {
          auto pos = std::string_view(kAxis).find(var);
          if (var.size() != 1 || pos == std::string_view::npos)
            throw Error(ErrorCode::InvalidProblem, "unknown derivative variable '" + var + "'");
          term.order[pos] = n.get<int>();
        }
      term.u_power = t.value("u_power", 0);
      p.op.push_back(term);
    }
    p.u_true = expr("solution");
    p.ic = expr("ic");
    p.ic_dt = expr("ic_dt");
    p.bc = expr("bc");
    p.beta1 = j.value("beta1", 1.0);
    p.beta2 = j.value("beta2", 1.0);
    if (j.contains("forcing") && j["forcing"].is_string() && j["forcing"] == "manufactured") {
      if (!p.u_true) throw Error(ErrorCode::InvalidProblem, "manufactured forcing needs a solution");
      p.forcing = apply_operator(p, p.u_true);
    } else {
      p.forcing = expr("forcing");
    }
    return finalize(std::move(p));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidProblem, std::string("problem spec: ") + e.what());
  }
}

}  // namespace sigs
