#include "sigs/search.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "sigs/error.hpp"

namespace sigs {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr int kSlotBase = 1 << 20;
constexpr double kAmpSentinel = 800000000.0;
constexpr double kSlotSentinel = 900000000.0;

// Runs f(i) for i in [0, n) on up to `workers` threads. Results must be written
// by index so the outcome does not depend on scheduling.
template <class F>
void parallel_for(int n, int workers, F&& f) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto body = [&] {
    for (int i; (i = next.fetch_add(1)) < n;) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, n); ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// Same grammar without the derivation length limit, for assembled expressions.
const Grammar& unbounded(const Grammar& g) {
  static std::mutex mu;
  static std::map<std::string, Grammar> cache;
  std::lock_guard lock(mu);
  auto key = g.source_text();
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, Grammar::load(key, 4096)).first;
  return it->second;
}

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_ident(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

bool is_function_name(const std::string& s) {
  return s == "sin" || s == "cos" || s == "exp" || s == "log" || s == "tanh" || s == "sqrt";
}

std::size_t matching_paren(const std::string& s, std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < s.size(); ++i) {
    if (s[i] == '(') ++depth;
    if (s[i] == ')' && --depth == 0) return i;
  }
  throw Error(ErrorCode::InvalidAnsatz, "unbalanced parentheses in ansatz");
}

std::string strip_spaces(const std::string& s) {
  std::string out;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) out += c;
  return out;
}

struct SlotRef {
  std::size_t begin = 0, end = 0;  // [begin, end) of name(args)
  std::string name;
  std::string args;
};

// Identifier calls that are not elementary functions or sums.
std::vector<SlotRef> find_slots(const std::string& s) {
  std::vector<SlotRef> out;
  for (std::size_t i = 0; i < s.size();) {
    if (!is_ident_start(s[i]) || (i > 0 && is_ident(s[i - 1]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && is_ident(s[j])) ++j;
    std::string name = s.substr(i, j - i);
    if (j < s.size() && s[j] == '(' && !is_function_name(name) && name.rfind("sum", 0) != 0) {
      std::size_t close = matching_paren(s, j);
      out.push_back({i, close + 1, name, s.substr(j + 1, close - j - 1)});
      i = close + 1;
    } else {
      i = j;
    }
  }
  return out;
}

Slot parse_slot(const std::string& name, const std::string& args) {
  Slot slot;
  slot.name = name;
  std::string vars = args, family;
  if (auto colon = args.find(':'); colon != std::string::npos) {
    vars = args.substr(0, colon);
    family = args.substr(colon + 1);
    if (family.empty()) throw Error(ErrorCode::InvalidAnsatz, "empty family filter in slot " + name);
  }
  bool expect_var = true;
  for (char c : vars) {
    if (expect_var && (c == 'x' || c == 'y' || c == 't')) {
      std::uint8_t bit = c == 'x' ? kVarX : c == 'y' ? kVarY : kVarT;
      if (slot.vars & bit) throw Error(ErrorCode::InvalidAnsatz, "repeated variable in slot " + name);
      slot.vars |= bit;
      expect_var = false;
    } else if (!expect_var && c == ',') {
      expect_var = true;
    } else {
      throw Error(ErrorCode::InvalidAnsatz, "bad slot arguments '" + args + "' for " + name);
    }
  }
  if (expect_var) throw Error(ErrorCode::InvalidAnsatz, "bad slot arguments '" + args + "' for " + name);
  slot.family = family;
  return slot;
}

Expr substitute(const Expr& e, const std::function<Expr(const Expr&)>& leaf) {
  if (Expr r = leaf(e)) return r;
  if (!e->lhs) return e;
  Expr a = substitute(e->lhs, leaf);
  if (e->op == Op::PowInt) return make_powi(a, e->index);
  if (!e->rhs) return make_unary(e->op, a);
  return make_binary(e->op, a, substitute(e->rhs, leaf));
}

void count_params(const Expr& e, std::map<int, int>& seen) {
  if (e->op == Op::Param) ++seen[e->index];
  if (e->lhs) count_params(e->lhs, seen);
  if (e->rhs) count_params(e->rhs, seen);
}

std::string join_key(const std::vector<std::string>& parts) {
  std::string k;
  for (const auto& p : parts) {
    k += p;
    k += '\x1f';
  }
  return k;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
  std::array<std::uint32_t, 2> out;
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

// ---------------------------------------------------------------------------

std::set<std::string> tag(const std::string& expr_text, const std::string& family) {
  std::set<std::string> out;
  std::uint8_t v = variables(parse_infix(expr_text));
  for (int k = 0; k < 3; ++k)
    if (v & (1u << k)) out.insert(std::string(1, "xyt"[k]));
  if (!family.empty()) out.insert(family);
  return out;
}

TagCache::TagCache(const AtomLibrary& lib) {
  tags_.reserve(lib.size());
  for (const auto& e : lib.entries()) tags_.push_back(tag(e.text, e.family));
}

bool Slot::accepts(const std::set<std::string>& tags) const {
  std::uint8_t have = 0;
  if (tags.count("x")) have |= kVarX;
  if (tags.count("y")) have |= kVarY;
  if (tags.count("t")) have |= kVarT;
  if (have != vars) return false;
  return family.empty() || tags.count(family) > 0;
}

ComponentLibrary filter_component_library(const AtomLibrary& lib, const Slot& slot, const ModelParams& p,
                                          const TagCache* cache) {
  ComponentLibrary out;
  out.slot = slot;
  for (std::size_t i = 0; i < lib.size(); ++i) {
    bool ok = cache ? slot.accepts((*cache)[i]) : slot.accepts(tag(lib[i].text, lib[i].family));
    if (!ok) continue;
    out.members.push_back(static_cast<int>(i));
    out.texts.push_back(lib[i].text);
  }
  if (out.members.empty())
    throw Error(ErrorCode::EmptyComponentLibrary, "no library entry fits slot '" + slot.name + "'");
  out.latents.resize(p.cfg.latent, out.size());
  for (int j = 0; j < out.size(); ++j) out.latents.col(j) = encode(lib[out.members[j]].seq, p).mu;
  return out;
}

KMeansResult kmeans(const Eigen::MatrixXd& pts, int k, std::uint64_t seed, int max_iter) {
  const int n = static_cast<int>(pts.cols());
  if (k < 1 || k > n)
    throw Error(ErrorCode::InvalidCluster, fmt::format("cannot form {} clusters from {} points", k, n));
  std::mt19937_64 rng(seed);
  KMeansResult res;
  res.centroids.resize(pts.rows(), k);

  // k-means++ seeding
  std::vector<double> d2(n, kInf);
  int first = std::uniform_int_distribution<int>(0, n - 1)(rng);
  res.centroids.col(0) = pts.col(first);
  for (int c = 1; c < k; ++c) {
    double total = 0;
    for (int i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (pts.col(i) - res.centroids.col(c - 1)).squaredNorm());
      total += d2[i];
    }
    int pick = 0;
    if (total > 0) {
      double u = std::uniform_real_distribution<double>(0, total)(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2[pick];
        if (u < 0 && d2[pick] > 0) break;
      }
      while (d2[pick] == 0 && pick > 0) --pick;
    } else {
      pick = std::uniform_int_distribution<int>(0, n - 1)(rng);
    }
    res.centroids.col(c) = pts.col(pick);
  }

  res.assign.assign(n, -1);
  for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = kInf;
      for (int c = 0; c < k; ++c) {
        double d = (pts.col(i) - res.centroids.col(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (res.assign[i] != best) {
        res.assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(pts.rows(), k);
    std::vector<int> count(k, 0);
    for (int i = 0; i < n; ++i) {
      sum.col(res.assign[i]) += pts.col(i);
      ++count[res.assign[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (count[c] > 0) {
        res.centroids.col(c) = sum.col(c) / count[c];
        continue;
      }
      // Empty cluster: move it to the point farthest from its centroid.
      int far = 0;
      double fd = -1;
      for (int i = 0; i < n; ++i) {
        double d = (pts.col(i) - res.centroids.col(res.assign[i])).squaredNorm();
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      res.centroids.col(c) = pts.col(far);
      changed = true;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

Ansatz Ansatz::parse(const std::string& text) {
  Ansatz a;
  a.source_ = text;
  std::string s = strip_spaces(text);
  if (s.empty()) throw Error(ErrorCode::InvalidAnsatz, "empty ansatz");

  // Expand sumN(body).
  int amp = 0;
  for (std::size_t i = 0; i < s.size();) {
    bool at_sum = s.compare(i, 3, "sum") == 0 && (i == 0 || !is_ident(s[i - 1]));
    std::size_t j = i + 3;
    while (at_sum && j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    if (!at_sum || j == i + 3 || j >= s.size() || s[j] != '(') {
      ++i;
      continue;
    }
    int n = std::stoi(s.substr(i + 3, j - i - 3));
    if (n < 1) throw Error(ErrorCode::InvalidAnsatz, "sum needs at least one term");
    std::size_t close = matching_paren(s, j);
    std::string body = s.substr(j + 1, close - j - 1);
    if (body.find("sum") != std::string::npos) throw Error(ErrorCode::InvalidAnsatz, "nested sums are not supported");
    auto refs = find_slots(body);
    if (refs.empty()) throw Error(ErrorCode::InvalidAnsatz, "sum body has no slot");
    std::string expanded = "(";
    for (int k = 1; k <= n; ++k) {
      std::string copy;
      std::size_t pos = 0;
      for (const auto& r : refs) {
        copy += body.substr(pos, r.begin - pos);
        copy += r.name + std::to_string(k) + "(" + r.args + ")";
        pos = r.end;
      }
      copy += body.substr(pos);
      if (k > 1) expanded += "+";
      expanded += "@A" + std::to_string(amp++) + "@*(" + copy + ")";
    }
    expanded += ")";
    s = s.substr(0, i) + expanded + s.substr(close + 1);
    i += expanded.size();
  }
  a.amplitudes_ = amp;

  // Slots.
  auto refs = find_slots(s);
  if (refs.empty()) throw Error(ErrorCode::InvalidAnsatz, "ansatz has no slot");
  std::string out;
  std::size_t pos = 0;
  std::set<std::string> names;
  for (const auto& r : refs) {
    Slot slot = parse_slot(r.name, r.args);
    if (!names.insert(slot.name).second)
      throw Error(ErrorCode::InvalidAnsatz, "slot '" + slot.name + "' appears more than once");
    out += s.substr(pos, r.begin - pos);
    out += "(" + format_number(kSlotSentinel + static_cast<double>(a.slots_.size())) + ")";
    a.slots_.push_back(slot);
    pos = r.end;
  }
  out += s.substr(pos);
  for (int k = 0; k < amp; ++k) {
    std::string marker = "@A" + std::to_string(k) + "@";
    auto at = out.find(marker);
    out.replace(at, marker.size(), format_number(kAmpSentinel + k));
  }

  Expr tree;
  try {
    tree = parse_infix(out);
  } catch (const Error& e) {
    throw Error(ErrorCode::InvalidAnsatz, std::string("malformed ansatz: ") + e.what());
  }
  const int nslots = static_cast<int>(a.slots_.size());
  a.skeleton_ = substitute(tree, [&](const Expr& e) -> Expr {
    if (e->op != Op::Const) return nullptr;
    double v = e->value;
    if (v >= kSlotSentinel && v < kSlotSentinel + nslots && v == std::floor(v))
      return make_param(kSlotBase + static_cast<int>(v - kSlotSentinel), 0.0);
    if (v >= kAmpSentinel && v < kAmpSentinel + amp && v == std::floor(v))
      return make_param(static_cast<int>(v - kAmpSentinel), 1.0);
    return nullptr;
  });
  std::map<int, int> seen;
  count_params(a.skeleton_, seen);
  for (int k = 0; k < nslots; ++k)
    if (seen[kSlotBase + k] != 1) throw Error(ErrorCode::InvalidAnsatz, "slot '" + a.slots_[k].name + "' lost");
  for (int k = 0; k < amp; ++k)
    if (seen[k] != 1) throw Error(ErrorCode::InvalidAnsatz, "amplitude lost while reading the ansatz");
  return a;
}

ParamTemplate Ansatz::bind(const std::vector<Expr>& components, const std::vector<double>& amps) const {
  if (components.size() != slots_.size())
    throw Error(ErrorCode::DimensionMismatch,
                fmt::format("ansatz has {} slots, got {} components", slots_.size(), components.size()));
  if (static_cast<int>(amps.size()) != amplitudes_)
    throw Error(ErrorCode::DimensionMismatch, "amplitude count does not match the ansatz");
  for (const auto& c : components)
    if (has_params(c)) throw Error(ErrorCode::InvalidAnsatz, "components must not carry parameter slots");
  ParamTemplate t;
  t.p0 = amps;
  t.tree = substitute(skeleton_, [&](const Expr& e) -> Expr {
    if (e->op == Op::Param && e->index >= kSlotBase) return components[e->index - kSlotBase];
    if (e->op == Op::Param) return make_param(e->index, amps[e->index]);
    return nullptr;
  });
  return t;
}

Expr Ansatz::instantiate(const std::vector<Expr>& components, const std::vector<double>& amps) const {
  ParamTemplate t = bind(components, amps);
  return bind_constants(t, t.p0);
}

Box problem_box(const PDEProblem& p) {
  Box b;
  b.vars = p.vars;
  b.lo = p.lo;
  b.hi = p.hi;
  return b;
}

std::string assemble(const Ansatz& a, const std::vector<std::string>& components, const Grammar& g,
                     const Box& domain) {
  std::vector<Expr> parts;
  for (const auto& c : components) parts.push_back(interpret(c));
  std::vector<double> ones(a.amplitudes(), 1.0);
  std::string text = to_text(canonical_tree(a.instantiate(parts, ones)));
  auto v = validate(text, ProblemClass::Any, domain, unbounded(g));
  if (!v.ok())
    throw Error(ErrorCode::InvalidAnsatz, "assembled expression rejected (" + to_string(v.reason) + "): " + text);
  return text;
}

std::string assemble(const Ansatz& a, const std::vector<std::string>& components, const Grammar& g) {
  Box b;
  for (const auto& s : a.slots()) b.vars |= s.vars;
  return assemble(a, components, g, b);
}

Scored score_components(const Ansatz& a, const std::vector<Expr>& components, const PDEProblem& prob,
                        int gn_iters) {
  Scored out;
  if (a.amplitudes() == 0) {
    auto parts = residual_parts(a.instantiate(components, {}), prob);
    if (!parts.flagged && std::isfinite(parts.total)) out.residual = parts.total;
    return out;
  }
  ParamTemplate t = a.bind(components, std::vector<double>(a.amplitudes(), 1.0));
  std::vector<double> amp = t.p0;
  ResidualSystem sys = residual_system(t, amp, prob, true);
  if (sys.flagged) return out;
  double value = sys.value();
  for (int it = 0; it < gn_iters && value > 0; ++it) {
    Eigen::VectorXd step = sys.J.completeOrthogonalDecomposition().solve(-sys.r);
    if (!step.allFinite()) break;
    bool accepted = false;
    for (double scale = 1.0; scale > 1e-3; scale *= 0.5) {
      std::vector<double> trial(amp);
      for (int k = 0; k < a.amplitudes(); ++k) trial[k] += scale * step[k];
      ResidualSystem next = residual_system(t, trial, prob, true);
      if (!next.flagged && next.value() < value) {
        double gain = value - next.value();
        amp = trial;
        sys = std::move(next);
        accepted = gain > 1e-12 * value;
        value = sys.value();
        break;
      }
    }
    if (!accepted) break;
  }
  out.residual = value;
  out.amplitudes = amp;
  return out;
}

// ---------------------------------------------------------------------------

double stage2_objective(const ParamTemplate& tmpl, std::span<const double> p, const PDEProblem& prob,
                        std::vector<double>* grad) {
  ResidualSystem sys = residual_system(tmpl, p, prob, grad != nullptr);
  if (sys.flagged) return kInf;
  if (grad) {
    Eigen::VectorXd g = 2.0 * sys.J.transpose() * sys.r;
    grad->assign(g.data(), g.data() + g.size());
  }
  return sys.value();
}

namespace {

struct StartOutcome {
  std::vector<double> p;
  double value = kInf;
};

StartOutcome refine_start(const ParamTemplate& tmpl, std::vector<double> p, const PDEProblem& prob,
                          const RefineConfig& cfg) {
  const int P = tmpl.size();
  const double tol2 = cfg.eps_tol * cfg.eps_tol;
  StartOutcome out;
  ResidualSystem sys = residual_system(tmpl, p, prob, true);
  if (sys.flagged) return out;
  out.p = p;
  out.value = sys.value();
  if (out.value < tol2) return out;

  // Adam with exponentially decaying step size.
  Eigen::VectorXd m = Eigen::VectorXd::Zero(P), v = Eigen::VectorXd::Zero(P);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-12;
  for (int step = 1; step <= cfg.adam_steps; ++step) {
    Eigen::VectorXd g = 2.0 * sys.J.transpose() * sys.r;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    double lr = cfg.lr * std::pow(cfg.lr_decay, step - 1);
    double c1 = 1 - std::pow(b1, step), c2 = 1 - std::pow(b2, step);
    for (int k = 0; k < P; ++k) p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    sys = residual_system(tmpl, p, prob, true);
    if (sys.flagged) return {};  // diverged
    if (sys.value() < out.value) {
      out.value = sys.value();
      out.p = p;
    }
    if (out.value < tol2) return out;
  }

  // Levenberg-Marquardt polish from the best Adam iterate.
  p = out.p;
  sys = residual_system(tmpl, p, prob, true);
  double lambda = 1e-3;
  for (int it = 0; it < cfg.lm_iters && out.value > 0; ++it) {
    Eigen::MatrixXd A = sys.J.transpose() * sys.J;
    Eigen::VectorXd g = sys.J.transpose() * sys.r;
    bool improved = false;
    while (lambda < 1e12) {
      Eigen::MatrixXd M = A;
      for (int k = 0; k < P; ++k) M(k, k) += lambda * (A(k, k) + 1e-12);
      Eigen::VectorXd step = M.ldlt().solve(-g);
      if (!step.allFinite()) {
        lambda *= 4;
        continue;
      }
      std::vector<double> trial(p);
      for (int k = 0; k < P; ++k) trial[k] += step[k];
      ResidualSystem next = residual_system(tmpl, trial, prob, true);
      if (!next.flagged && next.value() < out.value) {
        double gain = out.value - next.value();
        p = trial;
        sys = std::move(next);
        out.p = p;
        out.value = sys.value();
        lambda = std::max(lambda / 3, 1e-12);
        improved = gain > 1e-14 * out.value;
        break;
      }
      lambda *= 4;
    }
    if (!improved) break;
  }
  return out;
}

}  // namespace

RefineResult stage2_refine(const Expr& w, const PDEProblem& prob, const RefineConfig& cfg) {
  if (cfg.starts < 1) throw Error(ErrorCode::InvalidConfig, "refinement needs at least one start");
  RefineResult res;
  res.tmpl = extract_constants(w);
  if (res.tmpl.size() == 0) {
    res.expr = w;
    auto parts = residual_parts(w, prob);
    res.residual = parts.flagged ? kInf : parts.total;
    res.start_residuals = {res.residual};
    res.starts_ok = std::isfinite(res.residual) ? 1 : 0;
    if (!res.starts_ok) throw Error(ErrorCode::RefinementFailed, "expression is not finite on the grid");
    return res;
  }
  const auto& pbar = res.tmpl.p0;
  // An incumbent that already meets the tolerance is returned as is.
  double r0 = stage2_objective(res.tmpl, pbar, prob);
  if (std::sqrt(r0) < cfg.eps_tol) {
    res.p = pbar;
    res.residual = r0;
    res.start_residuals = {r0};
    res.starts_ok = 1;
    res.expr = bind_constants(res.tmpl, res.p);
    return res;
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Start 0 is the incumbent's own constants.
  std::vector<std::vector<double>> inits(cfg.starts, pbar);
  for (int s = 1; s < cfg.starts; ++s)
    for (std::size_t k = 0; k < pbar.size(); ++k) inits[s][k] = pbar[k] + cfg.eta * std::abs(pbar[k]) * normal(rng);

  std::vector<StartOutcome> outs(cfg.starts);
  parallel_for(cfg.starts, cfg.workers, [&](int s) { outs[s] = refine_start(res.tmpl, inits[s], prob, cfg); });

  int best = -1;
  for (int s = 0; s < cfg.starts; ++s) {
    res.start_residuals.push_back(outs[s].value);
    if (!std::isfinite(outs[s].value)) continue;
    ++res.starts_ok;
    if (best < 0 || outs[s].value < outs[best].value) best = s;
  }
  if (best < 0) throw Error(ErrorCode::RefinementFailed, "every refinement start diverged");
  res.p = outs[best].p;
  res.residual = outs[best].value;
  res.expr = bind_constants(res.tmpl, res.p);
  return res;
}

// ---------------------------------------------------------------------------

SearchConfig search_config_from_json(const std::string& json_text) {
  using nlohmann::json;
  SearchConfig c;
  json j;
  try {
    j = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("search config: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "search config must be an object");
  static const std::set<std::string> kKeys{"clusters", "subclusters",    "draws",    "max_iters", "eps_struct",
                                           "min_subcluster", "jitter", "focus",    "explore",   "member_fallback",
                                           "gn_iters", "workers",        "seed",     "refine"};
  for (const auto& [k, v] : j.items())
    if (!kKeys.count(k)) throw Error(ErrorCode::InvalidConfig, "unknown search config key '" + k + "'");
  try {
    c.clusters = j.value("clusters", c.clusters);
    c.subclusters = j.value("subclusters", c.subclusters);
    c.draws = j.value("draws", c.draws);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.eps_struct = j.value("eps_struct", c.eps_struct);
    c.min_subcluster = j.value("min_subcluster", c.min_subcluster);
    c.jitter = j.value("jitter", c.jitter);
    c.focus = j.value("focus", c.focus);
    c.explore = j.value("explore", c.explore);
    c.member_fallback = j.value("member_fallback", c.member_fallback);
    c.gn_iters = j.value("gn_iters", c.gn_iters);
    c.workers = j.value("workers", c.workers);
    c.seed = j.value("seed", c.seed);
    if (j.contains("refine")) {
      const json& r = j["refine"];
      c.refine.starts = r.value("starts", c.refine.starts);
      c.refine.eta = r.value("eta", c.refine.eta);
      c.refine.eps_tol = r.value("eps_tol", c.refine.eps_tol);
      c.refine.adam_steps = r.value("adam_steps", c.refine.adam_steps);
      c.refine.lr = r.value("lr", c.refine.lr);
      c.refine.lr_decay = r.value("lr_decay", c.refine.lr_decay);
      c.refine.lm_iters = r.value("lm_iters", c.refine.lm_iters);
      c.refine.seed = r.value("seed", c.refine.seed);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("search config: ") + e.what());
  }
  if (c.clusters < 1 || c.subclusters < 1 || c.draws < 1 || c.max_iters < 0 || c.min_subcluster < 1 ||
      c.focus < 1 || c.workers < 1 || c.refine.starts < 1 || !(c.jitter >= 0) || !(c.explore >= 0 && c.explore <= 1))
    throw Error(ErrorCode::InvalidConfig, "search config values out of range");
  return c;
}

std::string to_json(const SearchConfig& c) {
  nlohmann::json j{{"clusters", c.clusters},
                   {"subclusters", c.subclusters},
                   {"draws", c.draws},
                   {"max_iters", c.max_iters},
                   {"eps_struct", c.eps_struct},
                   {"min_subcluster", c.min_subcluster},
                   {"jitter", c.jitter},
                   {"focus", c.focus},
                   {"explore", c.explore},
                   {"member_fallback", c.member_fallback},
                   {"gn_iters", c.gn_iters},
                   {"seed", c.seed},
                   {"refine",
                    {{"starts", c.refine.starts},
                     {"eta", c.refine.eta},
                     {"eps_tol", c.refine.eps_tol},
                     {"adam_steps", c.refine.adam_steps},
                     {"lr", c.refine.lr},
                     {"lr_decay", c.refine.lr_decay},
                     {"lm_iters", c.refine.lm_iters},
                     {"seed", c.refine.seed}}}};
  // workers is left out: it does not change results
  return j.dump();
}

// ---------------------------------------------------------------------------

namespace {

struct Draft {
  std::vector<int> clusters;
  std::vector<std::string> texts;
  Eigen::MatrixXd z;
  bool ok = true;
};

class Evaluator {
 public:
  explicit Evaluator(ClusterState& st) : st_(st), box_(problem_box(*st.problem)) {}

  // Decoded text of a latent, or empty when it fails the slot checks. A
  // library member whose latent does not decode back to itself falls back to
  // its stored text when `fallback` is given.
  std::string component(int slot, const Eigen::VectorXd& z, const std::string* fallback) {
    DecodeResult d = decode(z, *st_.model, *st_.grammar);
    std::string text = d.finished ? derive(d.seq, *st_.grammar) : std::string();
    if (fallback && text != *fallback) {
      ++st_.decode_mismatch;
      text = *fallback;
    }
    if (text.empty() || !slot_ok(slot, text)) return {};
    return text;
  }

  bool slot_ok(int slot, const std::string& text) {
    const Slot& s = st_.ansatz->slots()[slot];
    auto key = std::to_string(slot) + ":" + text;
    auto it = valid_.find(key);
    if (it != valid_.end()) return it->second;
    bool ok = false;
    try {
      ok = validate(text, ProblemClass::Any, box_, *st_.grammar).ok() && variables(parse_infix(text)) == s.vars;
    } catch (const Error&) {
      ok = false;
    }
    valid_[key] = ok;
    return ok;
  }

  // Scores every draft; returns the number with a finite residual.
  std::vector<Scored> score(const std::vector<Draft>& drafts, int workers) {
    std::vector<Scored> out(drafts.size());
    std::vector<int> todo;
    std::map<std::string, int> first;
    std::vector<int> alias(drafts.size(), -1);
    for (std::size_t i = 0; i < drafts.size(); ++i) {
      if (!drafts[i].ok) continue;
      auto key = join_key(drafts[i].texts);
      if (auto it = memo_.find(key); it != memo_.end()) {
        out[i] = it->second;
        continue;
      }
      auto [it, fresh] = first.emplace(key, static_cast<int>(i));
      if (fresh)
        todo.push_back(static_cast<int>(i));
      else
        alias[i] = it->second;
    }
    parallel_for(static_cast<int>(todo.size()), workers, [&](int n) {
      int i = todo[n];
      std::vector<Expr> parts;
      for (const auto& t : drafts[i].texts) parts.push_back(interpret(t));
      try {
        out[i] = score_components(*st_.ansatz, parts, *st_.problem, gn_iters);
      } catch (const Error&) {
        out[i] = Scored{};
      }
    });
    for (int i : todo) memo_[join_key(drafts[i].texts)] = out[i];
    for (std::size_t i = 0; i < drafts.size(); ++i)
      if (alias[i] >= 0) out[i] = out[alias[i]];
    st_.evaluated += static_cast<int>(todo.size());
    return out;
  }

  int gn_iters = 4;

 private:
  ClusterState& st_;
  Box box_;
  std::unordered_map<std::string, bool> valid_;
  std::unordered_map<std::string, Scored> memo_;
};

// Folds a scored batch into the incumbent and per-cluster bests; returns the
// number of finite candidates.
int absorb(ClusterState& st, const std::vector<Draft>& drafts, const std::vector<Scored>& scores) {
  int finite = 0;
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    if (!std::isfinite(scores[i].residual)) continue;
    ++finite;
    const Draft& d = drafts[i];
    for (std::size_t c = 0; c < d.clusters.size(); ++c)
      if (d.clusters[c] >= 0)
        st.cluster_best[c][d.clusters[c]] = std::min(st.cluster_best[c][d.clusters[c]], scores[i].residual);
    if (scores[i].residual < st.best.residual) {
      st.best.clusters = d.clusters;
      st.best.components = d.texts;
      st.best.latents = d.z;
      st.best.amplitudes = scores[i].amplitudes;
      st.best.residual = scores[i].residual;
    }
  }
  return finite;
}

}  // namespace

ClusterState prepare_clusters(const AtomLibrary& lib, const Ansatz& a, const PDEProblem& prob,
                              const ModelParams& model, const Grammar& g, const SearchConfig& cfg) {
  ClusterState st;
  st.ansatz = &a;
  st.problem = &prob;
  st.model = &model;
  st.grammar = &g;
  TagCache cache(lib);
  for (std::size_t c = 0; c < a.slots().size(); ++c) {
    st.libs.push_back(filter_component_library(lib, a.slots()[c], model, &cache));
    int k = std::min(cfg.clusters, st.libs.back().size());
    st.clusters.push_back(kmeans(st.libs.back().latents, k, mix(cfg.seed, 1, c)));
    st.cluster_best.emplace_back(k, kInf);
  }
  return st;
}

void stage0(ClusterState& st, const SearchConfig& cfg) {
  const int L = static_cast<int>(st.libs.size());
  std::mt19937_64 rng(mix(cfg.seed, 2));
  Evaluator ev(st);
  ev.gn_iters = cfg.gn_iters;

  std::vector<std::vector<std::vector<int>>> members(L);
  double total = 1;
  for (int c = 0; c < L; ++c) {
    int k = static_cast<int>(st.clusters[c].centroids.cols());
    members[c].resize(k);
    for (int i = 0; i < st.libs[c].size(); ++i) members[c][st.clusters[c].assign[i]].push_back(i);
    total *= k;
  }
  std::set<std::vector<int>> seen;
  auto random_tuple = [&] {
    std::vector<int> t(L);
    for (int c = 0; c < L; ++c) t[c] = std::uniform_int_distribution<int>(0, static_cast<int>(members[c].size()) - 1)(rng);
    return t;
  };
  // Uniform over unseen tuples while any remain: enumerate them when the
  // space is small, otherwise reject repeats.
  auto next_tuple = [&] {
    if (static_cast<double>(seen.size()) >= total) return random_tuple();
    if (total <= 4096) {
      std::vector<std::vector<int>> unseen;
      std::vector<int> t(L, 0);
      while (true) {
        if (!seen.count(t)) unseen.push_back(t);
        int c = L - 1;
        while (c >= 0 && ++t[c] == static_cast<int>(members[c].size())) t[c--] = 0;
        if (c < 0) break;
      }
      return unseen[std::uniform_int_distribution<std::size_t>(0, unseen.size() - 1)(rng)];
    }
    while (true) {
      auto t = random_tuple();
      if (!seen.count(t)) return t;
    }
  };

  std::vector<Draft> drafts;
  for (int m = 0; m < cfg.draws; ++m) {
    Draft d;
    d.clusters = next_tuple();
    seen.insert(d.clusters);
    d.z.resize(st.model->cfg.latent, L);
    for (int c = 0; c < L; ++c) {
      const auto& pool = members[c][d.clusters[c]];
      int i = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      d.z.col(c) = st.libs[c].latents.col(i);
      std::string text = ev.component(c, d.z.col(c), cfg.member_fallback ? &st.libs[c].texts[i] : nullptr);
      if (text.empty()) d.ok = false;
      d.texts.push_back(text);
    }
    drafts.push_back(std::move(d));
  }
  auto scores = ev.score(drafts, cfg.workers);
  int finite = absorb(st, drafts, scores);
  st.trace.push_back({"stage0", 0, static_cast<int>(drafts.size()), finite, st.best.residual});
  if (!st.best.valid()) throw Error(ErrorCode::NoFiniteCandidate, "no Stage 0 candidate has a finite residual");
}

void stage1(ClusterState& st, const SearchConfig& cfg) {
  if (!st.best.valid()) throw Error(ErrorCode::NoFiniteCandidate, "Stage I needs a Stage 0 incumbent");
  const int L = static_cast<int>(st.libs.size());
  const int dim = st.model->cfg.latent;
  Evaluator ev(st);
  ev.gn_iters = cfg.gn_iters;

  struct Point {
    Eigen::VectorXd z;
    int member = -1;  // -1 for synthesized latents
  };

  for (int it = 0; it < cfg.max_iters; ++it) {
    if (st.best.residual <= cfg.eps_struct) break;
    std::mt19937_64 rng(mix(cfg.seed, 3, it));
    std::normal_distribution<double> normal(0.0, 1.0);

    // Subcluster the focused clusters of every slot.
    std::vector<std::vector<int>> focus(L);
    std::vector<std::map<int, std::vector<std::vector<Point>>>> pools(L);
    std::vector<std::vector<std::vector<int>>> members(L);
    for (int c = 0; c < L; ++c) {
      const auto& km = st.clusters[c];
      int k = static_cast<int>(km.centroids.cols());
      members[c].assign(k, {});
      for (int i = 0; i < st.libs[c].size(); ++i) members[c][km.assign[i]].push_back(i);
      std::vector<int> order(k);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return st.cluster_best[c][a] < st.cluster_best[c][b]; });
      focus[c].push_back(st.best.clusters[c]);
      for (int q : order) {
        if (static_cast<int>(focus[c].size()) >= cfg.focus) break;
        if (q != st.best.clusters[c] && std::isfinite(st.cluster_best[c][q])) focus[c].push_back(q);
      }
      for (int q : focus[c]) {
        const auto& mem = members[c][q];
        Eigen::MatrixXd pts(dim, mem.size());
        for (std::size_t i = 0; i < mem.size(); ++i) pts.col(i) = st.libs[c].latents.col(mem[i]);
        int h = std::min<int>(cfg.subclusters, static_cast<int>(mem.size()));
        auto sub = kmeans(pts, h, mix(cfg.seed, 4, it, c * 1000 + q));
        std::vector<std::vector<Point>> parts(h);
        for (std::size_t i = 0; i < mem.size(); ++i) parts[sub.assign[i]].push_back({pts.col(i), mem[i]});
        for (auto& part : parts) {
          if (part.empty()) continue;
          // Fill small subclusters with convex combinations plus jitter.
          const std::size_t base = part.size();
          while (static_cast<int>(part.size()) < cfg.min_subcluster) {
            std::vector<double> lam(base);
            double sum = 0;
            for (auto& l : lam) sum += (l = std::exponential_distribution<double>(1.0)(rng));
            Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
            for (std::size_t i = 0; i < base; ++i) z += (lam[i] / sum) * part[i].z;
            for (int d = 0; d < dim; ++d) z[d] += cfg.jitter * normal(rng);
            part.push_back({z, -1});
          }
        }
        std::erase_if(parts, [](const auto& p) { return p.empty(); });
        pools[c][q] = std::move(parts);
      }
    }

    std::vector<Draft> drafts;
    for (int m = 0; m < cfg.draws; ++m) {
      Draft d;
      d.clusters = st.best.clusters;
      d.texts = st.best.components;
      d.z = st.best.latents;
      std::vector<bool> mutate(L, false);
      mutate[std::uniform_int_distribution<int>(0, L - 1)(rng)] = true;
      for (int c = 0; c < L; ++c)
        if (std::uniform_real_distribution<double>(0, 1)(rng) < 1.0 / L) mutate[c] = true;
      for (int c = 0; c < L && d.ok; ++c) {
        if (!mutate[c]) continue;
        Point pt;
        int q;
        if (std::uniform_real_distribution<double>(0, 1)(rng) < cfg.explore) {
          q = std::uniform_int_distribution<int>(0, static_cast<int>(members[c].size()) - 1)(rng);
          const auto& mem = members[c][q];
          int i = mem[std::uniform_int_distribution<std::size_t>(0, mem.size() - 1)(rng)];
          pt = {st.libs[c].latents.col(i), i};
        } else {
          q = focus[c][std::uniform_int_distribution<std::size_t>(0, focus[c].size() - 1)(rng)];
          const auto& parts = pools[c][q];
          const auto& part = parts[std::uniform_int_distribution<std::size_t>(0, parts.size() - 1)(rng)];
          pt = part[std::uniform_int_distribution<std::size_t>(0, part.size() - 1)(rng)];
        }
        d.clusters[c] = q;
        d.z.col(c) = pt.z;
        const std::string* fb = (cfg.member_fallback && pt.member >= 0) ? &st.libs[c].texts[pt.member] : nullptr;
        d.texts[c] = ev.component(c, pt.z, fb);
        if (d.texts[c].empty()) d.ok = false;
      }
      drafts.push_back(std::move(d));
    }
    auto scores = ev.score(drafts, cfg.workers);
    int finite = absorb(st, drafts, scores);
    st.trace.push_back({"stage1", it + 1, static_cast<int>(drafts.size()), finite, st.best.residual});
  }
}

SearchResult run_search(const AtomLibrary& lib, const Ansatz& a, const PDEProblem& prob, const ModelParams& model,
                        const Grammar& g, const SearchConfig& cfg) {
  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point t0) { return std::chrono::duration<double>(clock::now() - t0).count(); };
  SearchResult res;
  auto t0 = clock::now();
  ClusterState st = prepare_clusters(lib, a, prob, model, g, cfg);
  stage0(st, cfg);
  res.stage0 = st.best;
  res.seconds_stage0 = secs(t0);

  t0 = clock::now();
  stage1(st, cfg);
  res.stage1 = st.best;
  res.seconds_stage1 = secs(t0);

  t0 = clock::now();
  std::vector<Expr> parts;
  for (const auto& t : st.best.components) parts.push_back(interpret(t));
  Expr w = canonical_tree(a.instantiate(parts, st.best.amplitudes));
  RefineConfig rc = cfg.refine;
  rc.workers = cfg.workers;
  res.refined = stage2_refine(w, prob, rc);

  // The hull penalty of the frozen incumbent latents does not depend on the
  // constants, so it is recorded rather than optimized.
  Eigen::MatrixXd dirs = random_directions(model.cfg.latent, 256, mix(cfg.seed, 5));
  for (int c = 0; c < static_cast<int>(st.libs.size()); ++c)
    res.refined.hull_penalty += hull_loss(st.libs[c].latents, st.best.latents.col(c), dirs);

  res.expression = to_text(canonical_tree(res.refined.expr));
  auto parts_final = residual_parts(parse_infix(res.expression), prob);
  res.residual = parts_final.flagged ? kInf : parts_final.total;
  res.seconds_stage2 = secs(t0);
  res.trace = st.trace;
  res.evaluated = st.evaluated;
  res.decode_mismatch = st.decode_mismatch;
  return res;
}

// ---------------------------------------------------------------------------

MahalanobisFilter::MahalanobisFilter(const Eigen::MatrixXd& means, double tau,
                                     const std::optional<Eigen::MatrixXd>& sigma)
    : means_(means), tau_(tau) {
  const auto d = means.rows();
  if (means.cols() == 0) throw Error(ErrorCode::ShapeMismatch, "no training means");
  Eigen::MatrixXd S;
  if (sigma) {
    if (sigma->rows() != d || sigma->cols() != d) throw Error(ErrorCode::ShapeMismatch, "covariance shape");
    S = *sigma;
  } else if (means.cols() < 2) {
    S = Eigen::MatrixXd::Identity(d, d);
  } else {
    Eigen::MatrixXd centered = means.colwise() - means.rowwise().mean();
    S = centered * centered.transpose() / static_cast<double>(means.cols() - 1);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) {
    S += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    llt.compute(S);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorCode::SingularCovariance, "covariance is not positive definite after regularization");
  }
  L_ = llt.matrixL();
  whitened_ = llt.matrixL().solve(means);
}

double MahalanobisFilter::min_distance(const Eigen::VectorXd& z) const {
  Eigen::VectorXd w = L_.triangularView<Eigen::Lower>().solve(z);
  return (whitened_.colwise() - w).colwise().norm().minCoeff();
}

bool mahalanobis_filter(const Eigen::VectorXd& z, const Eigen::MatrixXd& means, const Eigen::MatrixXd& sigma,
                        double tau) {
  return MahalanobisFilter(means, tau, sigma).accept(z);
}

Eigen::MatrixXd training_means(const ModelParams& p, const std::vector<RuleSequence>& data,
                               const std::vector<int>& idx) {
  Eigen::MatrixXd out(p.cfg.latent, idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(i) = encode(data.at(idx[i]), p).mu;
  return out;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

RaceResult race_to_k_valid(const LatentDecoder& a, const LatentDecoder& b, const Grammar& g,
                           const std::vector<const MahalanobisFilter*>& filters, int latent_dim,
                           const RaceConfig& cfg) {
  if (cfg.k < 1 || cfg.splits < 1 || cfg.pool < cfg.splits)
    throw Error(ErrorCode::InvalidConfig, "race needs k >= 1 and at least one latent per split");
  RaceResult res;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Eigen::VectorXd> pool;
  const long cap = 1000L * cfg.pool;
  while (static_cast<int>(pool.size()) < cfg.pool) {
    if (res.sampled >= cap) throw Error(ErrorCode::PoolExhausted, "filter rejects almost every latent");
    Eigen::VectorXd z(latent_dim);
    for (int d = 0; d < latent_dim; ++d) z[d] = normal(rng);
    ++res.sampled;
    bool ok = std::all_of(filters.begin(), filters.end(), [&](const auto* f) { return f->accept(z); });
    if (ok) pool.push_back(std::move(z));
  }

  std::unordered_map<std::string, bool> valid;
  auto is_valid = [&](const DecodeResult& d) {
    if (!d.finished) return false;
    std::string text = derive(d.seq, g);
    auto it = valid.find(text);
    if (it != valid.end()) return it->second;
    bool ok = validate(text, ProblemClass::Any, cfg.domain, g).ok();
    valid[text] = ok;
    return ok;
  };
  auto attempts = [&](const LatentDecoder& dec, int lo, int hi) {
    int n = 0, good = 0;
    for (int i = lo; i < hi && good < cfg.k; ++i) {
      ++n;
      if (is_valid(dec(pool[i]))) ++good;
    }
    if (good < cfg.k)
      throw Error(ErrorCode::PoolExhausted, fmt::format("only {} of {} valid in a split of {}", good, cfg.k, hi - lo));
    return n;
  };
  const int per = cfg.pool / cfg.splits;
  for (int s = 0; s < cfg.splits; ++s) {
    int na = attempts(a, s * per, (s + 1) * per);
    int nb = attempts(b, s * per, (s + 1) * per);
    res.attempts_a.push_back(na);
    res.attempts_b.push_back(nb);
    res.reduction.push_back(100.0 * (nb - na) / nb);
  }
  return res;
}

AblationResult atoms_vs_primitives_ablation(const Grammar& g, const Ansatz& a, const PDEProblem& prob,
                                            int n_samples, std::uint64_t seed,
                                            const std::vector<ComponentLibrary>* libs, int atom_samples,
                                            int score_limit) {
  AblationResult res;
  const Box box = problem_box(prob);
  const int L = static_cast<int>(a.slots().size());
  std::unordered_map<std::string, bool> cache;
  auto fits = [&](int c, const std::string& text) {
    auto key = std::to_string(c) + ":" + text;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    bool ok = false;
    try {
      ok = validate(text, ProblemClass::Any, box, g).ok() && variables(parse_infix(text)) == a.slots()[c].vars;
    } catch (const Error&) {
    }
    cache[key] = ok;
    return ok;
  };
  int scored = 0;
  auto consider = [&](const std::vector<std::string>& texts) {
    if (scored >= score_limit) return;
    ++scored;
    std::vector<Expr> parts;
    for (const auto& t : texts) parts.push_back(interpret(t));
    Scored s = score_components(a, parts, prob);
    if (s.residual < res.best_residual) {
      res.best_residual = s.residual;
      res.best_expression = to_text(canonical_tree(a.instantiate(parts, s.amplitudes)));
    }
  };

  std::mt19937_64 rng(seed);
  for (int i = 0; i < n_samples; ++i) {
    ++res.samples;
    std::vector<std::string> texts;
    bool ok = true;
    for (int c = 0; c < L; ++c) {
      DecodeResult d = sample_uniform(g, rng);
      if (!ok) continue;  // keep the draw count per sample fixed
      if (!d.finished) {
        ok = false;
        continue;
      }
      texts.push_back(derive(d.seq, g));
      ok = fits(c, texts.back());
    }
    if (!ok) continue;
    ++res.admissible;
    consider(texts);
  }

  if (libs) {
    if (static_cast<int>(libs->size()) != L) throw Error(ErrorCode::DimensionMismatch, "one library per slot");
    std::mt19937_64 arng(seed ^ 0x9e3779b97f4a7c15ull);
    for (int i = 0; i < atom_samples; ++i) {
      ++res.atom_samples;
      std::vector<std::string> texts;
      bool ok = true;
      for (int c = 0; c < L; ++c) {
        const auto& lib = (*libs)[c];
        texts.push_back(lib.texts[std::uniform_int_distribution<int>(0, lib.size() - 1)(arng)]);
        ok = ok && fits(c, texts.back());
      }
      if (ok) ++res.atom_admissible;
    }
  }
  return res;
}

}  // namespace sigs
