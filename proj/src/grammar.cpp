#include "sigs/grammar.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "sigs/error.hpp"
#include "sigs/expr.hpp"
#include "sigs/util.hpp"

namespace sigs {

namespace {

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

bool looks_nonterminal(const std::string& s) {
  if (s.empty() || s[0] < 'A' || s[0] > 'Z') return false;
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

constexpr int kInf = std::numeric_limits<int>::max() / 4;

}  // namespace

Grammar Grammar::load(std::string_view spec, int max_len) {
  Grammar g;
  g.max_len_ = max_len;
  g.source_ = std::string(spec);

  struct RawRule {
    std::string lhs;
    std::vector<std::string> rhs;
  };
  std::vector<RawRule> raw;
  std::istringstream in{std::string(spec)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (split_ws(line).empty()) continue;
    auto arrow = line.find("->");
    if (arrow == std::string::npos)
      throw Error(ErrorCode::InvalidGrammar, "line " + std::to_string(lineno) + ": missing '->'");
    auto lhs = split_ws(line.substr(0, arrow));
    if (lhs.size() != 1 || !looks_nonterminal(lhs[0]))
      throw Error(ErrorCode::InvalidGrammar, "line " + std::to_string(lineno) + ": bad left side");
    std::string rest = line.substr(arrow + 2);
    std::size_t start = 0;
    while (true) {
      auto bar = rest.find('|', start);
      auto alt = split_ws(rest.substr(start, bar == std::string::npos ? std::string::npos : bar - start));
      if (alt.empty())
        throw Error(ErrorCode::InvalidGrammar,
                    "line " + std::to_string(lineno) + ": empty alternative");
      raw.push_back({lhs[0], alt});
      if (bar == std::string::npos) break;
      start = bar + 1;
    }
  }

  std::map<std::string, int> nt_index;
  for (const auto& r : raw)
    if (!nt_index.count(r.lhs)) {
      nt_index[r.lhs] = static_cast<int>(g.nonterminals_.size());
      g.nonterminals_.push_back(r.lhs);
    }
  if (!nt_index.count("S")) throw Error(ErrorCode::MissingStart, "grammar has no rule for S");
  g.start_ = nt_index["S"];

  std::map<std::string, int> t_index;
  std::set<std::pair<std::string, std::vector<std::string>>> seen;
  for (const auto& r : raw) {
    if (!seen.insert({r.lhs, r.rhs}).second) {
      std::string text = r.lhs + " ->";
      for (const auto& s : r.rhs) text += " " + s;
      throw Error(ErrorCode::DuplicateRule, "duplicate rule: " + text);
    }
    Rule rule;
    rule.lhs = nt_index[r.lhs];
    for (const auto& s : r.rhs) {
      if (auto it = nt_index.find(s); it != nt_index.end()) {
        rule.rhs.push_back({false, it->second});
      } else if (looks_nonterminal(s)) {
        throw Error(ErrorCode::UnknownSymbol, "undeclared nonterminal '" + s + "'");
      } else {
        auto [it2, inserted] = t_index.try_emplace(s, static_cast<int>(g.terminals_.size()));
        if (inserted) g.terminals_.push_back(s);
        rule.rhs.push_back({true, it2->second});
      }
    }
    g.rules_.push_back(std::move(rule));
  }
  g.rules_.push_back(Rule{});  // NOP

  // Minimal completion costs by fixpoint iteration.
  int n_nt = static_cast<int>(g.nonterminals_.size());
  g.min_cost_.assign(n_nt, kInf);
  bool changed = true;
  while (changed) {
    changed = false;
    for (int r = 0; r < g.nop(); ++r) {
      long cost = 1;
      for (const auto& s : g.rules_[r].rhs)
        if (!s.terminal) cost += g.min_cost_[s.id];
      if (cost < g.min_cost_[g.rules_[r].lhs]) {
        g.min_cost_[g.rules_[r].lhs] = static_cast<int>(cost);
        changed = true;
      }
    }
  }
  for (int a = 0; a < n_nt; ++a)
    if (g.min_cost_[a] >= kInf)
      throw Error(ErrorCode::InvalidGrammar,
                  "nonterminal " + g.nonterminals_[a] + " derives no terminal string");
  g.rule_cost_.assign(g.rule_count(), 1);
  for (int r = 0; r < g.nop(); ++r)
    for (const auto& s : g.rules_[r].rhs)
      if (!s.terminal) g.rule_cost_[r] += g.min_cost_[s.id];

  // Unit-rule cycles would make canonical derivations ill-defined.
  std::vector<std::vector<int>> unit(n_nt);
  for (int r = 0; r < g.nop(); ++r)
    if (g.rules_[r].rhs.size() == 1 && !g.rules_[r].rhs[0].terminal)
      unit[g.rules_[r].lhs].push_back(g.rules_[r].rhs[0].id);
  std::vector<int> state(n_nt, 0);
  auto visit = [&](auto&& self, int a) -> void {
    state[a] = 1;
    for (int b : unit[a]) {
      if (state[b] == 1) throw Error(ErrorCode::InvalidGrammar, "cycle of unit rules");
      if (state[b] == 0) self(self, b);
    }
    state[a] = 2;
  };
  for (int a = 0; a < n_nt; ++a)
    if (state[a] == 0) visit(visit, a);

  g.masks_.assign(n_nt, std::vector<std::uint8_t>(g.rule_count(), 0));
  for (int r = 0; r < g.nop(); ++r) g.masks_[g.rules_[r].lhs][r] = 1;
  g.sentinel_mask_.assign(g.rule_count(), 0);
  g.sentinel_mask_[g.nop()] = 1;
  if (g.min_cost_[g.start_] > max_len)
    throw Error(ErrorCode::InvalidGrammar, "max_len too small for any derivation");
  return g;
}

Grammar Grammar::load_file(const std::filesystem::path& path, int max_len) {
  return load(read_file(path), max_len);
}

Grammar load_grammar(std::string_view spec) { return Grammar::load(spec); }

int Grammar::nonterminal_id(std::string_view name) const {
  for (std::size_t i = 0; i < nonterminals_.size(); ++i)
    if (nonterminals_[i] == name) return static_cast<int>(i);
  throw Error(ErrorCode::UnknownNonterminal, "unknown nonterminal '" + std::string(name) + "'");
}

std::string Grammar::rule_text(int r) const {
  if (r == nop()) return "NOP";
  const Rule& rule = rules_.at(r);
  std::string out = nonterminals_[rule.lhs] + " ->";
  for (const auto& s : rule.rhs)
    out += " " + (s.terminal ? terminals_[s.id] : nonterminals_[s.id]);
  return out;
}

int Grammar::find_rule(std::string_view text) const {
  auto want = split_ws(text);
  for (int r = 0; r < rule_count(); ++r)
    if (split_ws(rule_text(r)) == want) return r;
  return -1;
}

const std::vector<std::uint8_t>& Grammar::mask(int nt) const {
  if (nt == -1) return sentinel_mask_;
  if (nt < 0 || nt >= static_cast<int>(masks_.size()))
    throw Error(ErrorCode::UnknownNonterminal, "nonterminal id out of range");
  return masks_[nt];
}

std::vector<int> Grammar::tokenize(std::string_view text) const {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    int best = -1;
    std::size_t best_len = 0;
    for (std::size_t k = 0; k < terminals_.size(); ++k) {
      const auto& term = terminals_[k];
      if (term.size() > best_len && text.substr(i, term.size()) == term) {
        best = static_cast<int>(k);
        best_len = term.size();
      }
    }
    if (best < 0)
      throw Error(ErrorCode::NotInLanguage,
                  "no terminal matches at offset " + std::to_string(i) + " of '" +
                      std::string(text) + "'");
    out.push_back(best);
    i += best_len;
  }
  return out;
}

std::string Grammar::hash() const {
  std::string canon = "max_len " + std::to_string(max_len_) + "\n";
  for (int r = 0; r < rule_count(); ++r) canon += rule_text(r) + "\n";
  return sha256_hex(canon);
}

// ---------------------------------------------------------------------------

namespace {

using Seq = std::vector<int>;

struct Chart {
  int n = 0;
  int n_nt = 0;
  std::vector<Seq> best;
  std::vector<std::uint8_t> has;

  std::size_t index(int a, int i, int j) const {
    return (static_cast<std::size_t>(a) * (n + 1) + i) * (n + 1) + j;
  }
};

bool less(const Seq& a, const Seq& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

void offer(Seq& slot, bool& filled, Seq&& cand) {
  if (!filled || less(cand, slot)) {
    slot = std::move(cand);
    filled = true;
  }
}

void check_arguments_recursive(const Expr& e) {
  if (!e) return;
  switch (e->op) {
    case Op::Sin:
    case Op::Cos:
    case Op::Exp:
    case Op::Log:
    case Op::Tanh:
      if (variables(e->lhs) == 0)
        throw Error(ErrorCode::NotInLanguage,
                    std::string(function_name(e->op)) + " of a purely numeric argument");
      break;
    default:
      break;
  }
  check_arguments_recursive(e->lhs);
  check_arguments_recursive(e->rhs);
}

}  // namespace

RuleSequence parse(std::string_view expr_text, const Grammar& g, bool check_arguments) {
  std::vector<int> tok = g.tokenize(expr_text);
  int n = static_cast<int>(tok.size());
  if (n == 0) throw Error(ErrorCode::NotInLanguage, "empty expression");
  int n_nt = static_cast<int>(g.nonterminals().size());
  Chart chart;
  chart.n = n;
  chart.n_nt = n_nt;
  chart.best.resize(static_cast<std::size_t>(n_nt) * (n + 1) * (n + 1));
  chart.has.assign(chart.best.size(), 0);

  std::vector<int> unit_rules, other_rules;
  for (int r = 0; r < g.nop(); ++r) {
    const auto& rhs = g.rule(r).rhs;
    (rhs.size() == 1 && !rhs[0].terminal ? unit_rules : other_rules).push_back(r);
  }

  std::vector<Seq> frontier(n + 1), next(n + 1);
  std::vector<std::uint8_t> live(n + 1), next_live(n + 1);
  for (int len = 1; len <= n; ++len) {
    for (int i = 0; i + len <= n; ++i) {
      int j = i + len;
      for (int r : other_rules) {
        const auto& rhs = g.rule(r).rhs;
        if (static_cast<int>(rhs.size()) > len) continue;
        if (rhs.front().terminal && tok[i] != rhs.front().id) continue;
        if (rhs.back().terminal && tok[j - 1] != rhs.back().id) continue;
        // frontier[p] holds the best partial derivation covering (i, p).
        std::fill(live.begin(), live.end(), 0);
        frontier[i] = {r};
        live[i] = 1;
        for (std::size_t k = 0; k < rhs.size(); ++k) {
          std::fill(next_live.begin(), next_live.end(), 0);
          int symbols_left = static_cast<int>(rhs.size() - k - 1);
          for (int p = i; p < j; ++p) {
            if (!live[p]) continue;
            const Symbol& s = rhs[k];
            if (s.terminal) {
              if (tok[p] == s.id && p + 1 + symbols_left <= j) {
                bool f = next_live[p + 1];
                offer(next[p + 1], f, Seq(frontier[p]));
                next_live[p + 1] = f;
              }
              continue;
            }
            for (int q = p + 1; q + symbols_left <= j; ++q) {
              if (q - p == len) continue;  // only unit rules span the whole range
              auto idx = chart.index(s.id, p, q);
              if (!chart.has[idx]) continue;
              Seq cand = frontier[p];
              cand.insert(cand.end(), chart.best[idx].begin(), chart.best[idx].end());
              bool f = next_live[q];
              offer(next[q], f, std::move(cand));
              next_live[q] = f;
            }
          }
          std::swap(frontier, next);
          std::swap(live, next_live);
        }
        if (live[j]) {
          auto idx = chart.index(g.rule(r).lhs, i, j);
          bool f = chart.has[idx];
          offer(chart.best[idx], f, std::move(frontier[j]));
          chart.has[idx] = f;
        }
      }
      for (int pass = 0; pass < n_nt; ++pass) {
        for (int r : unit_rules) {
          int b = g.rule(r).rhs[0].id;
          auto src = chart.index(b, i, j);
          if (!chart.has[src]) continue;
          Seq cand{r};
          cand.insert(cand.end(), chart.best[src].begin(), chart.best[src].end());
          auto dst = chart.index(g.rule(r).lhs, i, j);
          bool f = chart.has[dst];
          offer(chart.best[dst], f, std::move(cand));
          chart.has[dst] = f;
        }
      }
    }
  }

  auto root = chart.index(g.start(), 0, n);
  if (!chart.has[root])
    throw Error(ErrorCode::NotInLanguage, "'" + std::string(expr_text) + "' is not derivable");
  Seq seq = std::move(chart.best[root]);
  if (static_cast<int>(seq.size()) > g.max_len())
    throw Error(ErrorCode::TooLong, "derivation of '" + std::string(expr_text) + "' needs " +
                                        std::to_string(seq.size()) + " rules");
  if (check_arguments) check_arguments_recursive(parse_infix(expr_text));
  seq.resize(g.max_len(), g.nop());
  return seq;
}

std::string derive(std::span<const int> seq, const Grammar& g) {
  std::vector<Symbol> stack{{false, g.start()}};
  std::string out;
  auto flush = [&] {
    while (!stack.empty() && stack.back().terminal) {
      out += g.terminals()[stack.back().id];
      stack.pop_back();
    }
  };
  for (std::size_t k = 0; k < seq.size(); ++k) {
    int r = seq[k];
    if (r < 0 || r >= g.rule_count())
      throw Error(ErrorCode::InvalidDerivation, "rule index out of range");
    if (r == g.nop()) {
      if (!stack.empty())
        throw Error(ErrorCode::InvalidDerivation, "NOP at step " + std::to_string(k) +
                                                      " with a nonempty stack");
      continue;
    }
    if (stack.empty())
      throw Error(ErrorCode::InvalidDerivation,
                  "rule " + g.rule_text(r) + " applied after the derivation finished");
    if (stack.back().id != g.rule(r).lhs)
      throw Error(ErrorCode::InvalidDerivation, "rule " + g.rule_text(r) + " does not expand " +
                                                    g.nonterminals()[stack.back().id]);
    stack.pop_back();
    const auto& rhs = g.rule(r).rhs;
    for (auto it = rhs.rbegin(); it != rhs.rend(); ++it) stack.push_back(*it);
    flush();
  }
  if (!stack.empty()) throw Error(ErrorCode::Unfinished, "derivation incomplete");
  return out;
}

bool is_valid_derivation(std::span<const int> seq, const Grammar& g) {
  try {
    derive(seq, g);
    return true;
  } catch (const Error&) {
    return false;
  }
}

OneHotMatrix encode_onehot(std::span<const int> seq, const Grammar& g) {
  OneHotMatrix m;
  m.rows = g.rule_count();
  m.cols = g.max_len();
  m.entries.assign(static_cast<std::size_t>(m.rows) * m.cols, 0);
  for (int c = 0; c < m.cols; ++c) {
    int r = c < static_cast<int>(seq.size()) ? seq[c] : g.nop();
    m.entries[static_cast<std::size_t>(c) * m.rows + r] = 1;
  }
  return m;
}

RuleSequence decode_onehot(const OneHotMatrix& m) {
  RuleSequence seq(m.cols);
  for (int c = 0; c < m.cols; ++c) {
    int found = -1;
    for (int r = 0; r < m.rows; ++r) {
      if (!m.at(r, c)) continue;
      if (found >= 0 || m.at(r, c) != 1)
        throw Error(ErrorCode::MalformedOneHot, "column " + std::to_string(c) + " is not one-hot");
      found = r;
    }
    if (found < 0) throw Error(ErrorCode::MalformedOneHot, "column " + std::to_string(c) + " is empty");
    seq[c] = found;
  }
  return seq;
}

const std::vector<std::uint8_t>& mask_for(std::string_view nonterminal, const Grammar& g) {
  if (nonterminal.empty()) return g.mask(-1);
  return g.mask(g.nonterminal_id(nonterminal));
}

namespace {

template <class Choose>
DecodeResult stack_decode(const Grammar& g, bool guard, Choose&& choose) {
  DecodeResult res;
  res.seq.assign(g.max_len(), g.nop());
  std::vector<int> stack{g.start()};
  int pending = g.min_cost(g.start());  // sum of min costs over the stack
  std::vector<int> allowed;
  for (int k = 0; k < g.max_len(); ++k) {
    if (stack.empty()) {
      res.finished = true;
      return res;
    }
    int top = stack.back();
    int remaining = g.max_len() - k;
    int rest = pending - g.min_cost(top);
    const auto& mask = g.mask(top);
    allowed.clear();
    for (int r = 0; r < g.rule_count(); ++r) {
      if (!mask[r]) continue;
      if (guard && g.rule_cost(r) + rest > remaining) continue;
      allowed.push_back(r);
    }
    if (allowed.empty()) return res;  // cannot happen with the guard on
    int r = choose(k, allowed);
    res.seq[k] = r;
    stack.pop_back();
    pending = rest;
    const auto& rhs = g.rule(r).rhs;
    for (auto it = rhs.rbegin(); it != rhs.rend(); ++it)
      if (!it->terminal) {
        stack.push_back(it->id);
        pending += g.min_cost(it->id);
      }
  }
  res.finished = stack.empty();
  return res;
}

}  // namespace

DecodeResult masked_argmax_decode(std::span<const double> logits, const Grammar& g,
                                  bool recursion_guard) {
  const int C = g.rule_count();
  if (logits.size() != static_cast<std::size_t>(C) * g.max_len())
    throw Error(ErrorCode::ShapeMismatch, "logits must be C x L_max");
  return stack_decode(g, recursion_guard, [&](int k, const std::vector<int>& allowed) {
    int best = allowed.front();
    double best_v = logits[static_cast<std::size_t>(k) * C + best];
    for (int r : allowed) {
      double v = logits[static_cast<std::size_t>(k) * C + r];
      if (v > best_v) {
        best = r;
        best_v = v;
      }
    }
    return best;
  });
}

DecodeResult sample_uniform(const Grammar& g, std::mt19937_64& rng, bool recursion_guard) {
  return stack_decode(g, recursion_guard, [&](int, const std::vector<int>& allowed) {
    std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
    return allowed[pick(rng)];
  });
}

std::string canonicalize(std::string_view expr_text) {
  return to_text(canonical_tree(parse_infix(expr_text)));
}

}  // namespace sigs
