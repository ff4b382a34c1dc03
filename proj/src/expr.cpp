#include "sigs/expr.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <numbers>

#include "sigs/error.hpp"

namespace sigs {

int arity(Op op) {
  switch (op) {
    case Op::Const:
    case Op::Pi:
    case Op::Var:
    case Op::Param:
      return 0;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
      return 2;
    default:
      return 1;
  }
}

bool is_function(Op op) {
  switch (op) {
    case Op::Sin:
    case Op::Cos:
    case Op::Exp:
    case Op::Log:
    case Op::Tanh:
    case Op::Sqrt:
      return true;
    default:
      return false;
  }
}

std::string_view function_name(Op op) {
  switch (op) {
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Sqrt: return "sqrt";
    default: return "";
  }
}

Expr make_const(double v) {
  auto n = std::make_shared<Node>();
  n->op = Op::Const;
  n->value = v;
  return n;
}

Expr make_pi() {
  auto n = std::make_shared<Node>();
  n->op = Op::Pi;
  return n;
}

Expr make_var(Var v) {
  auto n = std::make_shared<Node>();
  n->op = Op::Var;
  n->index = static_cast<int>(v);
  return n;
}

Expr make_param(int slot, double value) {
  auto n = std::make_shared<Node>();
  n->op = Op::Param;
  n->index = slot;
  n->value = value;
  return n;
}

Expr make_unary(Op op, Expr a) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->lhs = std::move(a);
  return n;
}

Expr make_binary(Op op, Expr a, Expr b) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->lhs = std::move(a);
  n->rhs = std::move(b);
  return n;
}

Expr make_powi(Expr base, int n) {
  auto node = std::make_shared<Node>();
  node->op = Op::PowInt;
  node->index = n;
  node->lhs = std::move(base);
  return node;
}

std::uint8_t variables(const Expr& e) {
  if (!e) return 0;
  if (e->op == Op::Var) return static_cast<std::uint8_t>(1u << e->index);
  return variables(e->lhs) | variables(e->rhs);
}

bool has_params(const Expr& e) {
  if (!e) return false;
  if (e->op == Op::Param) return true;
  return has_params(e->lhs) || has_params(e->rhs);
}

bool equal(const Expr& a, const Expr& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  if (a->op != b->op || a->index != b->index) return false;
  if ((a->op == Op::Const || a->op == Op::Param) && a->value != b->value) return false;
  return equal(a->lhs, b->lhs) && equal(a->rhs, b->rhs);
}

std::size_t node_count(const Expr& e) {
  if (!e) return 0;
  return 1 + node_count(e->lhs) + node_count(e->rhs);
}

// ---------------------------------------------------------------------------
// Lexing

namespace {

constexpr std::array<std::string_view, 10> kKeywords = {
    "sqrt", "tanh", "sin", "cos", "exp", "log", "pi", "x", "y", "t"};

bool is_digit(char c) { return c >= '0' && c <= '9'; }

[[noreturn]] void fail(std::string_view text, std::size_t pos, std::string_view what) {
  throw Error(ErrorCode::NotInLanguage,
              std::string(what) + " at offset " + std::to_string(pos) + " in '" +
                  std::string(text) + "'");
}

}  // namespace

std::vector<Lexeme> lex(std::string_view text) {
  std::vector<Lexeme> out;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      ++i;
      continue;
    }
    Lexeme lx;
    lx.pos = i;
    if (is_digit(c)) {
      std::size_t j = i;
      while (j < text.size() && is_digit(text[j])) ++j;
      if (j + 1 < text.size() && text[j] == '.' && is_digit(text[j + 1])) {
        ++j;
        while (j < text.size() && is_digit(text[j])) ++j;
      } else if (j + 1 < text.size() && text[j] == '.' && text[j + 1] == 'e') {
        // D . D with a fraction that opens with a scale suffix: "2.e-3"
        // reads as 2 followed by the suffix
        ++j;
      }
      lx.kind = Lexeme::Number;
      lx.text = std::string(text.substr(i, j - i));
      lx.value = std::strtod(lx.text.c_str(), nullptr);
      out.push_back(lx);
      i = j;
      continue;
    }
    // A point after a scale suffix ("e-2.4", "e-3.e-1") separates two numeric
    // factors: ".4" is the literal 0.4, a point before another suffix is
    // plain juxtaposition.
    if (c == '.' && !out.empty() && (out.back().kind == Lexeme::Number || out.back().kind == Lexeme::Sci) &&
        i + 1 < text.size()) {
      if (text[i + 1] == 'e') {
        ++i;
        continue;
      }
      if (is_digit(text[i + 1])) {
        std::size_t j = i + 1;
        while (j < text.size() && is_digit(text[j])) ++j;
        lx.kind = Lexeme::Number;
        lx.text = std::string(text.substr(i, j - i));
        lx.value = std::strtod(lx.text.c_str(), nullptr);
        out.push_back(lx);
        i = j;
        continue;
      }
    }
    if (c == 'e' && i + 2 < text.size() && (text[i + 1] == '-' || text[i + 1] == '+') &&
        is_digit(text[i + 2])) {
      // Only the single digit after the sign belongs to the suffix; the
      // grammar's D -> D0..D9 rules append further digits by juxtaposition.
      lx.kind = Lexeme::Sci;
      lx.text = std::string(text.substr(i, 3));
      int k = text[i + 2] - '0';
      lx.value = std::pow(10.0, text[i + 1] == '-' ? -k : k);
      out.push_back(lx);
      i += 3;
      continue;
    }
    bool matched = false;
    for (auto kw : kKeywords) {
      if (text.substr(i, kw.size()) == kw) {
        lx.kind = Lexeme::Ident;
        lx.text = std::string(kw);
        out.push_back(lx);
        i += kw.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (c == '+' || c == '-' || c == '*' || c == '/' || c == '^' || c == '(' || c == ')') {
      lx.kind = Lexeme::Symbol;
      lx.text = std::string(1, c);
      out.push_back(lx);
      ++i;
      continue;
    }
    fail(text, i, "unexpected character");
  }
  Lexeme end;
  end.kind = Lexeme::End;
  end.pos = text.size();
  out.push_back(end);
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

bool numeric_only(const Expr& e) {
  if (!e) return true;
  if (e->op == Op::Var || e->op == Op::Pi || e->op == Op::Param) return false;
  return numeric_only(e->lhs) && numeric_only(e->rhs);
}

double eval_numeric(const Expr& e) {
  switch (e->op) {
    case Op::Const: return e->value;
    case Op::Neg: return -eval_numeric(e->lhs);
    case Op::Add: return eval_numeric(e->lhs) + eval_numeric(e->rhs);
    case Op::Sub: return eval_numeric(e->lhs) - eval_numeric(e->rhs);
    case Op::Mul: return eval_numeric(e->lhs) * eval_numeric(e->rhs);
    case Op::Div: return eval_numeric(e->lhs) / eval_numeric(e->rhs);
    case Op::PowInt: return std::pow(eval_numeric(e->lhs), e->index);
    case Op::Sqrt: return std::sqrt(eval_numeric(e->lhs));
    default: return std::nan("");
  }
}

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text), toks_(lex(text)) {}

  Expr run() {
    Expr e = expr();
    if (peek().kind != Lexeme::End) fail(text_, peek().pos, "trailing input");
    return e;
  }

 private:
  const Lexeme& peek() const { return toks_[pos_]; }
  bool symbol(char c) const {
    return peek().kind == Lexeme::Symbol && peek().text[0] == c;
  }
  void expect(char c) {
    if (!symbol(c)) fail(text_, peek().pos, std::string("expected '") + c + "'");
    ++pos_;
  }

  Expr expr() {
    Expr lhs = term();
    while (symbol('+') || symbol('-')) {
      Op op = symbol('+') ? Op::Add : Op::Sub;
      ++pos_;
      lhs = make_binary(op, lhs, term());
    }
    return lhs;
  }

  Expr term() {
    Expr lhs = unary();
    while (symbol('*') || symbol('/')) {
      Op op = symbol('*') ? Op::Mul : Op::Div;
      ++pos_;
      lhs = make_binary(op, lhs, unary());
    }
    return lhs;
  }

  Expr unary() {
    if (symbol('-')) {
      ++pos_;
      return make_unary(Op::Neg, unary());
    }
    return power();
  }

  Expr power() {
    Expr base = postfix();
    if (!symbol('^')) return base;
    std::size_t at = peek().pos;
    ++pos_;
    Expr ex = unary();
    if (!numeric_only(ex)) fail(text_, at, "non-numeric exponent");
    double v = eval_numeric(ex);
    double n = std::round(v);
    if (std::abs(v - n) < 1e-12 && std::abs(n) < 1e6) {
      int k = static_cast<int>(n);
      if (k >= 0) return make_powi(base, k);
      Expr den = k == -1 ? base : make_powi(base, -k);
      return make_binary(Op::Div, make_const(1.0), den);
    }
    if (std::abs(v - 0.5) < 1e-12) return make_unary(Op::Sqrt, base);
    if (std::abs(v + 0.5) < 1e-12)
      return make_binary(Op::Div, make_const(1.0), make_unary(Op::Sqrt, base));
    fail(text_, at, "unsupported exponent");
  }

  Expr postfix() {
    Expr p = primary();
    while (peek().kind == Lexeme::Number || peek().kind == Lexeme::Sci) {
      p = make_binary(Op::Mul, p, make_const(peek().value));
      ++pos_;
    }
    return p;
  }

  Expr primary() {
    const Lexeme& lx = peek();
    switch (lx.kind) {
      case Lexeme::Number:
      case Lexeme::Sci:
        ++pos_;
        return make_const(lx.value);
      case Lexeme::Ident: {
        std::string name = lx.text;
        ++pos_;
        if (name == "pi") return make_pi();
        if (name == "x") return make_var(Var::X);
        if (name == "y") return make_var(Var::Y);
        if (name == "t") return make_var(Var::T);
        Op op = name == "sin"    ? Op::Sin
                : name == "cos"  ? Op::Cos
                : name == "exp"  ? Op::Exp
                : name == "log"  ? Op::Log
                : name == "tanh" ? Op::Tanh
                                 : Op::Sqrt;
        expect('(');
        Expr arg = expr();
        expect(')');
        return make_unary(op, arg);
      }
      case Lexeme::Symbol:
        if (lx.text[0] == '(') {
          ++pos_;
          Expr inner = expr();
          expect(')');
          return inner;
        }
        break;
      default:
        break;
    }
    fail(text_, lx.pos, "unexpected token");
  }

  std::string_view text_;
  std::vector<Lexeme> toks_;
  std::size_t pos_ = 0;
};

}  // namespace

Expr parse_infix(std::string_view text) { return Parser(text).run(); }

// ---------------------------------------------------------------------------
// Printing

std::string format_number(double v) {
  if (!std::isfinite(v)) throw Error(ErrorCode::NotInLanguage, "non-finite literal");
  if (v == 0.0) return "0";
  char buf[512];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  return std::string(buf, res.ptr);
}

namespace {

int precedence(const Expr& e) {
  switch (e->op) {
    case Op::Add:
    case Op::Sub:
      return 1;
    case Op::Mul:
    case Op::Div:
      return 2;
    case Op::Neg:
      return 3;
    case Op::PowInt:
      return 4;
    case Op::Const:
    case Op::Param:
      return e->value < 0 ? 3 : 5;
    default:
      return 5;
  }
}

bool negative_literal(const Expr& e) {
  return (e->op == Op::Const || e->op == Op::Param) && e->value < 0;
}

void print(const Expr& e, std::string& out);

// True when the printed form starts with a unary minus that is not part of a
// literal.
bool leads_with_negation(const Expr& e) {
  switch (e->op) {
    case Op::Neg:
      return true;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
      return precedence(e->lhs) >= precedence(e) && leads_with_negation(e->lhs);
    default:
      return false;
  }
}

void print_wrapped(const Expr& e, bool parens, std::string& out) {
  if (parens) out += '(';
  print(e, out);
  if (parens) out += ')';
}

void print(const Expr& e, std::string& out) {
  switch (e->op) {
    case Op::Const:
    case Op::Param:
      out += format_number(e->value);
      return;
    case Op::Pi:
      out += "pi";
      return;
    case Op::Var:
      out += "xyt"[e->index];
      return;
    case Op::Neg:
      out += '-';
      print_wrapped(e->lhs, precedence(e->lhs) <= 3, out);
      return;
    case Op::PowInt: {
      bool parens = precedence(e->lhs) < 5 || e->lhs->op == Op::PowInt;
      print_wrapped(e->lhs, parens, out);
      out += '^';
      out += std::to_string(e->index);
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      int p = precedence(e);
      print_wrapped(e->lhs, precedence(e->lhs) < p, out);
      out += e->op == Op::Add ? '+' : e->op == Op::Sub ? '-' : e->op == Op::Mul ? '*' : '/';
      // A bare negative literal is a T on its own; anything else starting with
      // a minus sign needs parentheses to stay in the language.
      bool parens = negative_literal(e->rhs) ? (e->op == Op::Add || e->op == Op::Sub)
                                             : precedence(e->rhs) <= p;
      parens = parens || leads_with_negation(e->rhs);
      print_wrapped(e->rhs, parens, out);
      return;
    }
    default:
      out += function_name(e->op);
      out += '(';
      print(e->lhs, out);
      out += ')';
      return;
  }
}

}  // namespace

std::string to_text(const Expr& e) {
  std::string out;
  print(e, out);
  return out;
}

// ---------------------------------------------------------------------------
// Canonical folding

namespace {

void collect_factors(const Expr& e, std::vector<Expr>& out) {
  if (e->op == Op::Mul) {
    collect_factors(e->lhs, out);
    collect_factors(e->rhs, out);
  } else {
    out.push_back(e);
  }
}

Expr fold_product(const Expr& e) {
  std::vector<Expr> factors;
  collect_factors(e, factors);
  int numeric = 0;
  double prod = 1.0;
  std::vector<Expr> rest;
  for (const auto& f : factors) {
    if (f->op == Op::Const) {
      ++numeric;
      prod *= f->value;
    } else {
      rest.push_back(f);
    }
  }
  if (numeric < 2) return e;
  Expr acc = make_const(prod);
  for (const auto& f : rest) acc = make_binary(Op::Mul, acc, f);
  return acc;
}

}  // namespace

Expr canonical_tree(const Expr& e) {
  if (!e) return e;
  int n = arity(e->op);
  if (n == 0) return e;
  Expr a = canonical_tree(e->lhs);
  Expr b = n == 2 ? canonical_tree(e->rhs) : nullptr;
  switch (e->op) {
    case Op::Neg:
      if (a->op == Op::Const) return make_const(-a->value);
      if (a->op == Op::Neg) return a->lhs;
      return make_unary(Op::Neg, a);
    case Op::Add:
      if (b->op == Op::Neg) return make_binary(Op::Sub, a, b->lhs);
      if (b->op == Op::Const && b->value < 0) return make_binary(Op::Sub, a, make_const(-b->value));
      return make_binary(Op::Add, a, b);
    case Op::Sub:
      if (b->op == Op::Neg) return make_binary(Op::Add, a, b->lhs);
      if (b->op == Op::Const && b->value < 0) return make_binary(Op::Add, a, make_const(-b->value));
      return make_binary(Op::Sub, a, b);
    case Op::Mul:
      return fold_product(make_binary(Op::Mul, a, b));
    case Op::PowInt:
      return make_powi(a, e->index);
    default:
      return n == 2 ? make_binary(e->op, a, b) : make_unary(e->op, a);
  }
}

}  // namespace sigs
