#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "common.hpp"
#include "sigs/error.hpp"
#include "sigs/interp.hpp"

using namespace sigs;

namespace {

double eval_at(const Expr& e, double x, double y = 0.0, double t = 0.0) {
  PointSet p;
  p.size = 1;
  p.coord = {std::vector<double>{x}, std::vector<double>{y}, std::vector<double>{t}};
  return eval_grid(e, p).values[0][0];
}

const char* kTable9[] = {
    "0.86+0.6*tanh(30*(x-0.33-0.86*t))",
    "3.974*sin(pi*x/1.397)*exp(-0.697*pi^2*t/1.397^2)",
    "exp(-0.45*t)*cos(0.4*t-2.5*sqrt((0.2*x+1)^2+(0.2*y-1)^2))",
    "sin(pi*x)*sin(pi*y)*(0.3*exp(-((x-0.3)^2+(y-0.8)^2)/0.02)+0.2*exp(-((x-0.7)^2+(y-0.2)^2)/0.02))",
    "sin(x-t)+sin(y-t)",
};

double eval_numeric_text(const char* text) {
  Expr e = parse_infix(text);
  return eval_grid(e, make_grid({0.0}, {}, {})).values[0][0];
}

}  // namespace

TEST_CASE("interpret basics") {
  CHECK(eval_at(interpret("pi"), 0.0) == std::numbers::pi);
  CHECK(interpret("pi")->op == Op::Pi);
  CHECK(eval_at(interpret("sin(pi*x)"), 0.5) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(interpret("x^4"), Error);
  CHECK_THROWS_AS(interpret("x+"), Error);

  PointSet line = make_grid(linspace(0, 1, 5), {}, {});
  auto r = eval_grid(interpret("x"), line);
  CHECK(r.values[0] == std::vector<double>{0, 0.25, 0.5, 0.75, 1});
  CHECK_FALSE(r.any_flagged());

  auto inv = eval_grid(interpret("1/x"), line);
  CHECK((inv.flags[0] & kFlagDivision) != 0);
  for (int i = 1; i < 5; ++i) CHECK(inv.flags[i] == 0);
  CHECK((eval_grid(interpret("log(x)"), line).flags[0] & kFlagLog) != 0);
  CHECK((eval_grid(interpret("sqrt(x-0.5)"), line).flags[0] & kFlagSqrt) != 0);
}

TEST_CASE("PG-2 form evaluates finitely on the unit square") {
  auto pts = make_grid(linspace(0, 1, 64), linspace(0, 1, 64), {});
  auto r = eval_grid(interpret(kTable9[3]), pts);
  CHECK_FALSE(r.any_flagged());
}

TEST_CASE("diffusion solution at t=0 matches its three-mode initial condition") {
  const char* u = "3.974*(sin(pi*x/1.397)*exp(-0.697*pi^2*t/1.397^2)"
                  "-sin(3*pi*x/1.397)*exp(-6.273*pi^2*t/1.397^2)"
                  "+sin(5*pi*x/1.397)*exp(-17.425*pi^2*t/1.397^2))";
  auto pts = make_grid(linspace(0, 1.397, 128), {}, std::vector<double>{0.0});
  auto a = eval_grid(interpret(u), pts).values[0];
  for (std::size_t i = 0; i < pts.size; ++i) {
    double x = pts.coord[0][i];
    double k = std::numbers::pi / 1.397;
    double ic = 3.974 * (std::sin(k * x) - std::sin(3 * k * x) + std::sin(5 * k * x));
    CHECK(std::abs(a[i] - ic) < 1e-12);
  }
}

TEST_CASE("symbolic derivatives") {
  Expr s = interpret("sin(pi*x)");
  CHECK(to_text(differentiate(s, Var::T)) == "0");
  for (double x : {0.1, 0.37, 0.9})
    CHECK(eval_at(differentiate(s, Var::X), x) ==
          doctest::Approx(std::numbers::pi * std::cos(std::numbers::pi * x)).epsilon(1e-14));

  // second derivative of tanh(kx) against its closed form
  Expr th = interpret("tanh(2.5*x)");
  Expr d2 = differentiate(th, Var::X, 2);
  for (double x : {-0.8, -0.1, 0.0, 0.3, 1.1}) {
    double tk = std::tanh(2.5 * x);
    double want = -2 * 2.5 * 2.5 * tk * (1 - tk * tk);
    CHECK(eval_at(d2, x) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("derivatives agree with central differences at random points") {
  const char* exprs[] = {
      "tanh(3*x-2*t)",
      "sin(pi*x)*exp(-t)*cos(y)",
      "x^3*y-2*y^2/(x+3)",
      "log(x^2+y^2+1)*sqrt(t+2)",
      "exp(-((x-0.3)^2+(y-0.8)^2)/0.02)",
      "cos(0.5*sqrt((x+5)^2+(y-5)^2)-0.4*t)*exp(-0.45*t)",
      "0.86-0.6*tanh(30*(x-0.33-0.86*t))",
      "(x+y)^2*sin(t*x)",
  };
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> U(-0.9, 0.9);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Expr e = interpret(exprs[trial % 8]);
    double p[3] = {U(rng), U(rng), U(rng) + 1.0};
    for (int v = 0; v < 3; ++v) {
      Var var = static_cast<Var>(v);
      Expr d = differentiate(e, var);
      double h = 1e-5;
      double hi[3] = {p[0], p[1], p[2]};
      double lo[3] = {p[0], p[1], p[2]};
      hi[v] += h;
      lo[v] -= h;
      double fd = (eval_at(e, hi[0], hi[1], hi[2]) - eval_at(e, lo[0], lo[1], lo[2])) / (2 * h);
      double sym = eval_at(d, p[0], p[1], p[2]);
      double scale = std::max(1.0, std::abs(sym));
      INFO(exprs[trial % 8], " var ", v);
      // central difference truncation error bounds the comparison, not the
      // symbolic side
      CHECK(std::abs(fd - sym) / scale < 1e-6);
      ++checked;
    }
  }
  CHECK(checked == 300);
}

TEST_CASE("second derivative oracle") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  Expr e = interpret("tanh(4*x)*exp(-x^2)+sin(3*x)/(x^2+2)");
  Expr d2 = differentiate(e, Var::X, 2);
  for (int i = 0; i < 100; ++i) {
    double x = U(rng);
    double h = 1e-4;
    double fd = (eval_at(e, x + h) - 2 * eval_at(e, x) + eval_at(e, x - h)) / (h * h);
    double sym = eval_at(d2, x);
    CHECK(std::abs(fd - sym) / std::max(1.0, std::abs(sym)) < 1e-6);
  }
}

TEST_CASE("constant extraction") {
  auto t = extract_constants(interpret("0.86+0.6*tanh(30*(x-0.33-0.86*t))"));
  CHECK(t.size() == 5);
  CHECK(t.p0 == std::vector<double>{0.86, 0.6, 30, 0.33, 0.86});
  CHECK(extract_constants(interpret("sin(pi*x)")).size() == 0);
  CHECK(extract_constants(interpret("x^3")).size() == 0);
  CHECK_THROWS_AS(bind_constants(t, std::vector<double>{1.0}), Error);

  for (const char* s : kTable9) {
    Expr e = interpret(s);
    auto tmpl = extract_constants(e);
    Expr back = bind_constants(tmpl, tmpl.p0);
    CHECK(equal(back, e));
    CHECK(to_text(back) == to_text(e));
  }
}

TEST_CASE("extract and bind round trip on random trees") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 500; ++i) {
    Expr e = sigs::testing::random_tree(rng, 4);
    auto tmpl = extract_constants(e);
    CHECK(equal(bind_constants(tmpl, tmpl.p0), e));
  }
}

TEST_CASE("parameter gradients") {
  SUBCASE("quadratic objective") {
    auto tmpl = extract_constants(interpret("0"));
    REQUIRE(tmpl.size() == 1);
    PointSet one = make_grid({0.0}, {}, {});
    std::vector<double> p{0.0};
    auto g = grad_constants(tmpl, p, one, [](std::span<const double> u, std::span<double> dj) {
      dj[0] = 2 * (u[0] - 1.0);
      return (u[0] - 1.0) * (u[0] - 1.0);
    });
    CHECK(g == std::vector<double>{-2.0});
  }

  SUBCASE("Burgers template matches central differences") {
    auto tmpl = extract_constants(interpret("0.86+0.6*tanh(30*(x-0.33-0.86*t))"));
    auto pts = make_grid(linspace(-1, 1, 41), {}, linspace(0, 1, 21));
    std::vector<double> target(pts.size);
    for (std::size_t i = 0; i < pts.size; ++i) target[i] = std::sin(pts.coord[0][i]) + pts.coord[2][i];
    auto objective = [&](std::span<const double> u, std::span<double> dj) {
      double j = 0;
      for (std::size_t i = 0; i < u.size(); ++i) {
        double r = u[i] - target[i];
        j += r * r / u.size();
        if (!dj.empty()) dj[i] = 2 * r / u.size();
      }
      return j;
    };
    std::vector<double> p{0.8, 0.5, 7.0, 0.2, 0.9};
    auto g = grad_constants(tmpl, p, pts, objective);
    REQUIRE(g.size() == 5);
    for (int q = 0; q < 5; ++q) {
      double h = 1e-6 * std::max(1.0, std::abs(p[q]));
      auto hi = p, lo = p;
      hi[q] += h;
      lo[q] -= h;
      auto J = [&](const std::vector<double>& pp) {
        auto v = eval_grid(bind_constants(tmpl, pp), pts).values[0];
        return objective(v, {});
      };
      double fd = (J(hi) - J(lo)) / (2 * h);
      CHECK(std::abs(fd - g[q]) / std::max(std::abs(g[q]), 1e-8) < 1e-5);
    }
  }

  SUBCASE("pi never becomes a slot") {
    auto tmpl = extract_constants(interpret("2*sin(pi*x)"));
    CHECK(tmpl.size() == 1);
    PointSet pts = make_grid(linspace(0, 1, 9), {}, {});
    auto g = grad_constants(tmpl, tmpl.p0, pts, [](std::span<const double> u, std::span<double> dj) {
      for (std::size_t i = 0; i < u.size(); ++i) dj[i] = 1.0;
      return 0.0;
    });
    CHECK(g.size() == 1);
  }
}

TEST_CASE("compiled program shares subexpressions and batches outputs") {
  Expr u = interpret("sin(pi*x)*exp(-t)");
  std::vector<Expr> outs{u, differentiate(u, Var::T), differentiate(u, Var::X, 2)};
  Program prog = Program::compile(outs);
  std::size_t separate = 0;
  for (const auto& e : outs) separate += node_count(e);
  CHECK(prog.size() < separate);
  auto pts = make_grid(linspace(0, 1, 300), {}, linspace(0, 1, 3));
  auto r = prog.run(pts);
  for (std::size_t i = 0; i < pts.size; ++i) {
    CHECK(r.values[1][i] == doctest::Approx(-r.values[0][i]).epsilon(1e-14));
    CHECK(r.values[2][i] ==
          doctest::Approx(-std::numbers::pi * std::numbers::pi * r.values[0][i]).epsilon(1e-12));
  }
  PointSet no_t = make_grid(linspace(0, 1, 3), {}, {});
  CHECK_THROWS_AS(prog.run(no_t), Error);
}

TEST_CASE("points next to scale suffixes") {
  // D . D where a part opens with a suffix: the point joins numeric factors
  CHECK(eval_numeric_text("1.e-3") == 1e-3);
  CHECK(eval_numeric_text("e-2.4") == 0.01 * 0.4);
  CHECK(eval_numeric_text("e-3.e-1") == 1e-3 * 1e-1);
  CHECK(eval_numeric_text("2.5") == 2.5);
  CHECK_THROWS_AS(parse_infix("x.5"), Error);
}
