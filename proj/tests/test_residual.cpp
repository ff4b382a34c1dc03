#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "sigs/error.hpp"
#include "sigs/residual.hpp"

using namespace sigs;

TEST_CASE("closed-form solutions have zero residual on their own problems") {
  for (const char* name : {"burgers", "diffusion", "damping_wave", "poisson1", "advection3", "wave2d"}) {
    const PDEProblem& p = builtin_problem(name);
    auto t0 = std::chrono::steady_clock::now();
    auto parts = residual_parts(p.u_true, p);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    INFO(name, " pde=", parts.pde, " ic=", parts.ic, " bc=", parts.bc);
    CHECK_FALSE(parts.flagged);
    CHECK(parts.total < 1e-12);
    CHECK(secs < 5.0);
    CHECK(relative_l2(p.u_true, p) == 0.0);
  }
  CHECK(residual(builtin_problem("burgers").u_true, builtin_problem("burgers")) < 1e-18);
}

TEST_CASE("shock orientation") {
  // Both spellings describe the same profile; the mirrored one does not solve
  // the equation.
  const PDEProblem& p = builtin_problem("burgers");
  Expr physical = parse_infix("0.86-0.6*tanh(30*(x-0.33-0.86*t))");
  Expr mirrored = parse_infix("0.86+0.6*tanh(30*(x-0.33-0.86*t))");
  CHECK(residual(physical, p) < 1e-18);
  CHECK(relative_l2(physical, p) < 1e-14);
  CHECK(residual(mirrored, p) > 1.0);
}

TEST_CASE("zero candidate on diffusion only pays the initial condition") {
  const PDEProblem& p = builtin_problem("diffusion");
  auto parts = residual_parts(make_const(0.0), p);
  double mean_u0 = 0;
  for (double v : p.disc->u0) mean_u0 += v * v;
  mean_u0 /= p.disc->u0.size();
  CHECK(parts.pde == 0.0);
  CHECK(parts.bc < 1e-28);
  CHECK(parts.total == doctest::Approx(p.beta1 * mean_u0).epsilon(1e-12));
}

TEST_CASE("residual grows when any constant is perturbed") {
  for (const char* name : {"burgers", "diffusion"}) {
    const PDEProblem& p = builtin_problem(name);
    auto tmpl = extract_constants(p.u_true);
    double base = residual(p.u_true, p);
    for (int q = 0; q < tmpl.size(); ++q) {
      double prev = base;
      for (double delta : {1e-3, 1e-2, 1e-1}) {
        auto pp = tmpl.p0;
        pp[q] += delta;
        double r = residual(bind_constants(tmpl, pp), p);
        INFO(name, " slot ", q, " delta ", delta);
        CHECK(r > base);
        CHECK(r > prev);
        prev = r;
      }
    }
  }
}

TEST_CASE("catalog layout") {
  const auto& dw = builtin_problem("damping_wave");
  CHECK(dw.disc->interior.size == 64u * 64u * 64u);
  CHECK(dw.disc->ic.size == 64u * 64u);
  CHECK(dw.disc->bc.size == (4u * 64u - 4u) * 64u);
  CHECK_FALSE(dw.disc->v0.empty());

  const auto& b = builtin_problem("burgers");
  CHECK(b.disc->interior.size == 128u * 128u);
  CHECK(b.disc->bc.size == 2u * 128u);

  const auto& pg3 = builtin_problem("pg3");
  const auto& pts = pg3.disc->interior;
  double centers[3][2] = {{0.3, 0.8}, {0.7, 0.2}, {0.5, 0.2}};
  for (std::size_t i = 0; i < pts.size; i += 97) {
    double want = 0;
    for (auto& c : centers) {
      double dx = pts.coord[0][i] - c[0], dy = pts.coord[1][i] - c[1];
      want += std::exp(-(dx * dx + dy * dy) / (2 * 0.1 * 0.1));
    }
    CHECK(pg3.disc->forcing[i] == doctest::Approx(want).epsilon(1e-13));
  }
  CHECK(pg3.disc->u0.empty());
  for (double g : pg3.disc->g) CHECK(g == 0.0);

  const auto& d = builtin_problem("diffusion");
  const double L = 1.397, A = 3.974;
  for (std::size_t i = 0; i < d.disc->ic.size; ++i) {
    double x = d.disc->ic.coord[0][i];
    double k = std::numbers::pi / L;
    double ic = A * (std::sin(k * x) - std::sin(3 * k * x) + std::sin(5 * k * x));
    CHECK(std::abs(d.disc->u0[i] - ic) < 1e-12);
  }
  CHECK_THROWS_AS(builtin_problem("nope"), Error);
}

TEST_CASE("relative L2") {
  std::vector<double> ref{1, 2, 3, -4};
  CHECK(relative_l2(ref, ref) == 0.0);
  std::vector<double> twice{2, 4, 6, -8};
  CHECK(relative_l2(twice, ref) == doctest::Approx(1.0));
  std::vector<double> eps{1 + 1e-6, 2, 3, -4};
  double norm = std::sqrt(1 + 4 + 9 + 16);
  CHECK(relative_l2(eps, ref) == doctest::Approx(1e-6 / norm).epsilon(1e-6));
  std::vector<double> eps3{1 + 3e-6, 2, 3, -4};
  CHECK(relative_l2(eps3, ref) == doctest::Approx(3 * relative_l2(eps, ref)).epsilon(1e-6));
  std::vector<double> zero(4, 0.0);
  CHECK_THROWS_AS(relative_l2(ref, zero), Error);
}

TEST_CASE("residual system matches the scalar residual and finite differences") {
  for (const char* name : {"burgers", "diffusion"}) {
    const PDEProblem& p = builtin_problem(name);
    auto tmpl = extract_constants(p.u_true);
    auto pp = tmpl.p0;
    for (auto& v : pp) v *= 1.03;
    auto sys = residual_system(tmpl, pp, p);
    REQUIRE_FALSE(sys.flagged);
    CHECK(sys.value() == doctest::Approx(residual(bind_constants(tmpl, pp), p)).epsilon(1e-12));
    Eigen::VectorXd grad = 2 * sys.J.transpose() * sys.r;
    for (int q = 0; q < tmpl.size(); ++q) {
      double h = 1e-6 * std::max(1.0, std::abs(pp[q]));
      auto hi = pp, lo = pp;
      hi[q] += h;
      lo[q] -= h;
      double fd = (residual(bind_constants(tmpl, hi), p) - residual(bind_constants(tmpl, lo), p)) / (2 * h);
      INFO(name, " slot ", q);
      CHECK(std::abs(fd - grad[q]) / std::max(std::abs(grad[q]), 1e-8) < 1e-5);
    }
  }
}

TEST_CASE("flagged candidates score infinity") {
  const PDEProblem& p = builtin_problem("diffusion");
  CHECK(std::isinf(residual(parse_infix("log(x)"), p)));
  CHECK(std::isinf(residual(parse_infix("1/(x-0.5*1.397)"), p)) == false);  // grid misses the pole
  CHECK(std::isinf(residual(parse_infix("1/x"), p)));
}

TEST_CASE("problem spec JSON") {
  const char* spec = R"J({
    "name": "heat",
    "domain": {"x": [0, 1.397], "t": [0, 1]},
    "resolution": {"x": 128, "t": 128},
    "operator": [{"coef": 1, "d": {"t": 1}}, {"coef": "-0.697", "d": {"x": 2}}],
    "solution": "3.974*sin(pi*x/1.397)*exp(-0.697*pi^2*t/1.397^2)"
  })J";
  PDEProblem p = problem_from_json(spec);
  CHECK(p.name == "heat");
  CHECK(p.disc->interior.size == 128u * 128u);
  CHECK(residual(p.u_true, p) < 1e-20);
  CHECK_THROWS_AS(problem_from_json("{"), Error);
  CHECK_THROWS_AS(problem_from_json(R"J({"domain": {"q": [0, 1]}, "operator": []})J"), Error);

  const char* forced = R"J({
    "domain": {"x": [0, 1], "y": [0, 1]},
    "resolution": {"x": 32, "y": 32},
    "operator": [{"coef": 1, "d": {"x": 2}}, {"coef": 1, "d": {"y": 2}}],
    "solution": "x^2*y+sin(y)",
    "forcing": "manufactured"
  })J";
  PDEProblem q = problem_from_json(forced);
  CHECK(residual(q.u_true, q) < 1e-24);
  CHECK(residual(parse_infix("x^2*y"), q) > 1e-3);
}

TEST_CASE("reference CSV round trip") {
  auto dir = std::filesystem::temp_directory_path() / "sigs_test_residual";
  std::filesystem::create_directories(dir);
  auto path = (dir / "ref.csv").string();
  PointSet pts = make_grid(linspace(0, 1, 5), linspace(0, 1, 4), {});
  Expr u = parse_infix("sin(pi*x)*y");
  auto vals = eval_grid(u, pts).values[0];
  save_reference_csv(path, pts, vals, "x,y,value");
  auto ref = load_reference_csv(path);
  CHECK(ref.points.size == 20);
  CHECK(ref.values == vals);
  CHECK(relative_l2(parse_infix("sin(pi*x)*y+1e-3*x*y"), ref) > 0.0);
  CHECK(relative_l2(u, ref) == 0.0);
}
