#include <fmt/format.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "sigs/error.hpp"
#include "sigs/harness.hpp"
#include "sigs/util.hpp"

namespace sigs {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kUsage =
    "usage: sigs <command> [options]\n"
    "commands:\n"
    "  build-library  --config <build json> --out <dir>\n"
    "  train          --library <file> [--config <json>] [--seed N] --out <dir>\n"
    "  search         --problem <name> | --problem-spec <json>  [--ansatz <text>] [--library <file>]\n"
    "                 [--checkpoint <file>] [--config <json>] [--seed N] [--reference <csv>] [--workers N] --out <dir>\n"
    "  bench          [--problem <name>] [--seed N] [--workers N] --out <dir>\n"
    "  race           [--library <file>] [--config <json>] [--seed N] --out <dir>\n"
    "  ablate-atoms   --problem <name> --ansatz <text> [--library <file>] [--config <json>] [--seed N] --out <dir>\n"
    "  eval-expr      --problem <name> | --problem-spec <json>  --expr <text|file> [--reference <csv>]\n"
    "  emit-grid      --problem <name> | --problem-spec <json>  --expr <text|file> --out <csv> [--resolution NxM]\n"
    "Environment: SIGS_WORKERS (default for --workers), SIGS_DATA_DIR (grammar, libraries, recipes).\n";

const std::vector<std::string> kCommands{"build-library", "train", "search", "bench",
                                         "race", "ablate-atoms", "eval-expr", "emit-grid"};

struct Options {
  std::string problem, problem_spec, ansatz, library, checkpoint, config, out, reference, expr, resolution;
  std::optional<std::uint64_t> seed;
  int workers = 1;
};

std::string data_dir() {
  if (const char* d = std::getenv("SIGS_DATA_DIR"); d && *d) return d;
  return SIGS_DATA_DIR;
}

// Flags taking JSON accept either a path or the JSON text itself.
std::string file_or_text(const std::string& v) {
  if (v.empty()) return v;
  std::error_code ec;
  if (fs::is_regular_file(v, ec)) return read_file(v);
  return v;
}

std::string hash_file(const std::string& path) { return sha256_hex(read_file(path)); }

Grammar load_reference_grammar() { return Grammar::load_file(data_dir() + "/grammar.txt"); }

PDEProblem resolve_problem(const Options& o) {
  if (!o.problem_spec.empty()) return problem_from_json(file_or_text(o.problem_spec));
  if (o.problem.empty()) throw Error(ErrorCode::InvalidProblem, "--problem or --problem-spec is required");
  return builtin_problem(o.problem);
}

void require(const std::string& v, const char* flag) {
  if (v.empty()) throw Error(ErrorCode::InvalidConfig, fmt::format("{} is required", flag));
}

fs::path out_dir(const Options& o) {
  fs::path d = o.out.empty() ? fs::path(".") : fs::path(o.out);
  fs::create_directories(d);
  return d;
}

std::vector<RuleSequence> sequences(const AtomLibrary& lib) {
  std::vector<RuleSequence> data;
  data.reserve(lib.size());
  for (const auto& e : lib.entries()) data.push_back(e.seq);
  return data;
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_build_library(const Options& o, std::ostream& out) {
  require(o.config, "--config");
  Grammar g = load_reference_grammar();
  LibraryStats stats;
  AtomLibrary lib = build_library(file_or_text(o.config), g, &stats);
  fs::path dir = out_dir(o);
  lib.save((dir / "library.tsv").string());
  json j{{"size", lib.size()},
         {"generated", stats.generated},
         {"rejected", stats.rejected},
         {"duplicates", stats.duplicates},
         {"config_hash", config_hash(json::parse(file_or_text(o.config)).dump())}};
  write_file_atomic(dir / "library_stats.json", j.dump(2) + "\n");
  out << j.dump() << "\n";
  return 0;
}

struct Trained {
  TrainResult result;
  double seconds = 0;
};

Trained train_model(const AtomLibrary& lib, const Grammar& g, const TrainConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  Trained t{train(sequences(lib), g, cfg), 0};
  t.seconds = seconds_since(t0);
  return t;
}

json train_summary(const Trained& t, const std::vector<RuleSequence>& data, const Grammar& g) {
  const auto& r = t.result;
  return {{"epochs_run", r.epochs_run},
          {"activation_epoch", r.activation_epoch ? json(*r.activation_epoch) : json(nullptr)},
          {"train_acc", seq_exact_accuracy(data, r.train_idx, r.params, g)},
          {"val_acc", seq_exact_accuracy(data, r.val_idx, r.params, g)},
          {"test_acc", seq_exact_accuracy(data, r.test_idx, r.params, g)},
          {"best_val_elbo", r.best_val_elbo},
          {"seconds", t.seconds}};
}

int cmd_train(const Options& o, std::ostream& out) {
  require(o.library, "--library");
  Grammar g = load_reference_grammar();
  RunConfig rc = run_config_from_json(file_or_text(o.config));
  if (o.seed) rc.train.seed = *o.seed;
  AtomLibrary lib = load_or_build_library(o.library, g);
  Trained t = train_model(lib, g, rc.train);
  fs::path dir = out_dir(o);
  save_checkpoint((dir / "model.ckpt").string(), t.result.params, g);
  write_file_atomic(dir / "train_log.csv", train_log_csv(t.result.log));
  json canon{{"library_sha256", hash_file(o.library)}, {"train", json::parse(to_json(rc.train))}};
  json j = train_summary(t, sequences(lib), g);
  j["config_hash"] = config_hash(canon.dump());
  j["config"] = canon;
  write_file_atomic(dir / "train.json", j.dump(2) + "\n");
  out << j.dump() << "\n";
  return 0;
}

struct SearchJob {
  PDEProblem problem;
  std::string problem_key;  // name, or hash of the spec
  std::string ansatz;
  std::string library;
  std::string checkpoint;
  std::string reference;
  RunConfig cfg;
  int workers = 1;
  fs::path dir;
};

RunReport run_job(const SearchJob& job, std::ostream& out) {
  Grammar g = load_reference_grammar();
  AtomLibrary lib = load_or_build_library(job.library, g);
  json canon{{"problem", job.problem_key},
             {"ansatz", job.ansatz},
             {"library_sha256", hash_file(job.library)},
             {"search", json::parse(to_json(job.cfg.search))}};
  ModelParams model;
  double train_secs = 0;
  std::uint64_t train_seed = job.cfg.train.seed;
  if (!job.checkpoint.empty()) {
    model = load_checkpoint(job.checkpoint, g);
    canon["checkpoint_sha256"] = hash_file(job.checkpoint);
  } else {
    Trained t = train_model(lib, g, job.cfg.train);
    train_secs = t.seconds;
    model = std::move(t.result.params);
    canon["train"] = json::parse(to_json(job.cfg.train));
    save_checkpoint((job.dir / "model.ckpt").string(), model, g);
    write_file_atomic(job.dir / "train_log.csv", train_log_csv(t.result.log));
  }
  std::optional<ReferenceGrid> ref;
  if (!job.reference.empty()) {
    ref = load_reference_csv(job.reference);
    canon["reference_sha256"] = hash_file(job.reference);
  }
  SearchConfig sc = job.cfg.search;
  sc.workers = job.workers;
  RunReport r = discover(lib, job.ansatz, job.problem, model, g, sc, ref ? &*ref : nullptr);
  r.train_seed = job.checkpoint.empty() ? train_seed : 0;
  r.config = canon.dump();
  r.config_hash = config_hash(r.config);
  r.seconds_train = train_secs;
  r.seconds_total += train_secs;
  write_file_atomic(job.dir / "report.json", report_json(r));
  write_file_atomic(job.dir / "trace.csv", trace_csv(r.search.trace));
  write_file_atomic(job.dir / "expression.txt", r.expression + "\n");
  json line{{"problem", r.problem}, {"expression", r.expression}, {"residual", r.residual},
            {"rel_l2", r.rel_l2 ? json(*r.rel_l2) : json(nullptr)}, {"seconds", r.seconds_total}};
  out << line.dump() << "\n";
  return r;
}

const Recipe* find_recipe(const std::vector<Recipe>& recipes, const std::string& problem) {
  for (const auto& r : recipes)
    if (r.problem == problem) return &r;
  return nullptr;
}

int cmd_search(const Options& o, std::ostream& out) {
  SearchJob job;
  job.problem = resolve_problem(o);
  job.problem_key = o.problem_spec.empty() ? job.problem.name : "spec:" + sha256_hex(file_or_text(o.problem_spec));
  auto recipes = load_recipes(data_dir() + "/recipes.json");
  const Recipe* rec = o.problem_spec.empty() ? find_recipe(recipes, o.problem) : nullptr;
  job.ansatz = !o.ansatz.empty() ? o.ansatz : rec ? rec->ansatz : "";
  job.library = !o.library.empty() ? o.library : rec ? rec->library : "";
  require(job.ansatz, "--ansatz");
  require(job.library, "--library");
  job.cfg = run_config_from_json(!o.config.empty() ? file_or_text(o.config) : rec ? rec->config : "");
  if (o.seed) job.cfg.search.seed = *o.seed;
  job.checkpoint = o.checkpoint;
  job.reference = o.reference;
  job.workers = o.workers;
  job.dir = out_dir(o);
  run_job(job, out);
  return 0;
}

int cmd_bench(const Options& o, std::ostream& out) {
  auto recipes = load_recipes(data_dir() + "/recipes.json");
  fs::path dir = out_dir(o);
  json summary = json::object();
  for (const auto& [name, prob] : builtin_problems()) {
    if (!o.problem.empty() && name != o.problem) continue;
    const Recipe* rec = find_recipe(recipes, name);
    if (!rec) {
      summary[name] = {{"status", "no recipe"}};
      continue;
    }
    SearchJob job;
    job.problem = prob;
    job.problem_key = name;
    job.ansatz = rec->ansatz;
    job.library = rec->library;
    job.cfg = run_config_from_json(rec->config);
    if (o.seed) job.cfg.search.seed = *o.seed;
    job.workers = o.workers;
    job.dir = dir / name;
    fs::create_directories(job.dir);
    RunReport r = run_job(job, out);
    summary[name] = {{"status", "ok"},
                     {"expression", r.expression},
                     {"residual", r.residual},
                     {"rel_l2", r.rel_l2 ? json(*r.rel_l2) : json(nullptr)},
                     {"rel_l2_kind", r.rel_l2_kind},
                     {"config_hash", r.config_hash},
                     {"seconds", r.seconds_total}};
  }
  write_file_atomic(dir / "bench.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_race(const Options& o, std::ostream& out) {
  Grammar g = load_reference_grammar();
  std::string lib_path = o.library.empty() ? data_dir() + "/libraries/toy.json" : o.library;
  RunConfig rc = run_config_from_json(file_or_text(o.config));
  if (o.seed) rc.race.seed = *o.seed;
  AtomLibrary lib = load_or_build_library(lib_path, g);
  auto data = sequences(lib);
  TrainConfig tc = rc.train;
  tc.topo = true;
  Trained topo = train_model(lib, g, tc);
  tc.topo = false;
  Trained vanilla = train_model(lib, g, tc);
  MahalanobisFilter fa(training_means(topo.result.params, data, topo.result.train_idx), rc.race.tau);
  MahalanobisFilter fb(training_means(vanilla.result.params, data, vanilla.result.train_idx), rc.race.tau);
  auto t0 = std::chrono::steady_clock::now();
  RaceResult r = race_to_k_valid([&](const Eigen::VectorXd& z) { return decode(z, topo.result.params, g); },
                                 [&](const Eigen::VectorXd& z) { return decode(z, vanilla.result.params, g); }, g,
                                 {&fa, &fb}, tc.latent, rc.race);
  double race_secs = seconds_since(t0);
  fs::path dir = out_dir(o);
  std::string csv = "split,attempts_topo,attempts_vanilla,reduction_pct\n";
  for (std::size_t s = 0; s < r.reduction.size(); ++s)
    csv += fmt::format("{},{},{},{:.17g}\n", s, r.attempts_a[s], r.attempts_b[s], r.reduction[s]);
  write_file_atomic(dir / "race.csv", csv);
  json canon{{"library_sha256", hash_file(lib_path)},
             {"train", json::parse(to_json(rc.train))},
             {"race", {{"k", rc.race.k}, {"splits", rc.race.splits}, {"pool", rc.race.pool}, {"tau", rc.race.tau},
                       {"seed", rc.race.seed}}}};
  json j{{"attempts_topo", r.attempts_a},
         {"attempts_vanilla", r.attempts_b},
         {"reduction_pct", r.reduction},
         {"mean_reduction_pct", mean(r.reduction)},
         {"std_reduction_pct", stddev(r.reduction)},
         {"sampled", r.sampled},
         {"topo_model", train_summary(topo, data, g)},
         {"vanilla_model", train_summary(vanilla, data, g)},
         {"config", canon},
         {"config_hash", config_hash(canon.dump())},
         {"timing", {{"race", race_secs}}}};
  write_file_atomic(dir / "race.json", j.dump(2) + "\n");
  out << csv;
  out << fmt::format("mean reduction {:.3f}% +- {:.3f}\n", mean(r.reduction), stddev(r.reduction));
  return 0;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  require(o.ansatz, "--ansatz");
  Grammar g = load_reference_grammar();
  PDEProblem prob = resolve_problem(o);
  RunConfig rc = run_config_from_json(file_or_text(o.config));
  std::uint64_t seed = o.seed.value_or(1);
  Ansatz a = Ansatz::parse(o.ansatz);
  std::vector<ComponentLibrary> libs;
  json canon{{"problem", prob.name}, {"ansatz", o.ansatz}, {"samples", rc.ablation_samples},
             {"atom_samples", rc.ablation_atom_samples}, {"seed", seed}};
  if (!o.library.empty()) {
    AtomLibrary lib = load_or_build_library(o.library, g);
    canon["library_sha256"] = hash_file(o.library);
    // latents are not used by the ablation; a fresh model keeps the library filter cheap
    ModelParams m = ModelParams::init({g.rule_count(), g.max_len(), 16, 4}, seed);
    TagCache cache(lib);
    for (const auto& s : a.slots()) libs.push_back(filter_component_library(lib, s, m, &cache));
  }
  AblationResult r = atoms_vs_primitives_ablation(g, a, prob, rc.ablation_samples, seed, libs.empty() ? nullptr : &libs,
                                                  rc.ablation_atom_samples);
  json j{{"samples", r.samples},
         {"admissible", r.admissible},
         {"rate", r.rate()},
         {"atom_samples", r.atom_samples},
         {"atom_admissible", r.atom_admissible},
         {"atom_rate", libs.empty() ? json(nullptr) : json(r.atom_rate())},
         {"best_residual", num_or_null(r.best_residual)},
         {"best_expression", r.best_expression},
         {"config", canon},
         {"config_hash", config_hash(canon.dump())}};
  write_file_atomic(out_dir(o) / "ablation.json", j.dump(2) + "\n");
  out << j.dump() << "\n";
  return 0;
}

Expr resolve_expr(const Options& o) {
  require(o.expr, "--expr");
  std::string text = file_or_text(o.expr);
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.pop_back();
  return parse_infix(text);
}

int cmd_eval(const Options& o, std::ostream& out) {
  PDEProblem prob = resolve_problem(o);
  Expr u = resolve_expr(o);
  ResidualParts parts = residual_parts(u, prob);
  json j{{"problem", prob.name},
         {"expression", to_text(u)},
         {"residual", num_or_null(parts.total)},
         {"parts", {{"pde", num_or_null(parts.pde)}, {"ic", num_or_null(parts.ic)}, {"bc", num_or_null(parts.bc)}}},
         {"flagged", parts.flagged}};
  if (!o.reference.empty()) {
    j["rel_l2"] = num_or_null(relative_l2(u, load_reference_csv(o.reference)));
    j["rel_l2_kind"] = "reference";
  } else if (prob.u_true) {
    j["rel_l2"] = num_or_null(relative_l2(u, prob));
    j["rel_l2_kind"] = "analytical";
  } else {
    j["rel_l2"] = nullptr;
    j["rel_l2_kind"] = "none";
  }
  if (!o.out.empty()) write_file_atomic(out_dir(o) / "eval.json", j.dump(2) + "\n");
  out << j.dump() << "\n";
  return 0;
}

int cmd_emit_grid(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  PDEProblem prob = resolve_problem(o);
  Expr u = resolve_expr(o);
  std::optional<std::array<int, 3>> res;
  if (!o.resolution.empty()) {
    std::array<int, 3> r{0, 0, 0};
    std::vector<int> dims;
    std::stringstream ss(o.resolution);
    std::string part;
    try {
      while (std::getline(ss, part, 'x')) dims.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidConfig, "--resolution expects NxM");
    }
    int k = 0;
    for (int i = 0; i < 3; ++i)
      if (prob.vars & (1u << i)) r[i] = k < static_cast<int>(dims.size()) ? dims[k++] : 0;
    if (k != static_cast<int>(dims.size())) throw Error(ErrorCode::InvalidConfig, "--resolution has too many axes");
    res = r;
  }
  fs::path path = o.out;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  emit_grid(u, prob, path.string(), res);
  out << path.string() << "\n";
  return 0;
}

void error_json(std::ostream& err, std::string_view code, const std::string& message) {
  err << json{{"error", code}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty() || std::find(kCommands.begin(), kCommands.end(), args[0]) == kCommands.end()) {
    if (!args.empty() && (args[0] == "-h" || args[0] == "--help")) {
      out << kUsage;
      return 0;
    }
    err << kUsage;
    error_json(err, "UnknownCommand", args.empty() ? "no command given" : "unknown command '" + args[0] + "'");
    return 2;
  }
  const std::string& cmd = args[0];
  Options o;
  if (const char* w = std::getenv("SIGS_WORKERS"); w && *w) {
    try {
      o.workers = std::stoi(w);
    } catch (const std::exception&) {
      error_json(err, "InvalidConfig", "SIGS_WORKERS must be an integer");
      return 2;
    }
  }
  CLI::App app{"sigs " + cmd, "sigs " + cmd};
  app.add_option("--problem", o.problem);
  app.add_option("--problem-spec", o.problem_spec);
  app.add_option("--ansatz", o.ansatz);
  app.add_option("--library", o.library);
  app.add_option("--checkpoint", o.checkpoint);
  app.add_option("--config", o.config);
  app.add_option("--out", o.out);
  app.add_option("--reference", o.reference);
  app.add_option("--expr", o.expr);
  app.add_option("--resolution", o.resolution);
  app.add_option("--seed", o.seed);
  app.add_option("--workers", o.workers)->check(CLI::PositiveNumber);
  std::vector<std::string> rest(args.begin() + 1, args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help() << kUsage;
    return 0;
  } catch (const CLI::ParseError& e) {
    err << kUsage;
    error_json(err, "InvalidArguments", e.what());
    return 2;
  }
  try {
    if (cmd == "build-library") return cmd_build_library(o, out);
    if (cmd == "train") return cmd_train(o, out);
    if (cmd == "search") return cmd_search(o, out);
    if (cmd == "bench") return cmd_bench(o, out);
    if (cmd == "race") return cmd_race(o, out);
    if (cmd == "ablate-atoms") return cmd_ablate(o, out);
    if (cmd == "eval-expr") return cmd_eval(o, out);
    return cmd_emit_grid(o, out);
  } catch (const Error& e) {
    error_json(err, to_string(e.code()), e.what());
  } catch (const fs::filesystem_error& e) {
    error_json(err, "Io", e.what());
  } catch (const std::exception& e) {
    error_json(err, "Internal", e.what());
  }
  return 1;
}

}  // namespace sigs
