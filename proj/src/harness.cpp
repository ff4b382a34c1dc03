#include "sigs/harness.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <json.hpp>
#include <set>

#include "sigs/error.hpp"
#include "sigs/util.hpp"

namespace sigs {

using nlohmann::json;

namespace {

json parse_object(const std::string& text, const char* what) {
  json j;
  try {
    j = text.empty() ? json::object() : json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, fmt::format("{}: {}", what, e.what()));
  }
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, fmt::format("{} must be an object", what));
  return j;
}

void check_keys(const json& j, const std::set<std::string>& keys, const char* what) {
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw Error(ErrorCode::InvalidConfig, fmt::format("unknown {} key '{}'", what, k));
}

// inf and nan have no JSON spelling
json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json incumbent_json(const Incumbent& inc) {
  json j{{"residual", num(inc.residual)}, {"clusters", inc.clusters}, {"components", inc.components}};
  json amps = json::array();
  for (double a : inc.amplitudes) amps.push_back(num(a));
  j["amplitudes"] = amps;
  return j;
}

}  // namespace

TrainConfig train_config_from_json(const std::string& json_text) {
  json j = parse_object(json_text, "train config");
  check_keys(j,
             {"lr", "weight_decay", "batch", "recon_scale", "epochs", "patience", "beta0", "warmup", "topo",
              "activation_acc", "ramp_epochs", "topo_every", "val_topo_every", "w_hull", "w_ph", "w_smooth",
              "hull_directions", "ph_max_points", "ph_a0", "ph_radii", "delta", "smooth_probes", "plateau_factor",
              "plateau_patience", "clip_norm", "seed", "hidden", "latent"},
             "train config");
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch = j.value("batch", c.batch);
    c.recon_scale = j.value("recon_scale", c.recon_scale);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.beta0 = j.value("beta0", c.beta0);
    c.warmup = j.value("warmup", c.warmup);
    c.topo = j.value("topo", c.topo);
    c.activation_acc = j.value("activation_acc", c.activation_acc);
    c.ramp_epochs = j.value("ramp_epochs", c.ramp_epochs);
    c.topo_every = j.value("topo_every", c.topo_every);
    c.val_topo_every = j.value("val_topo_every", c.val_topo_every);
    c.w_hull = j.value("w_hull", c.w_hull);
    c.w_ph = j.value("w_ph", c.w_ph);
    c.w_smooth = j.value("w_smooth", c.w_smooth);
    c.hull_directions = j.value("hull_directions", c.hull_directions);
    c.ph_max_points = j.value("ph_max_points", c.ph_max_points);
    c.ph_a0 = j.value("ph_a0", c.ph_a0);
    c.ph_radii = j.value("ph_radii", c.ph_radii);
    c.delta = j.value("delta", c.delta);
    c.smooth_probes = j.value("smooth_probes", c.smooth_probes);
    c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.hidden = j.value("hidden", c.hidden);
    c.latent = j.value("latent", c.latent);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("train config: ") + e.what());
  }
  if (!(c.lr > 0) || c.batch < 1 || c.epochs < 0 || c.patience < 1 || c.hidden < 1 || c.latent < 1 ||
      c.topo_every < 1 || c.hull_directions < 1 || c.ph_max_points < 2)
    throw Error(ErrorCode::InvalidConfig, "train config values out of range");
  return c;
}

std::string to_json(const TrainConfig& c) {
  json j{{"lr", c.lr},
         {"weight_decay", c.weight_decay},
         {"batch", c.batch},
         {"recon_scale", c.recon_scale},
         {"epochs", c.epochs},
         {"patience", c.patience},
         {"beta0", c.beta0},
         {"warmup", c.warmup},
         {"topo", c.topo},
         {"activation_acc", c.activation_acc},
         {"ramp_epochs", c.ramp_epochs},
         {"topo_every", c.topo_every},
         {"val_topo_every", c.val_topo_every},
         {"w_hull", c.w_hull},
         {"w_ph", c.w_ph},
         {"w_smooth", c.w_smooth},
         {"hull_directions", c.hull_directions},
         {"ph_max_points", c.ph_max_points},
         {"ph_a0", c.ph_a0},
         {"ph_radii", c.ph_radii},
         {"delta", c.delta},
         {"smooth_probes", c.smooth_probes},
         {"plateau_factor", c.plateau_factor},
         {"plateau_patience", c.plateau_patience},
         {"clip_norm", c.clip_norm},
         {"seed", c.seed},
         {"hidden", c.hidden},
         {"latent", c.latent}};
  return j.dump();
}

RunConfig run_config_from_json(const std::string& json_text) {
  json j = parse_object(json_text, "run config");
  check_keys(j, {"search", "train", "ablation", "race"}, "run config");
  RunConfig c;
  if (j.contains("search")) c.search = search_config_from_json(j["search"].dump());
  if (j.contains("train")) c.train = train_config_from_json(j["train"].dump());
  try {
    if (j.contains("ablation")) {
      const json& a = j["ablation"];
      check_keys(a, {"samples", "atom_samples"}, "ablation config");
      c.ablation_samples = a.value("samples", c.ablation_samples);
      c.ablation_atom_samples = a.value("atom_samples", c.ablation_atom_samples);
    }
    if (j.contains("race")) {
      const json& r = j["race"];
      check_keys(r, {"k", "splits", "pool", "tau", "seed"}, "race config");
      c.race.k = r.value("k", c.race.k);
      c.race.splits = r.value("splits", c.race.splits);
      c.race.pool = r.value("pool", c.race.pool);
      c.race.tau = r.value("tau", c.race.tau);
      c.race.seed = r.value("seed", c.race.seed);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("run config: ") + e.what());
  }
  if (c.ablation_samples < 1 || c.ablation_atom_samples < 0 || c.race.k < 1 || c.race.splits < 1 ||
      c.race.pool < c.race.k)
    throw Error(ErrorCode::InvalidConfig, "run config values out of range");
  return c;
}

std::string config_hash(const std::string& canonical_json) { return sha256_hex(canonical_json); }

RunReport discover(const AtomLibrary& lib, const std::string& ansatz, const PDEProblem& prob,
                   const ModelParams& model, const Grammar& g, const SearchConfig& cfg,
                   const ReferenceGrid* reference) {
  RunReport r;
  r.problem = prob.name;
  r.ansatz = ansatz;
  r.search_seed = cfg.seed;
  Ansatz a = Ansatz::parse(ansatz);
  r.search = run_search(lib, a, prob, model, g, cfg);
  r.expression = r.search.expression;
  r.residual = r.search.residual;
  Expr u = parse_infix(r.expression);
  if (reference) {
    r.rel_l2 = relative_l2(u, *reference);
    r.rel_l2_kind = "reference";
  } else if (prob.u_true) {
    r.rel_l2 = relative_l2(u, prob);
    r.rel_l2_kind = "analytical";
  }
  r.seconds_total = r.search.seconds_stage0 + r.search.seconds_stage1 + r.search.seconds_stage2;
  return r;
}

std::string report_json(const RunReport& r, bool with_timing) {
  const SearchResult& s = r.search;
  json starts = json::array();
  for (double v : s.refined.start_residuals) starts.push_back(num(v));
  json trace = json::array();
  for (const auto& t : s.trace)
    trace.push_back({{"stage", t.stage}, {"iter", t.iter}, {"evaluated", t.evaluated}, {"finite", t.finite},
                     {"best", num(t.best)}});
  json j{{"problem", r.problem},
         {"ansatz", r.ansatz},
         {"expression", r.expression},
         {"residual", num(r.residual)},
         {"rel_l2", r.rel_l2 ? num(*r.rel_l2) : json(nullptr)},
         {"rel_l2_kind", r.rel_l2_kind},
         {"seeds", {{"search", r.search_seed}, {"train", r.train_seed}}},
         {"config_hash", r.config_hash},
         {"config", r.config.empty() ? json::object() : json::parse(r.config)},
         {"stages",
          {{"stage0", incumbent_json(s.stage0)},
           {"stage1", incumbent_json(s.stage1)},
           {"stage2",
            {{"residual", num(s.refined.residual)},
             {"starts_ok", s.refined.starts_ok},
             {"start_residuals", starts},
             {"hull_penalty", num(s.refined.hull_penalty)}}}}},
         {"evaluated", s.evaluated},
         {"decode_mismatch", s.decode_mismatch},
         {"trace", trace}};
  if (with_timing)
    j["timing"] = {{"train", r.seconds_train},
                   {"stage0", s.seconds_stage0},
                   {"stage1", s.seconds_stage1},
                   {"stage2", s.seconds_stage2},
                   {"total", r.seconds_total}};
  return j.dump(2) + "\n";
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "stage,iter,evaluated,finite,best\n";
  for (const auto& t : trace) out += fmt::format("{},{},{},{},{:.17g}\n", t.stage, t.iter, t.evaluated, t.finite, t.best);
  return out;
}

std::array<int, 3> reporting_resolution(const PDEProblem& p) {
  if (p.name.rfind("pg", 0) == 0) return {400, 400, 0};
  return p.resolution;
}

PointSet reporting_grid(const PDEProblem& p, std::optional<std::array<int, 3>> resolution) {
  auto res = resolution ? *resolution : reporting_resolution(p);
  std::array<std::vector<double>, 3> axes;
  for (int i = 0; i < 3; ++i) {
    if (!(p.vars & (1u << i))) continue;
    if (res[i] < 2) throw Error(ErrorCode::InvalidProblem, "grid needs at least two points per axis");
    axes[i] = linspace(p.lo[i], p.hi[i], res[i]);
  }
  return make_grid(axes[0], axes[1], axes[2]);
}

std::string grid_header(const PDEProblem& p) {
  std::string h;
  for (int i = 0; i < 3; ++i)
    if (p.vars & (1u << i)) h += std::string(1, "xyt"[i]) + ",";
  return h + "value";
}

void emit_grid(const Expr& e, const PDEProblem& p, const std::string& path,
               std::optional<std::array<int, 3>> resolution) {
  PointSet pts = reporting_grid(p, resolution);
  auto r = eval_grid(e, pts);
  save_reference_csv(path, pts, r.values[0], grid_header(p));
}

AtomLibrary load_or_build_library(const std::string& path, const Grammar& g) {
  std::string text = read_file(path);
  auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') return build_library(text, g);
  return AtomLibrary::deserialize(text, g);
}

std::vector<Recipe> load_recipes(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
  std::vector<Recipe> out;
  auto base = std::filesystem::path(path).parent_path();
  try {
    for (const auto& [name, r] : j.items()) {
      Recipe rec;
      rec.problem = name;
      std::filesystem::path lib = r.at("library").get<std::string>();
      rec.library = (lib.is_absolute() ? lib : base / lib).string();
      rec.ansatz = r.at("ansatz").get<std::string>();
      rec.config = r.value("config", json::object()).dump();
      out.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
  return out;
}

}  // namespace sigs
