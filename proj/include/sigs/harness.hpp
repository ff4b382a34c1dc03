#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sigs/atoms.hpp"
#include "sigs/residual.hpp"
#include "sigs/search.hpp"
#include "sigs/tgvae.hpp"

namespace sigs {

TrainConfig train_config_from_json(const std::string& json_text);
std::string to_json(const TrainConfig& cfg);

// Everything a discovery run depends on besides the data files.
struct RunConfig {
  SearchConfig search;
  TrainConfig train;
  int ablation_samples = 50000;
  int ablation_atom_samples = 1000;
  RaceConfig race;
};

// {"search": {...}, "train": {...}, "ablation": {...}, "race": {...}}; all
// sections optional.
RunConfig run_config_from_json(const std::string& json_text);

// SHA-256 over the canonical (sorted-key, compact) JSON text.
std::string config_hash(const std::string& canonical_json);

struct RunReport {
  std::string problem;
  std::string ansatz;
  std::string expression;
  double residual = 0;
  std::optional<double> rel_l2;
  std::string rel_l2_kind = "none";  // analytical, reference or none
  std::uint64_t search_seed = 0, train_seed = 0;
  std::string config_hash;
  std::string config;  // canonical JSON the hash was taken over
  SearchResult search;
  double seconds_train = 0;
  double seconds_total = 0;
};

// Stage 0 -> II on a trained model; rel_l2 against the reference grid when
// given, otherwise against the closed form when the problem has one.
RunReport discover(const AtomLibrary& lib, const std::string& ansatz, const PDEProblem& prob,
                   const ModelParams& model, const Grammar& g, const SearchConfig& cfg,
                   const ReferenceGrid* reference = nullptr);

// Timing lives under "timing" so that it can be dropped for comparisons.
std::string report_json(const RunReport& r, bool with_timing = true);
std::string trace_csv(const std::vector<TraceRow>& trace);

// Grid used for plots: 400 x 400 for the Poisson-Gauss problems, the residual
// grid otherwise.
std::array<int, 3> reporting_resolution(const PDEProblem& p);
PointSet reporting_grid(const PDEProblem& p, std::optional<std::array<int, 3>> resolution = std::nullopt);

// "x,t,value" / "x,y,value" / "x,y,t,value" CSV, x fastest.
std::string grid_header(const PDEProblem& p);
void emit_grid(const Expr& e, const PDEProblem& p, const std::string& path,
               std::optional<std::array<int, 3>> resolution = std::nullopt);

// Library from either a built library file or a build config (JSON with
// "families").
AtomLibrary load_or_build_library(const std::string& path, const Grammar& g);

// Default library, ansatz and seeds per built-in problem (data/recipes.json).
struct Recipe {
  std::string problem;
  std::string library;  // path, relative paths resolved against the data dir
  std::string ansatz;
  std::string config;   // run config JSON text
};
std::vector<Recipe> load_recipes(const std::string& path);

// Entry point of the sigs tool. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sigs
