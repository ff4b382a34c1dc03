#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sigs {

using RuleSequence = std::vector<int>;

struct Symbol {
  bool terminal = false;
  int id = 0;
  bool operator==(const Symbol&) const = default;
};

struct Rule {
  int lhs = -1;  // -1 for the NOP padding rule
  std::vector<Symbol> rhs;
};

class Grammar {
 public:
  static constexpr int kDefaultMaxLen = 72;

  static Grammar load(std::string_view spec, int max_len = kDefaultMaxLen);
  static Grammar load_file(const std::filesystem::path& path, int max_len = kDefaultMaxLen);

  int rule_count() const { return static_cast<int>(rules_.size()); }
  int nop() const { return rule_count() - 1; }
  int max_len() const { return max_len_; }
  int start() const { return start_; }
  const Rule& rule(int r) const { return rules_.at(r); }
  const std::vector<std::string>& nonterminals() const { return nonterminals_; }
  const std::vector<std::string>& terminals() const { return terminals_; }
  int nonterminal_id(std::string_view name) const;
  std::string rule_text(int r) const;
  int find_rule(std::string_view text) const;

  // Minimal number of rule applications that turn the symbol into terminals.
  int min_cost(int nonterminal) const { return min_cost_.at(nonterminal); }
  int rule_cost(int r) const { return rule_cost_.at(r); }

  // Mask over all C rules. nt == -1 is the empty-stack sentinel.
  const std::vector<std::uint8_t>& mask(int nt) const;

  std::vector<int> tokenize(std::string_view text) const;
  const std::string& source_text() const { return source_; }
  std::string hash() const;

 private:
  std::vector<Rule> rules_;
  std::vector<std::string> nonterminals_;
  std::vector<std::string> terminals_;
  std::vector<int> min_cost_;
  std::vector<int> rule_cost_;
  std::vector<std::vector<std::uint8_t>> masks_;
  std::vector<std::uint8_t> sentinel_mask_;
  int start_ = 0;
  int max_len_ = kDefaultMaxLen;
  std::string source_;
};

Grammar load_grammar(std::string_view spec);

// Canonical (lexicographically smallest leftmost) derivation of the text,
// padded with NOP to max_len. Transcendental functions of purely numeric
// arguments are rejected when check_arguments is set.
RuleSequence parse(std::string_view expr_text, const Grammar& g, bool check_arguments = true);
std::string derive(std::span<const int> seq, const Grammar& g);

// True when seq replays as a complete derivation followed by NOP padding.
bool is_valid_derivation(std::span<const int> seq, const Grammar& g);

struct OneHotMatrix {
  int rows = 0;  // C
  int cols = 0;  // L_max
  std::vector<std::uint8_t> entries;  // column-major: entries[col * rows + row]

  std::uint8_t at(int row, int col) const { return entries[col * rows + row]; }
};

OneHotMatrix encode_onehot(std::span<const int> seq, const Grammar& g);
RuleSequence decode_onehot(const OneHotMatrix& m);

const std::vector<std::uint8_t>& mask_for(std::string_view nonterminal, const Grammar& g);

struct DecodeResult {
  RuleSequence seq;
  bool finished = false;
};

// logits is C x L_max column-major (logits[pos * C + rule]).
DecodeResult masked_argmax_decode(std::span<const double> logits, const Grammar& g,
                                  bool recursion_guard = true);

// Uniform choice among unmasked rules at every step.
DecodeResult sample_uniform(const Grammar& g, std::mt19937_64& rng, bool recursion_guard = true);

std::string canonicalize(std::string_view expr_text);

}  // namespace sigs
