#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sigs {

enum class ErrorCode {
  DuplicateRule,
  UnknownSymbol,
  MissingStart,
  InvalidGrammar,
  NotInLanguage,
  TooLong,
  InvalidDerivation,
  Unfinished,
  MalformedOneHot,
  UnknownNonterminal,
  DimensionMismatch,
  PowerTooHigh,
  UnsupportedGeometry,
  InvalidParameter,
  MissingParameter,
  RetryBudgetExhausted,
  ZeroReference,
  InvalidProblem,
  ShapeMismatch,
  EmptyReservoir,
  NonFiniteLoss,
  GrammarMismatch,
  InvalidCheckpoint,
  EmptyComponentLibrary,
  InvalidCluster,
  NoFiniteCandidate,
  RefinementFailed,
  SingularCovariance,
  PoolExhausted,
  InvalidAnsatz,
  InvalidConfig,
  Io,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace sigs
