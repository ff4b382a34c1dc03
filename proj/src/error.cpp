#include "sigs/error.hpp"

namespace sigs {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateRule: return "DuplicateRule";
    case ErrorCode::UnknownSymbol: return "UnknownSymbol";
    case ErrorCode::MissingStart: return "MissingStart";
    case ErrorCode::InvalidGrammar: return "InvalidGrammar";
    case ErrorCode::NotInLanguage: return "NotInLanguage";
    case ErrorCode::TooLong: return "TooLong";
    case ErrorCode::InvalidDerivation: return "InvalidDerivation";
    case ErrorCode::Unfinished: return "Unfinished";
    case ErrorCode::MalformedOneHot: return "MalformedOneHot";
    case ErrorCode::UnknownNonterminal: return "UnknownNonterminal";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::PowerTooHigh: return "PowerTooHigh";
    case ErrorCode::UnsupportedGeometry: return "UnsupportedGeometry";
    case ErrorCode::InvalidParameter: return "InvalidParameter";
    case ErrorCode::MissingParameter: return "MissingParameter";
    case ErrorCode::RetryBudgetExhausted: return "RetryBudgetExhausted";
    case ErrorCode::ZeroReference: return "ZeroReference";
    case ErrorCode::InvalidProblem: return "InvalidProblem";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyReservoir: return "EmptyReservoir";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::GrammarMismatch: return "GrammarMismatch";
    case ErrorCode::InvalidCheckpoint: return "InvalidCheckpoint";
    case ErrorCode::EmptyComponentLibrary: return "EmptyComponentLibrary";
    case ErrorCode::InvalidCluster: return "InvalidCluster";
    case ErrorCode::NoFiniteCandidate: return "NoFiniteCandidate";
    case ErrorCode::RefinementFailed: return "RefinementFailed";
    case ErrorCode::SingularCovariance: return "SingularCovariance";
    case ErrorCode::PoolExhausted: return "PoolExhausted";
    case ErrorCode::InvalidAnsatz: return "InvalidAnsatz";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(message), code_(code) {}

}  // namespace sigs
