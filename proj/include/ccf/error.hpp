#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ccf {

enum class ErrorKind {
  Io,
  BadMagic,
  VersionMismatch,
  UnknownDtype,
  TruncatedPayload,
  NonFiniteEntry,
  BadManifest,
  ZeroVector,
  DimensionMismatch,
  DegenerateConcept,
  DuplicateName,
  EmptyBank,
  UnknownConcept,
  EmptyBatch,
  EmptyDataset,
  NonFiniteLoss,
  InvalidTarget,
  InvalidConfig,
  SizeMismatch,
  InfeasibleConfig,
  AlreadyTarget,
  Infeasible,
  EmptyGroundTruth,
  MissingLabelConcept,
  EmptyList,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "Io";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::UnknownDtype: return "UnknownDtype";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::NonFiniteEntry: return "NonFiniteEntry";
    case ErrorKind::BadManifest: return "BadManifest";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::DegenerateConcept: return "DegenerateConcept";
    case ErrorKind::DuplicateName: return "DuplicateName";
    case ErrorKind::EmptyBank: return "EmptyBank";
    case ErrorKind::UnknownConcept: return "UnknownConcept";
    case ErrorKind::EmptyBatch: return "EmptyBatch";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::InvalidTarget: return "InvalidTarget";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::SizeMismatch: return "SizeMismatch";
    case ErrorKind::InfeasibleConfig: return "InfeasibleConfig";
    case ErrorKind::AlreadyTarget: return "AlreadyTarget";
    case ErrorKind::Infeasible: return "Infeasible";
    case ErrorKind::EmptyGroundTruth: return "EmptyGroundTruth";
    case ErrorKind::MissingLabelConcept: return "MissingLabelConcept";
    case ErrorKind::EmptyList: return "EmptyList";
  }
  return "Unknown";
}

// All library failures are reported through this type; kind() is stable
// and is what callers (and the CLI exit-code mapping) dispatch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace ccf
