#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace canon {

// Error taxonomy for the whole library. The short tags are stable strings
// used by the CLI and by file-format tests ("bad-magic", "count-mismatch", ...).
enum class Errc {
  ShapeMismatch,
  DimensionMismatch,
  InvalidArgument,
  DomainError,        // log of non-positive, div by zero, sqrt of negative
  NonScalarLoss,
  BackwardTwice,
  NonSquareImage,
  NonOddKernel,
  OutputTooSmall,
  EmptyReduction,
  IndexOutOfRange,
  InvalidRotation,
  Degenerate,
  NonFinite,
  NegativeConcentration,
  BadMagic,
  Truncated,
  CountMismatch,
  UnsupportedVersion,
  Io,
  NumericalFailure,
  Usage,
};

inline const char* errc_tag(Errc c) {
  switch (c) {
    case Errc::ShapeMismatch: return "shape-mismatch";
    case Errc::DimensionMismatch: return "dimension-mismatch";
    case Errc::InvalidArgument: return "invalid-argument";
    case Errc::DomainError: return "domain-error";
    case Errc::NonScalarLoss: return "non-scalar-loss";
    case Errc::BackwardTwice: return "backward-twice";
    case Errc::NonSquareImage: return "non-square-image";
    case Errc::NonOddKernel: return "non-odd-kernel";
    case Errc::OutputTooSmall: return "output-too-small";
    case Errc::EmptyReduction: return "empty-reduction";
    case Errc::IndexOutOfRange: return "index-out-of-range";
    case Errc::InvalidRotation: return "invalid-rotation";
    case Errc::Degenerate: return "degenerate";
    case Errc::NonFinite: return "non-finite";
    case Errc::NegativeConcentration: return "negative-concentration";
    case Errc::BadMagic: return "bad-magic";
    case Errc::Truncated: return "truncated";
    case Errc::CountMismatch: return "count-mismatch";
    case Errc::UnsupportedVersion: return "unsupported-version";
    case Errc::Io: return "io";
    case Errc::NumericalFailure: return "numerical-failure";
    case Errc::Usage: return "usage";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_tag(code)) + ": " + what), code_(code) {}
  Error(Errc code, const std::string& what, std::size_t index)
      : std::runtime_error(std::string(errc_tag(code)) + ": " + what + " (index " +
                           std::to_string(index) + ")"),
        code_(code),
        index_(index) {}

  Errc code() const { return code_; }
  // Offending flat index, when the failure is tied to one element.
  std::optional<std::size_t> index() const { return index_; }

 private:
  Errc code_;
  std::optional<std::size_t> index_;
};

}  // namespace canon
