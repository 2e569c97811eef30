#pragma once

#include <stdexcept>
#include <string>

namespace hmmpanel {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidInput : Error {
  using Error::Error;
};

struct SingularCovariance : Error {
  using Error::Error;
};

struct ParseError : Error {
  ParseError(std::size_t line_no, const std::string& what)
      : Error("parse error at line " + std::to_string(line_no) + ": " + what),
        line(line_no) {}
  std::size_t line;
};

struct InvalidDropout : Error {
  InvalidDropout(const std::string& subject_id, int occasion)
      : Error("invalid dropout indicator for subject '" + subject_id +
              "' at occasion " + std::to_string(occasion)),
        id(subject_id),
        t(occasion) {}
  std::string id;
  int t;
};

struct InconsistentRow : Error {
  InconsistentRow(const std::string& subject_id, int occasion)
      : Error("observed response after dropout for subject '" + subject_id +
              "' at occasion " + std::to_string(occasion)),
        id(subject_id),
        t(occasion) {}
  std::string id;
  int t;
};

struct DegenerateComponent : Error {
  explicit DegenerateComponent(int state)
      : Error("latent state " + std::to_string(state + 1) +
              " has vanishing expected occupancy"),
        u(state) {}
  int u;
};

struct NewtonFailed : Error {
  using Error::Error;
};

struct FitFailed : Error {
  using Error::Error;
};

struct ImpossibleObservation : Error {
  ImpossibleObservation(const std::string& subject_id, int occasion)
      : Error("zero likelihood for subject '" + subject_id + "' at occasion " +
              std::to_string(occasion)),
        id(subject_id),
        t(occasion) {}
  std::string id;
  int t;
};

struct BootstrapFailed : Error {
  using Error::Error;
};

}  // namespace hmmpanel
