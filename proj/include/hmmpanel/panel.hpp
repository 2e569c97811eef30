#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hmmpanel/gaussian.hpp"

namespace hmmpanel {

// One subject of an unbalanced longitudinal panel. Missing response cells
// hold NaN and are mirrored in the per-occasion pattern. Dropout is monotone
// and forces all responses at that occasion to be missing.
struct SubjectRecord {
  std::string id;
  MatrixXd responses;                  // T x r
  std::vector<ObsPattern> observed;    // per occasion
  std::vector<char> dropout;           // d_it
  std::optional<MatrixXd> covariates;  // T x p

  int n_occasions() const { return static_cast<int>(dropout.size()); }
  int n_dropout() const;               // d_{i+}
  VectorXd observed_values(int t) const;
};

struct PanelDataset {
  std::vector<SubjectRecord> subjects;
  int r = 0;
  int p = 0;
  std::vector<std::string> response_names;
  std::vector<std::string> covariate_names;

  int n() const { return static_cast<int>(subjects.size()); }
  int max_occasions() const;
  int total_occasions() const;
  void validate() const;
};

struct PanelSchema {
  std::string id = "id";
  std::string time = "time";
  std::string drop = "drop";
  std::vector<std::string> responses;
  std::vector<std::string> covariates;
};

// Long format: one row per subject-occasion, comma separated, header row,
// missing responses as `NA` or an empty field. Occasions must be contiguous
// 1..T_i per subject; covariates must be complete.
PanelDataset parse_long_csv(std::istream& in, const PanelSchema& schema);
PanelDataset parse_long_csv_file(const std::string& path,
                                 const PanelSchema& schema);
void write_long_csv(const PanelDataset& data, std::ostream& out);
void write_long_csv_file(const PanelDataset& data, const std::string& path);

struct MissingnessSummary {
  std::vector<int> at_risk;              // subjects with T_i >= t
  std::vector<double> dropout_rate;      // per occasion, among at-risk
  std::vector<double> intermittent_rate; // per response, non-dropout cells
  int fully_missing_occasions = 0;       // d=0 with every response missing
};

MissingnessSummary missingness_summary(const PanelDataset& data);

}  // namespace hmmpanel
