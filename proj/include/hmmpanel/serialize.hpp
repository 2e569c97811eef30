#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "hmmpanel/inference.hpp"
#include "hmmpanel/simulate.hpp"

namespace hmmpanel {

enum class OutputFormat { Csv, Json };

std::string format_double(double v);  // 17 significant digits

// Tabular artifact written as CSV or as a JSON array of row objects; the
// extension follows the format.
struct Table {
  std::vector<std::string> headers;
  std::vector<std::vector<std::string>> rows;
};

std::string write_table(const Table& table, const std::string& path_base,
                        OutputFormat format);

nlohmann::json params_to_json(const HmmParams& params,
                              const std::vector<std::string>& response_names,
                              const std::vector<std::string>& covariate_names);
void write_json_file(const nlohmann::json& j, const std::string& path);

Table posteriors_table(const PanelDataset& data,
                       const LatentPosterior& posterior);
Table trace_table(const std::vector<double>& trace);
Table selection_table(const SelectionReport& report);
Table se_table(const StdErrReport& report);
Table states_table(const PanelDataset& data,
                   const std::vector<std::vector<int>>& states);
Table state_freq_table(const PanelDataset& data,
                       const std::vector<std::vector<int>>& states,
                       int n_states);
Table study_summary_table(const StudyReport& report);
Table study_transition_table(const StudyReport& report);

}  // namespace hmmpanel
