#include "hmmpanel/serialize.hpp"

#include <cstdio>
#include <fstream>

namespace hmmpanel {

using nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string write_table(const Table& table, const std::string& path_base,
                        OutputFormat format) {
  std::string path =
      path_base + (format == OutputFormat::Csv ? ".csv" : ".json");
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open output file '" + path + "'");
  if (format == OutputFormat::Csv) {
    for (std::size_t c = 0; c < table.headers.size(); ++c)
      out << (c ? "," : "") << table.headers[c];
    out << '\n';
    for (const auto& row : table.rows) {
      for (std::size_t c = 0; c < row.size(); ++c)
        out << (c ? "," : "") << row[c];
      out << '\n';
    }
  } else {
    json arr = json::array();
    for (const auto& row : table.rows) {
      json obj = json::object();
      for (std::size_t c = 0; c < row.size() && c < table.headers.size(); ++c)
        obj[table.headers[c]] = row[c];
      arr.push_back(obj);
    }
    out << arr.dump(2) << '\n';
  }
  return path;
}

static json matrix_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index a = 0; a < m.rows(); ++a) {
    json row = json::array();
    for (Eigen::Index b = 0; b < m.cols(); ++b) row.push_back(m(a, b));
    rows.push_back(row);
  }
  return rows;
}

static json vector_json(const VectorXd& v) {
  json row = json::array();
  for (Eigen::Index a = 0; a < v.size(); ++a) row.push_back(v[a]);
  return row;
}

json params_to_json(const HmmParams& params,
                    const std::vector<std::string>& response_names,
                    const std::vector<std::string>& covariate_names) {
  json j;
  j["k"] = params.k;
  j["r"] = params.r();
  j["response_names"] = response_names;
  json means = json::array();
  for (const auto& m : params.means) means.push_back(vector_json(m));
  j["means"] = means;
  j["cov"] = matrix_json(params.cov);
  j["covariates"] = params.has_covariates();
  if (!params.has_covariates()) {
    j["initial"] = vector_json(params.initial);
    j["transition"] = matrix_json(params.transition);
  } else {
    j["covariate_names"] = covariate_names;
    j["B"] = matrix_json(params.B->coef);
    json gamma = json::array();
    for (int ubar = 0; ubar < params.k; ++ubar) {
      json block;
      block["origin"] = ubar + 1;
      block["coef"] = matrix_json(params.Gamma->coef[ubar]);
      gamma.push_back(block);
    }
    j["Gamma"] = gamma;
  }
  return j;
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open output file '" + path + "'");
  out << j.dump(2) << '\n';
}

Table posteriors_table(const PanelDataset& data,
                       const LatentPosterior& posterior) {
  Table t;
  t.headers = {"id", "time"};
  const int S = posterior.empty() ? 0 : static_cast<int>(posterior[0].smoothed.cols());
  for (int u = 0; u < S; ++u) t.headers.push_back("z" + std::to_string(u + 1));
  for (int i = 0; i < data.n(); ++i) {
    const auto& rec = data.subjects[i];
    for (int tt = 0; tt < rec.n_occasions(); ++tt) {
      std::vector<std::string> row{rec.id, std::to_string(tt + 1)};
      for (int u = 0; u < S; ++u)
        row.push_back(format_double(posterior[i].smoothed(tt, u)));
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

Table trace_table(const std::vector<double>& trace) {
  Table t;
  t.headers = {"iteration", "loglik"};
  for (std::size_t s = 0; s < trace.size(); ++s)
    t.rows.push_back({std::to_string(s + 1), format_double(trace[s])});
  return t;
}

Table selection_table(const SelectionReport& report) {
  Table t;
  t.headers = {"k",         "loglik", "n_par",     "bic",
               "aic",       "best",   "converged", "fit_failed"};
  for (const auto& row : report.rows) {
    t.rows.push_back({std::to_string(row.k),
                      row.fit_failed ? "NA" : format_double(row.loglik),
                      row.fit_failed ? "NA" : std::to_string(row.n_par),
                      row.fit_failed ? "NA" : format_double(row.bic),
                      row.fit_failed ? "NA" : format_double(row.aic),
                      row.k == report.best_k ? "1" : "0",
                      row.fit_failed ? "NA" : (row.converged ? "1" : "0"),
                      row.fit_failed ? "1" : "0"});
  }
  return t;
}

Table se_table(const StdErrReport& report) {
  Table t;
  t.headers = {"parameter", "estimate", "se", "flag"};
  for (std::size_t j = 0; j < report.names.size(); ++j) {
    std::string flag;
    if (!report.at_boundary.empty() && report.at_boundary[j]) flag = "boundary";
    if (report.non_pd) flag = flag.empty() ? "nonPD" : flag + ";nonPD";
    t.rows.push_back({report.names[j], format_double(report.estimate[j]),
                      format_double(report.se[j]), flag});
  }
  return t;
}

Table states_table(const PanelDataset& data,
                   const std::vector<std::vector<int>>& states) {
  Table t;
  t.headers = {"id", "time", "state"};
  for (int i = 0; i < data.n(); ++i) {
    const auto& rec = data.subjects[i];
    for (int tt = 0; tt < rec.n_occasions(); ++tt)
      t.rows.push_back(
          {rec.id, std::to_string(tt + 1), std::to_string(states[i][tt] + 1)});
  }
  return t;
}

Table state_freq_table(const PanelDataset& data,
                       const std::vector<std::vector<int>>& states,
                       int n_states) {
  Table t;
  t.headers = {"time", "n_at_risk"};
  for (int u = 0; u < n_states; ++u)
    t.headers.push_back("freq_state" + std::to_string(u + 1));
  const int maxT = data.max_occasions();
  for (int tt = 0; tt < maxT; ++tt) {
    std::vector<int> counts(n_states, 0);
    int at_risk = 0;
    for (int i = 0; i < data.n(); ++i) {
      if (tt >= data.subjects[i].n_occasions()) continue;
      ++at_risk;
      ++counts[states[i][tt]];
    }
    std::vector<std::string> row{std::to_string(tt + 1), std::to_string(at_risk)};
    for (int u = 0; u < n_states; ++u)
      row.push_back(format_double(
          at_risk > 0 ? static_cast<double>(counts[u]) / at_risk : 0.0));
    t.rows.push_back(std::move(row));
  }
  return t;
}

Table study_summary_table(const StudyReport& report) {
  Table t;
  t.headers = {"block", "abs_bias", "sd", "rmse", "n_completed", "n_failed"};
  auto add = [&](const std::string& name, const BlockSummary& s) {
    t.rows.push_back({name, format_double(s.abs_bias), format_double(s.sd),
                      format_double(s.rmse), std::to_string(report.n_completed),
                      std::to_string(report.n_failed)});
  };
  add("mu", report.mu);
  add("sigma", report.sigma);
  add("initial", report.pi);
  add("transition", report.trans);
  return t;
}

Table study_transition_table(const StudyReport& report) {
  Table t;
  const int S = static_cast<int>(report.avg_transition.rows());
  t.headers = {"origin"};
  for (int u = 0; u < S - 1; ++u) t.headers.push_back("u" + std::to_string(u + 1));
  t.headers.push_back("drop");
  for (int a = 0; a < S; ++a) {
    std::vector<std::string> row{a == S - 1 ? "drop" : "u" + std::to_string(a + 1)};
    for (int b = 0; b < S; ++b)
      row.push_back(format_double(report.avg_transition(a, b)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace hmmpanel
