#include "hmmpanel/panel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace hmmpanel {

int SubjectRecord::n_dropout() const {
  int c = 0;
  for (char d : dropout) c += d ? 1 : 0;
  return c;
}

VectorXd SubjectRecord::observed_values(int t) const {
  const ObsPattern& pat = observed[t];
  VectorXd v(pat.n_observed());
  int j = 0;
  for (int c = 0; c < pat.size(); ++c)
    if (pat.observed[c]) v[j++] = responses(t, c);
  return v;
}

int PanelDataset::max_occasions() const {
  int m = 0;
  for (const auto& s : subjects) m = std::max(m, s.n_occasions());
  return m;
}

int PanelDataset::total_occasions() const {
  int m = 0;
  for (const auto& s : subjects) m += s.n_occasions();
  return m;
}

void PanelDataset::validate() const {
  if (subjects.empty()) throw InvalidInput("panel has no subjects");
  for (const auto& s : subjects) {
    const int T = s.n_occasions();
    if (T < 1) throw InvalidInput("subject '" + s.id + "' has no occasions");
    if (s.responses.rows() != T || s.responses.cols() != r)
      throw InvalidInput("subject '" + s.id + "' has a mis-shaped response matrix");
    if (static_cast<int>(s.observed.size()) != T)
      throw InvalidInput("subject '" + s.id + "' has a mis-shaped pattern list");
    if (p > 0) {
      if (!s.covariates || s.covariates->rows() != T || s.covariates->cols() != p)
        throw InvalidInput("subject '" + s.id + "' has mis-shaped covariates");
      if (!s.covariates->allFinite())
        throw InvalidInput("subject '" + s.id + "' has missing covariate cells");
    }
    if (s.dropout[0])
      throw InvalidDropout(s.id, 1);
    for (int t = 0; t < T; ++t) {
      if (t > 0 && s.dropout[t - 1] && !s.dropout[t])
        throw InvalidDropout(s.id, t + 1);
      if (s.observed[t].size() != r)
        throw InvalidInput("subject '" + s.id + "' has a mis-sized pattern");
      for (int c = 0; c < r; ++c) {
        bool obs = s.observed[t].observed[c];
        bool finite = std::isfinite(s.responses(t, c));
        if (obs != finite)
          throw InvalidInput("subject '" + s.id +
                             "': pattern and NaN mask disagree");
        if (s.dropout[t] && obs) throw InconsistentRow(s.id, t + 1);
      }
    }
  }
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

bool is_missing_token(const std::string& s) { return s.empty() || s == "NA"; }

double parse_double(const std::string& s, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line_no, "cannot parse number '" + s + "'");
  }
}

long parse_long(const std::string& s, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line_no, "cannot parse integer '" + s + "'");
  }
}

struct RawRow {
  std::size_t line_no;
  long time;
  bool drop;
  std::vector<double> y;   // NaN for missing
  std::vector<double> x;
};

}  // namespace

PanelDataset parse_long_csv(std::istream& in, const PanelSchema& schema) {
  if (schema.responses.empty())
    throw InvalidInput("schema must name at least one response column");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty input");
  std::vector<std::string> header = split_line(line);
  auto col_of = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw InvalidInput("column '" + name + "' not found in header");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t id_col = col_of(schema.id);
  const std::size_t time_col = col_of(schema.time);
  const std::size_t drop_col = col_of(schema.drop);
  std::vector<std::size_t> y_cols, x_cols;
  for (const auto& name : schema.responses) y_cols.push_back(col_of(name));
  for (const auto& name : schema.covariates) x_cols.push_back(col_of(name));

  const int r = static_cast<int>(y_cols.size());
  const int p = static_cast<int>(x_cols.size());

  std::vector<std::string> id_order;
  std::map<std::string, std::vector<RawRow>> by_id;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> f = split_line(line);
    if (f.size() != header.size())
      throw ParseError(line_no, "expected " + std::to_string(header.size()) +
                                    " fields, found " + std::to_string(f.size()));
    RawRow row;
    row.line_no = line_no;
    const std::string& id = f[id_col];
    row.time = parse_long(f[time_col], line_no);
    long d = parse_long(f[drop_col], line_no);
    if (d != 0 && d != 1)
      throw ParseError(line_no, "dropout flag must be 0 or 1");
    row.drop = d == 1;
    for (std::size_t c : y_cols) {
      const std::string& tok = f[c];
      row.y.push_back(is_missing_token(tok)
                          ? std::numeric_limits<double>::quiet_NaN()
                          : parse_double(tok, line_no));
    }
    for (std::size_t c : x_cols) {
      const std::string& tok = f[c];
      if (is_missing_token(tok))
        throw InvalidInput("missing covariate cell at line " +
                           std::to_string(line_no) + " (covariates must be complete)");
      row.x.push_back(parse_double(tok, line_no));
    }
    if (by_id.find(id) == by_id.end()) id_order.push_back(id);
    by_id[id].push_back(row);
  }
  if (id_order.empty()) throw InvalidInput("input contains no data rows");

  PanelDataset data;
  data.r = r;
  data.p = p;
  data.response_names = schema.responses;
  data.covariate_names = schema.covariates;
  for (const auto& id : id_order) {
    auto& rows = by_id[id];
    std::stable_sort(rows.begin(), rows.end(),
                     [](const RawRow& a, const RawRow& b) { return a.time < b.time; });
    const int T = static_cast<int>(rows.size());
    for (int t = 0; t < T; ++t) {
      if (rows[t].time != t + 1)
        throw InvalidInput("subject '" + id + "': time index must be contiguous 1.." +
                           std::to_string(T) + " (line " +
                           std::to_string(rows[t].line_no) + ")");
    }
    SubjectRecord rec;
    rec.id = id;
    rec.responses.resize(T, r);
    rec.dropout.resize(T);
    if (p > 0) rec.covariates = MatrixXd(T, p);
    for (int t = 0; t < T; ++t) {
      const RawRow& row = rows[t];
      rec.dropout[t] = row.drop ? 1 : 0;
      std::vector<bool> obs(r);
      for (int c = 0; c < r; ++c) {
        rec.responses(t, c) = row.y[c];
        obs[c] = std::isfinite(row.y[c]);
        if (row.drop && obs[c]) throw InconsistentRow(id, t + 1);
      }
      rec.observed.emplace_back(std::move(obs));
      if (p > 0)
        for (int c = 0; c < p; ++c) (*rec.covariates)(t, c) = row.x[c];
      if (t == 0 && row.drop) throw InvalidDropout(id, 1);
      if (t > 0 && rows[t - 1].drop && !row.drop) throw InvalidDropout(id, t + 1);
    }
    data.subjects.push_back(std::move(rec));
  }
  data.validate();
  return data;
}

PanelDataset parse_long_csv_file(const std::string& path,
                                 const PanelSchema& schema) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open input file '" + path + "'");
  return parse_long_csv(in, schema);
}

static std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_long_csv(const PanelDataset& data, std::ostream& out) {
  out << "id,time,drop";
  for (int c = 0; c < data.r; ++c) {
    out << ','
        << (c < static_cast<int>(data.response_names.size())
                ? data.response_names[c]
                : "y" + std::to_string(c + 1));
  }
  for (int c = 0; c < data.p; ++c) {
    out << ','
        << (c < static_cast<int>(data.covariate_names.size())
                ? data.covariate_names[c]
                : "x" + std::to_string(c + 1));
  }
  out << '\n';
  for (const auto& s : data.subjects) {
    for (int t = 0; t < s.n_occasions(); ++t) {
      out << s.id << ',' << (t + 1) << ',' << (s.dropout[t] ? 1 : 0);
      for (int c = 0; c < data.r; ++c) {
        out << ',';
        if (s.observed[t].observed[c]) out << fmt17(s.responses(t, c));
        else out << "NA";
      }
      for (int c = 0; c < data.p; ++c) out << ',' << fmt17((*s.covariates)(t, c));
      out << '\n';
    }
  }
}

void write_long_csv_file(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open output file '" + path + "'");
  write_long_csv(data, out);
}

MissingnessSummary missingness_summary(const PanelDataset& data) {
  MissingnessSummary s;
  const int maxT = data.max_occasions();
  s.at_risk.assign(maxT, 0);
  s.dropout_rate.assign(maxT, 0.0);
  s.intermittent_rate.assign(data.r, 0.0);
  std::vector<long> miss_count(data.r, 0);
  long non_dropout_occasions = 0;
  for (const auto& rec : data.subjects) {
    for (int t = 0; t < rec.n_occasions(); ++t) {
      s.at_risk[t] += 1;
      if (rec.dropout[t]) {
        s.dropout_rate[t] += 1.0;
        continue;
      }
      ++non_dropout_occasions;
      if (rec.observed[t].none_observed()) ++s.fully_missing_occasions;
      for (int c = 0; c < data.r; ++c)
        if (!rec.observed[t].observed[c]) ++miss_count[c];
    }
  }
  for (int t = 0; t < maxT; ++t)
    if (s.at_risk[t] > 0) s.dropout_rate[t] /= s.at_risk[t];
  for (int c = 0; c < data.r; ++c)
    s.intermittent_rate[c] =
        non_dropout_occasions > 0
            ? static_cast<double>(miss_count[c]) / non_dropout_occasions
            : 0.0;
  return s;
}

}  // namespace hmmpanel
