#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "hmmpanel/inference.hpp"
#include "hmmpanel/parallel.hpp"
#include "hmmpanel/serialize.hpp"
#include "hmmpanel/simulate.hpp"

namespace fs = std::filesystem;
using namespace hmmpanel;

namespace {

struct RunConfig {
  std::string input;
  std::string schema;
  std::string out = ".";
  std::string format = "csv";
  int k = 1;
  std::string k_range;
  double tol = 1e-8;
  int max_iter = 5000;
  int starts = -1;  // random starts; -1 resolves to 5*k
  double h = 9.0;
  std::uint64_t seed = 1;
  int workers = 0;
  std::string se_method = "bootstrap";
  int reps = 300;  // bootstrap replicates
  std::string mode = "unconditional";
  // simulate
  int sim_n = 500;
  double sim_p = 0.10;
  int sim_t = 5;
  int sim_reps = 250;

  void check() const {
    if (tol <= 0) throw InvalidInput("tol must be positive");
    if (max_iter < 1) throw InvalidInput("max-iter must be at least 1");
    if (k < 1) throw InvalidInput("k must be at least 1");
  }
  OutputFormat out_format() const {
    if (format == "csv") return OutputFormat::Csv;
    if (format == "json") return OutputFormat::Json;
    throw InvalidInput("format must be csv or json");
  }
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

// --schema id=ID,time=TIME,drop=DROP,y=Y1;Y2,x=X1;X2
PanelSchema parse_schema(const std::string& text) {
  PanelSchema schema;
  if (text.empty()) return schema;
  for (const std::string& item : split(text, ',')) {
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("schema entries must look like key=value");
    std::string key = item.substr(0, eq);
    std::string value = item.substr(eq + 1);
    if (key == "id") schema.id = value;
    else if (key == "time") schema.time = value;
    else if (key == "drop") schema.drop = value;
    else if (key == "y") schema.responses = split(value, ';');
    else if (key == "x") schema.covariates = split(value, ';');
    else throw InvalidInput("unknown schema key '" + key + "'");
  }
  return schema;
}

// Default schema: id/time/drop by name, every other column a response.
PanelSchema resolve_schema(const std::string& text, const std::string& input) {
  PanelSchema schema = parse_schema(text);
  if (!schema.responses.empty()) return schema;
  std::ifstream in(input);
  if (!in) throw InvalidInput("cannot open input file '" + input + "'");
  std::string header;
  if (!std::getline(in, header)) throw InvalidInput("empty input file");
  for (std::string name : split(header, ',')) {
    if (!name.empty() && name.back() == '\r') name.pop_back();
    if (name == schema.id || name == schema.time || name == schema.drop) continue;
    schema.responses.push_back(name);
  }
  if (schema.responses.empty())
    throw InvalidInput("no response columns found in the header");
  return schema;
}

std::vector<int> parse_k_range(const std::string& text) {
  std::vector<int> ks;
  auto dots = text.find("..");
  if (dots != std::string::npos) {
    int lo = std::stoi(text.substr(0, dots));
    int hi = std::stoi(text.substr(dots + 2));
    for (int k = lo; k <= hi; ++k) ks.push_back(k);
  } else {
    for (const std::string& item : split(text, ','))
      if (!item.empty()) ks.push_back(std::stoi(item));
  }
  if (ks.empty()) throw InvalidInput("empty k range");
  return ks;
}

HmmFitOptions fit_options(const RunConfig& cfg, bool covariates) {
  HmmFitOptions opts;
  opts.tol = cfg.tol;
  opts.max_iter = cfg.max_iter;
  opts.n_random_starts = cfg.starts;
  opts.h = cfg.h;
  opts.seed = cfg.seed;
  opts.workers = resolve_workers(cfg.workers);
  opts.covariates = covariates;
  return opts;
}

nlohmann::json fit_summary_json(const FitResult& fit, int k, int n_subjects,
                                std::uint64_t seed) {
  nlohmann::json j;
  j["k"] = k;
  j["n_subjects"] = n_subjects;
  j["loglik"] = fit.loglik;
  j["n_par"] = fit.n_par;
  j["aic"] = fit.aic;
  j["bic"] = fit.bic;
  j["iterations"] = fit.iterations;
  j["converged"] = fit.converged;
  j["best_start"] = fit.best_start;
  j["n_starts"] = fit.n_starts;
  j["failed_starts"] = fit.failed_starts;
  j["separation_warning"] = fit.separation;
  j["seed"] = seed;
  return j;
}

struct LoadedFit {
  PanelDataset data;
  PanelSchema schema;
  FitResult fit;
  HmmFitOptions opts;
};

LoadedFit load_and_fit(const RunConfig& cfg) {
  cfg.check();
  LoadedFit out;
  out.schema = resolve_schema(cfg.schema, cfg.input);
  out.data = parse_long_csv_file(cfg.input, out.schema);
  out.opts = fit_options(cfg, !out.schema.covariates.empty());
  out.fit = fit_hmm(out.data, cfg.k, out.opts);
  return out;
}

int cmd_fit(const RunConfig& cfg) {
  LoadedFit lf = load_and_fit(cfg);
  fs::create_directories(cfg.out);
  write_json_file(params_to_json(lf.fit.params, lf.data.response_names,
                                 lf.data.covariate_names),
                  (fs::path(cfg.out) / "params.json").string());
  write_json_file(fit_summary_json(lf.fit, cfg.k, lf.data.n(), cfg.seed),
                  (fs::path(cfg.out) / "fit_summary.json").string());
  write_table(trace_table(lf.fit.loglik_trace),
              (fs::path(cfg.out) / "loglik_trace").string(), cfg.out_format());
  EmOptions em = lf.opts;
  EStepResult e = e_step(lf.data, lf.fit.params, em);
  write_table(posteriors_table(lf.data, e.posterior),
              (fs::path(cfg.out) / "posteriors").string(), cfg.out_format());
  std::cout << "fit: k=" << cfg.k << " loglik=" << format_double(lf.fit.loglik)
            << " bic=" << format_double(lf.fit.bic)
            << " converged=" << (lf.fit.converged ? "yes" : "no") << "\n";
  return 0;
}

int cmd_select(const RunConfig& cfg) {
  cfg.check();
  PanelSchema schema = resolve_schema(cfg.schema, cfg.input);
  PanelDataset data = parse_long_csv_file(cfg.input, schema);
  HmmFitOptions opts = fit_options(cfg, !schema.covariates.empty());
  SelectionReport report = select_k(data, parse_k_range(cfg.k_range), opts);
  fs::create_directories(cfg.out);
  write_table(selection_table(report), (fs::path(cfg.out) / "selection").string(),
              cfg.out_format());
  std::cout << "select: best k by BIC = " << report.best_k << "\n";
  return 0;
}

int cmd_decode(const RunConfig& cfg) {
  LoadedFit lf = load_and_fit(cfg);
  DecodedPanel decoded = decode_panel(lf.data, lf.fit.params, lf.opts);
  fs::create_directories(cfg.out);
  write_table(states_table(lf.data, decoded.local),
              (fs::path(cfg.out) / "states_local").string(), cfg.out_format());
  write_table(states_table(lf.data, decoded.global),
              (fs::path(cfg.out) / "states_global").string(), cfg.out_format());
  write_table(state_freq_table(lf.data, decoded.local, cfg.k + 1),
              (fs::path(cfg.out) / "state_freq").string(), cfg.out_format());
  std::cout << "decode: wrote local/global states for n=" << lf.data.n()
            << " subjects\n";
  return 0;
}

int cmd_impute(const RunConfig& cfg) {
  LoadedFit lf = load_and_fit(cfg);
  ImputeMode mode;
  if (cfg.mode == "conditional") mode = ImputeMode::Conditional;
  else if (cfg.mode == "unconditional") mode = ImputeMode::Unconditional;
  else throw InvalidInput("mode must be conditional or unconditional");
  EStepResult e = e_step(lf.data, lf.fit.params, lf.opts);
  PanelDataset filled = impute_missing(lf.data, lf.fit.params, e.posterior, mode);
  fs::create_directories(cfg.out);
  write_long_csv_file(filled, (fs::path(cfg.out) / "imputed.csv").string());
  std::cout << "impute: wrote completed panel (" << cfg.mode << ")\n";
  return 0;
}

int cmd_bootstrap(const RunConfig& cfg) {
  LoadedFit lf = load_and_fit(cfg);
  StdErrReport report;
  if (cfg.se_method == "bootstrap") {
    report = bootstrap_se(lf.data, cfg.k, lf.fit, cfg.reps, cfg.seed, lf.opts);
  } else if (cfg.se_method == "info") {
    report = info_matrix_se(lf.data, lf.fit, lf.opts);
  } else {
    throw InvalidInput("se-method must be bootstrap or info");
  }
  fs::create_directories(cfg.out);
  write_table(se_table(report), (fs::path(cfg.out) / "se").string(),
              cfg.out_format());
  std::cout << "se: method=" << report.method
            << " converged_replicates=" << report.converged_replicates
            << "/" << report.replicates << "\n";
  return 0;
}

int cmd_simulate(const RunConfig& cfg) {
  cfg.check();
  ScenarioSpec spec = default_scenario(cfg.k, cfg.sim_n, cfg.sim_p);
  spec.T = cfg.sim_t;
  spec.n_reps = cfg.sim_reps;
  spec.seed = cfg.seed;
  spec.validate();
  fs::create_directories(cfg.out);
  for (int b = 0; b < spec.n_reps; ++b) {
    PanelDataset panel = generate_panel(spec, b);
    char name[40];
    std::snprintf(name, sizeof(name), "panel_r%03d.csv", b + 1);
    write_long_csv_file(panel, (fs::path(cfg.out) / name).string());
  }
  StudyOptions study;
  study.fit = fit_options(cfg, false);
  study.workers = resolve_workers(cfg.workers);
  StudyReport report = run_study(spec, study);
  write_table(study_summary_table(report),
              (fs::path(cfg.out) / "study_summary").string(), cfg.out_format());
  write_table(study_transition_table(report),
              (fs::path(cfg.out) / "study_transition_avg").string(),
              cfg.out_format());
  std::cout << "simulate: k=" << cfg.k << " n=" << cfg.sim_n
            << " reps=" << spec.n_reps
            << " completed=" << report.n_completed
            << " mu_rmse=" << format_double(report.mu.rmse) << "\n";
  return 0;
}

void add_common(CLI::App* cmd, RunConfig& cfg, bool with_input) {
  cmd->set_help_flag("--help", "print this help message");
  if (with_input)
    cmd->add_option("--input", cfg.input, "long-format CSV input")->required();
  cmd->add_option("--schema", cfg.schema,
                  "column mapping id=..,time=..,drop=..,y=a;b,x=c;d");
  cmd->add_option("--tol", cfg.tol, "EM relative tolerance");
  cmd->add_option("--max-iter", cfg.max_iter, "EM iteration cap");
  cmd->add_option("--starts", cfg.starts, "random starts (default 5*k)");
  cmd->add_option("--h", cfg.h, "deterministic transition start constant");
  cmd->add_option("--seed", cfg.seed, "master seed");
  cmd->add_option("--out", cfg.out, "output directory");
  cmd->add_option("--format", cfg.format, "csv or json for tabular outputs");
  cmd->add_option("--workers", cfg.workers, "worker threads (0 = auto)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian hidden Markov models for longitudinal panels with "
               "intermittent missing responses and informative dropout"};
  app.require_subcommand(1);
  RunConfig cfg;

  CLI::App* fit = app.add_subcommand("fit", "fit the model for one k");
  add_common(fit, cfg, true);
  fit->add_option("--k", cfg.k, "number of substantive states")->required();

  CLI::App* select = app.add_subcommand("select", "fit a range of k and rank by BIC");
  add_common(select, cfg, true);
  select->add_option("--k-range", cfg.k_range, "e.g. 1..5 or 1,2,3")->required();

  CLI::App* decode = app.add_subcommand("decode", "local and global state decoding");
  add_common(decode, cfg, true);
  decode->add_option("--k", cfg.k)->required();

  CLI::App* impute = app.add_subcommand("impute", "fill missing responses");
  add_common(impute, cfg, true);
  impute->add_option("--k", cfg.k)->required();
  impute->add_option("--mode", cfg.mode, "conditional or unconditional");

  CLI::App* boot = app.add_subcommand("bootstrap", "standard errors");
  add_common(boot, cfg, true);
  boot->add_option("--k", cfg.k)->required();
  boot->add_option("--se-method", cfg.se_method, "bootstrap or info");
  boot->add_option("--reps", cfg.reps, "bootstrap replicates");

  CLI::App* sim = app.add_subcommand("simulate", "Monte Carlo study");
  add_common(sim, cfg, false);
  sim->add_option("--k", cfg.k, "number of substantive states (2 or 3)")->required();
  sim->add_option("--n", cfg.sim_n, "subjects per replicate");
  sim->add_option("--p", cfg.sim_p, "missingness/dropout level");
  sim->add_option("--t", cfg.sim_t, "occasions per subject");
  sim->add_option("--reps", cfg.sim_reps, "Monte Carlo replicates");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fit->parsed()) return cmd_fit(cfg);
    if (select->parsed()) return cmd_select(cfg);
    if (decode->parsed()) return cmd_decode(cfg);
    if (impute->parsed()) return cmd_impute(cfg);
    if (boot->parsed()) return cmd_bootstrap(cfg);
    if (sim->parsed()) return cmd_simulate(cfg);
  } catch (const ParseError& e) {
    std::cerr << "ParseError: " << e.what() << "\n";
    return 1;
  } catch (const InvalidDropout& e) {
    std::cerr << "InvalidDropout: " << e.what() << "\n";
    return 1;
  } catch (const InconsistentRow& e) {
    std::cerr << "InconsistentRow: " << e.what() << "\n";
    return 1;
  } catch (const InvalidInput& e) {
    std::cerr << "InvalidInput: " << e.what() << "\n";
    return 1;
  } catch (const FitFailed& e) {
    std::cerr << "FitFailed: " << e.what() << "\n";
    return 2;
  } catch (const BootstrapFailed& e) {
    std::cerr << "BootstrapFailed: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "EstimationError: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
