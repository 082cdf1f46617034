#include <csignal>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dosefind/conduct_http.hpp"
#include "dosefind/config.hpp"
#include "dosefind/properties.hpp"
#include "dosefind/report.hpp"
#include "dosefind/sa.hpp"
#include "dosefind/sim.hpp"

namespace {

namespace fs = std::filesystem;
using namespace dosefind;
using nlohmann::json;

enum Exit { kOk = 0, kPropertyFail = 1, kConfig = 2, kRuntime = 3, kInconclusive = 4 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> reps;
  std::optional<int> threads;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON configuration file");
  cmd->add_option("--seed", c.seed, "base seed (execution.seed)");
  cmd->add_option("--reps", c.reps, "Monte Carlo replicates (execution.reps)");
  cmd->add_option("--threads", c.threads, "worker threads, 0 = all cores (execution.threads)");
  cmd->add_option("--out", c.out, "output directory (output.dir)");
  cmd->add_option("--set", c.sets, "override a key: --set design.b=0.2 (repeatable)");
  cmd->footer("\n" + config::schema_help());
}

json load(const Common& c) {
  json doc = c.config_path.empty() ? json::object() : config::load_file(c.config_path);
  for (const auto& s : c.sets) config::apply_override(doc, s);
  if (c.seed) doc["execution"]["seed"] = *c.seed;
  if (c.reps) doc["execution"]["reps"] = *c.reps;
  if (c.threads) doc["execution"]["threads"] = *c.threads;
  if (!c.out.empty()) doc["output"]["dir"] = c.out;
  config::validate_schema(doc);
  return doc;
}

fs::path out_dir(const config::RunConfig& rc) {
  fs::path dir(rc.out_dir);
  fs::create_directories(dir);
  return dir;
}

int cmd_simulate(const Common& c) {
  const auto rc = config::build_run(load(c), true);
  const auto rep = sim::run_mc(*rc.design, *rc.truth, rc.K, rc.N, rc.m, rc.reps, rc.seed, rc.threads);
  const auto dir = out_dir(rc);
  report::write_file(dir / "report.json", report::to_json(rep).dump(2) + "\n");
  if (rc.csv) report::write_file(dir / "report.csv", report::to_csv(rep));
  std::cout << report::summary_table(rep);
  return kOk;
}

ToxScenario scenario_of(const config::RunConfig& rc, const char* why) {
  if (!rc.truth || !std::holds_alternative<ToxScenario>(*rc.truth)) {
    throw ConfigError(std::string(why) + " needs a toxicity scenario", {"truth.probs"});
  }
  return std::get<ToxScenario>(*rc.truth);
}

std::optional<TrialState> prefix_of(const config::RunConfig& rc) {
  const auto raw = config::raw(rc.doc, "verify.prefix");
  if (raw.empty()) return std::nullopt;
  TrialState s(DoseGrid(rc.K), rc.m);
  try {
    for (const auto& c : raw) {
      const Level level = c.at(0).get<Level>();
      s.append(Cohort{level, static_cast<double>(level), c.at(1).get<Outcomes>()});
    }
  } catch (const json::exception&) {
    throw ConfigError("prefix entries look like [level, [outcomes...]]", {"verify.prefix"});
  } catch (const StateError& e) {
    throw ConfigError(e.what(), {"verify.prefix"});
  }
  return s;
}

properties::PropertyReport run_verify(const std::string& property, const config::RunConfig& rc) {
  using namespace properties;
  const json& doc = rc.doc;
  const double p = rc.design->target();
  if (property == "coherence") {
    return check_coherence(*rc.design, rc.K, config::get<int>(doc, "verify.horizon"), rc.m, p,
                           config::get<double>(doc, "verify.path_budget"));
  }
  if (property == "rigidity") {
    const auto kind = config::get<std::string>(doc, "design.kind");
    if (kind == "dsa" && !config::get<bool>(doc, "design.coherence_guard")) {
      return certify_dsa_rigidity(config::get<double>(doc, "design.b"), p, rc.K,
                                  config::get<int>(doc, "design.start_level"), rc.m);
    }
    RigidityOptions opts;
    opts.threshold = config::get<double>(doc, "verify.threshold");
    opts.prefix = prefix_of(rc);
    opts.threads = rc.threads;
    return detect_rigidity_empirical(*rc.design, scenario_of(rc, "rigidity"), config::get<double>(doc, "verify.p_lower"),
                                     config::get<double>(doc, "verify.p_upper"), rc.N, rc.m, rc.reps, rc.seed, opts);
  }
  if (property == "indifference") {
    std::vector<ToxScenario> family;
    for (const auto& s : config::raw(doc, "verify.scenarios")) family.emplace_back(s.get<std::vector<double>>());
    if (family.empty()) family.push_back(scenario_of(rc, "indifference"));
    return estimate_indifference(*rc.design, family, config::get<std::vector<double>>(doc, "verify.delta_grid"),
                                 config::get<int>(doc, "verify.n0"), rc.N, rc.m, rc.reps, rc.seed,
                                 config::get<double>(doc, "verify.eps"), rc.threads);
  }
  if (property == "unbiasedness") {
    const auto base = scenario_of(rc, "unbiasedness");
    const Level k = config::has(doc, "verify.level") ? config::get<int>(doc, "verify.level") : true_mtd(base, p);
    std::vector<Perturbation> perts;
    try {
      for (const auto& e : config::raw(doc, "verify.perturbations")) {
        perts.push_back({e.at("level").get<Level>(), e.at("prob").get<double>()});
      }
    } catch (const json::exception&) {
      throw ConfigError("perturbations look like {\"level\": i, \"prob\": q}", {"verify.perturbations"});
    }
    return probe_unbiasedness(*rc.design, base, k, perts, rc.N, rc.m, rc.reps, rc.seed, rc.threads);
  }
  throw ConfigError("unknown property " + property + " (coherence | rigidity | indifference | unbiasedness)",
                    {"property"});
}

int cmd_verify(const std::string& property, const Common& c) {
  const auto doc = load(c);
  const bool need_truth = property == "unbiasedness" ||
                          (property == "rigidity" && config::get<std::string>(doc, "design.kind") != "dsa");
  const auto rc = config::build_run(doc, need_truth);
  const auto rep = run_verify(property, rc);
  const auto dir = out_dir(rc);
  report::write_file(dir / "report.json", report::to_json(rep).dump(2) + "\n");
  if (rc.csv) report::write_file(dir / "report.csv", report::to_csv(rep));
  report::write_file(dir / "witnesses.json", report::witnesses_json(rep).dump(2) + "\n");
  std::cout << rep.property << ": " << properties::to_string(rep.verdict) << "\n";
  for (const auto& [k, v] : rep.statistics) std::cout << "  " << k << " = " << v << "\n";
  for (const auto& w : rep.witnesses) std::cout << "  witness: " << w.path() << " (" << w.transition << ")\n";
  if (!rep.note.empty()) std::cout << "  " << rep.note << "\n";
  switch (rep.verdict) {
    case properties::Verdict::pass: return kOk;
    case properties::Verdict::fail: return kPropertyFail;
    case properties::Verdict::inconclusive: return kInconclusive;
  }
  return kInconclusive;
}

int cmd_asymptotics(const Common& c) {
  const auto doc = load(c);
  const int m = config::get<int>(doc, "asymptotics.m");
  if (m < 2) throw ConfigError("the efficiency ratio needs m >= 2", {"asymptotics.m"});
  const double step = config::get<double>(doc, "asymptotics.step");
  if (!(step > 0.0 && step < 0.5)) throw ConfigError("step must lie in (0, 0.5)", {"asymptotics.step"});
  const auto curve = sa::efficiency_curve(m, step);
  report::json out;
  out["efficiency"] = report::to_json(curve, m);

  fs::path dir(config::get<std::string>(doc, "output.dir"));
  fs::create_directories(dir);
  std::cout << "efficiency ratio, m = " << m << ": minimum " << out["efficiency"]["minimum"]["ratio"].get<double>()
            << " at p = " << out["efficiency"]["minimum"]["p"].get<double>() << "\n";

  if (config::get<bool>(doc, "asymptotics.validate")) {
    json vdoc = doc;
    if (!config::has(vdoc, "truth.kind")) vdoc["truth"]["kind"] = "biomarker";
    const auto truth = config::build_truth(vdoc, config::get<double>(vdoc, "design.target"));
    if (!std::holds_alternative<BiomarkerModel>(truth)) {
      throw ConfigError("variance checks need a biomarker truth", {"truth.kind"});
    }
    const auto& model = std::get<BiomarkerModel>(truth);
    const int n = config::get<int>(doc, "asymptotics.n");
    const int reps = config::get<int>(doc, "asymptotics.reps");
    const auto seed = config::get<std::uint64_t>(doc, "execution.seed");
    std::vector<sim::AsymptoticComparison> rows;
    for (const auto& name : config::get<std::vector<std::string>>(doc, "asymptotics.recursions")) {
      sim::Recursion kind;
      if (name == "rm") {
        kind = sim::Recursion::rm;
      } else if (name == "osa") {
        kind = sim::Recursion::osa;
      } else if (name == "logit_mle") {
        kind = sim::Recursion::logit_mle;
      } else {
        throw ConfigError("unknown recursion " + name, {"asymptotics.recursions"});
      }
      // Probe run fixes theta and the optimal constants for the defaults.
      sim::AsymptoticSetup setup;
      setup.m = m;
      setup.threads = static_cast<unsigned>(config::get<int>(doc, "execution.threads"));
      if (config::has(doc, "asymptotics.start")) setup.start = config::get<double>(doc, "asymptotics.start");
      const auto probe = sim::check_asymptotics(kind, model, 1, 2, seed, setup);
      if (kind == sim::Recursion::logit_mle) {
        const double p = model.p;
        setup.b_tilde = config::has(doc, "asymptotics.b_tilde") ? config::get<double>(doc, "asymptotics.b_tilde")
                                                                : probe.beta_tilde / (p * (1.0 - p));
      } else {
        setup.b = config::has(doc, "asymptotics.b") ? config::get<double>(doc, "asymptotics.b") : probe.beta;
      }
      rows.push_back(sim::check_asymptotics(kind, model, n, reps, seed, setup));
      const auto& r = rows.back();
      std::cout << name << ": empirical " << r.empirical_variance << ", formula " << r.formula_variance << ", ratio "
                << r.ratio << "\n";
    }
    out["variances"] = report::json::array();
    for (const auto& r : rows) out["variances"].push_back(report::to_json(r));
    report::write_file(dir / "variances.csv", report::to_csv(rows));
  }
  report::write_file(dir / "report.json", out.dump(2) + "\n");
  if (config::get<bool>(doc, "output.csv")) report::write_file(dir / "report.csv", report::to_csv(curve));
  return kOk;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const std::string& host, int port, const std::string& state_dir) {
  conduct::SessionStore store(state_dir);
  auto srv = conduct::make_server(store);
  g_server = srv.get();
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  if (!srv->bind_to_port(host, port)) {
    std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
    return kRuntime;
  }
  std::cout << "serving on " << host << ":" << port << ", " << store.ids().size() << " sessions restored from "
            << state_dir << std::endl;
  srv->listen_after_bind();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dosefind: dose-finding designs, simulation, property verification and trial conduct"};
  app.require_subcommand(1);
  app.footer("\n" + config::schema_help() +
             "\nExit codes: 0 pass, 1 property fails, 2 configuration error, 3 runtime error, 4 inconclusive.");

  Common common;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo operating characteristics of a design");
  add_common(simulate, common);

  std::string property;
  auto* verify = app.add_subcommand("verify", "check coherence | rigidity | indifference | unbiasedness");
  verify->add_option("property", property, "property to check")->required();
  add_common(verify, common);

  auto* asymptotics = app.add_subcommand("asymptotics", "efficiency-ratio curve and variance checks");
  add_common(asymptotics, common);

  std::string host = "127.0.0.1";
  int port = 8080;
  std::string state_dir = "sessions";
  auto* serve = app.add_subcommand("serve", "run the trial-conduct HTTP service");
  serve->add_option("--host", host, "listen address");
  serve->add_option("--port", port, "listen port");
  serve->add_option("--state-dir", state_dir, "directory of session event logs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*simulate) return cmd_simulate(common);
    if (*verify) return cmd_verify(property, common);
    if (*asymptotics) return cmd_asymptotics(common);
    if (*serve) return cmd_serve(host, port, state_dir);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    if (!e.fields().empty()) {
      std::cerr << "  fields:";
      for (const auto& f : e.fields()) std::cerr << " " << f;
      std::cerr << "\n";
    }
    return kConfig;
  } catch (const HorizonError& e) {
    std::cerr << "inconclusive: " << e.what() << "\n";
    return kInconclusive;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kRuntime;
}
