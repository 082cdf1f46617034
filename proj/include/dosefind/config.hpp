#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosefind/core.hpp"
#include "dosefind/designs.hpp"
#include "dosefind/engine.hpp"
#include "dosefind/sim.hpp"

namespace dosefind::config {

using json = nlohmann::json;

struct ConfigKey {
  std::string key;      // dotted path
  std::string type;     // number | integer | string | boolean | array | object
  json default_value;   // null: required where used, or derived
  std::string help;
  std::vector<std::string> kinds = {};  // design kinds a design.* key applies to; empty = all
};

/// Every recognised configuration key. Help text, validation and the design
/// catalog served over HTTP are all generated from this table.
inline const std::vector<ConfigKey>& schema() {
  static const std::vector<ConfigKey> keys = {
      {"design.kind", "string", "crm",
       "three_plus_three | biased_coin | crm | likelihood_crm | isotonic | dsa | vo | constant"},
      {"design.target", "number", 0.2, "target toxicity probability p"},
      {"design.start_level", "integer", 1, "level of the first cohort"},
      {"design.coherence_guard", "boolean", false, "clamp incoherent moves to stay (binary designs)", {"three_plus_three", "biased_coin", "crm", "likelihood_crm", "isotonic", "dsa", "constant"}},
      {"design.b", "number", 1.0, "recursion constant b", {"dsa", "vo"}},
      {"design.t0", "number", nullptr, "biomarker toxicity threshold; defaults to truth.t0", {"vo"}},
      {"design.noise", "string", "normal", "biomarker noise family for the O-statistic: normal | logistic", {"vo"}},
      {"design.level", "integer", 1, "fixed level", {"constant"}},
      {"design.model.form", "string", "empiric", "working model: empiric | logistic | logistic_skeleton", {"crm", "likelihood_crm"}},
      {"design.model.skeleton", "array", nullptr,
       "prior toxicity guesses per level; default puts the target at the middle level", {"crm", "likelihood_crm"}},
      {"design.model.b_tilde", "number", 1.0, "slope of the logistic working model", {"crm", "likelihood_crm"}},
      {"design.model.intercept", "number", 3.0, "fixed intercept of the logistic_skeleton model", {"crm", "likelihood_crm"}},
      {"design.prior.mean", "number", 0.0, "normal prior mean of the model parameter", {"crm"}},
      {"design.prior.sd", "number", 1.34, "normal prior sd of the model parameter", {"crm"}},
      {"truth.kind", "string", "scenario", "scenario | biomarker"},
      {"truth.probs", "array", nullptr, "true toxicity probability per level (scenario)"},
      {"truth.mean.intercept", "number", 0.0, "M(x) = intercept + slope x (biomarker)"},
      {"truth.mean.slope", "number", 1.0, "slope of M (biomarker)"},
      {"truth.sd.intercept", "number", 1.0, "sigma(x) = intercept + slope x (biomarker)"},
      {"truth.sd.slope", "number", 0.0, "slope of sigma (biomarker)"},
      {"truth.t0", "number", 0.0, "toxicity threshold on the biomarker (biomarker)"},
      {"truth.noise", "string", "normal", "normal | logistic (biomarker)"},
      {"trial.levels", "integer", nullptr, "number of dose levels K; defaults to the scenario length, else 5"},
      {"trial.cohorts", "integer", 20, "number of cohorts N"},
      {"trial.cohort_size", "integer", 1, "subjects per cohort m"},
      {"trial.dose_tags", "array", json::array(), "display labels per level (not used in dose arithmetic)"},
      {"execution.reps", "integer", 1000, "Monte Carlo replicates"},
      {"execution.seed", "integer", 1, "base seed; replicate r uses stream (seed, r)"},
      {"execution.threads", "integer", 0, "worker threads (0 = all cores)"},
      {"output.dir", "string", ".", "directory for report files"},
      {"output.csv", "boolean", true, "also write report.csv"},
      {"verify.horizon", "integer", 10, "cohorts enumerated by the coherence check"},
      {"verify.path_budget", "number", 4194304.0, "largest number of enumerated paths"},
      {"verify.p_lower", "number", nullptr, "window lower bound p_L for empirical rigidity"},
      {"verify.p_upper", "number", nullptr, "window upper bound p_U for empirical rigidity"},
      {"verify.threshold", "number", 0.01, "exit probability regarded as rigidity"},
      {"verify.prefix", "array", json::array(), "forced initial cohorts [[level, [outcomes...]], ...]"},
      {"verify.scenarios", "array", json::array(), "scenario family (arrays of probabilities) for indifference"},
      {"verify.delta_grid", "array", json::array({0.01, 0.02, 0.03, 0.05, 0.07, 0.1, 0.15}),
       "candidate half-widths for indifference"},
      {"verify.n0", "integer", 10, "first cohort inside the indifference window"},
      {"verify.eps", "number", 0.01, "allowed fraction of runs outside the window"},
      {"verify.level", "integer", nullptr, "level k whose selection probability is probed; default nu"},
      {"verify.perturbations", "array", json::array(), "[{\"level\": i, \"prob\": p_i'}, ...] for unbiasedness"},
      {"asymptotics.m", "integer", 3, "cohort size for the efficiency curve"},
      {"asymptotics.step", "number", 0.001, "p-grid step of the efficiency curve"},
      {"asymptotics.validate", "boolean", false, "also run Monte Carlo variance checks"},
      {"asymptotics.recursions", "array", json::array({"rm", "osa", "logit_mle"}), "recursions to validate"},
      {"asymptotics.n", "integer", 2000, "cohorts per replicate in variance checks"},
      {"asymptotics.reps", "integer", 2000, "replicates in variance checks"},
      {"asymptotics.b", "number", nullptr, "recursion constant; default the optimal b = beta"},
      {"asymptotics.b_tilde", "number", nullptr, "working-model slope; default the optimal value"},
      {"asymptotics.start", "number", nullptr, "starting dose; default theta + 0.5"},
  };
  return keys;
}

inline const ConfigKey* find_key(std::string_view dotted) {
  for (const auto& k : schema()) {
    if (k.key == dotted) return &k;
  }
  return nullptr;
}

inline json::json_pointer pointer(std::string_view dotted) {
  std::string p = "/";
  for (char c : dotted) p += (c == '.') ? '/' : c;
  return json::json_pointer(p);
}

inline bool has(const json& cfg, std::string_view dotted) {
  const auto ptr = pointer(dotted);
  return cfg.contains(ptr) && !cfg.at(ptr).is_null();
}

/// Value at `dotted`, falling back to the schema default.
inline json raw(const json& cfg, std::string_view dotted) {
  if (has(cfg, dotted)) return cfg.at(pointer(dotted));
  const auto* k = find_key(dotted);
  if (!k) throw ConfigError("unknown configuration key " + std::string(dotted), {std::string(dotted)});
  return k->default_value;
}

template <class T>
T get(const json& cfg, std::string_view dotted) {
  const json v = raw(cfg, dotted);
  if (v.is_null()) throw ConfigError("missing required key " + std::string(dotted), {std::string(dotted)});
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("wrong type for " + std::string(dotted), {std::string(dotted)});
  }
}

namespace detail {

inline bool type_ok(const json& v, const std::string& type) {
  if (v.is_null()) return true;
  if (type == "number") return v.is_number();
  if (type == "integer") return v.is_number_integer() || (v.is_number() && std::floor(v.get<double>()) == v.get<double>());
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "array") return v.is_array();
  return v.is_object();
}

inline void walk(const json& node, const std::string& prefix, std::vector<std::string>& bad_keys,
                 std::vector<std::string>& bad_types) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    const auto* k = find_key(key);
    if (k) {
      if (!type_ok(it.value(), k->type)) bad_types.push_back(key);
      continue;
    }
    if (it.value().is_object()) {
      bool is_section = false;
      for (const auto& s : schema()) {
        if (s.key.rfind(key + ".", 0) == 0) is_section = true;
      }
      if (is_section) {
        walk(it.value(), key, bad_keys, bad_types);
        continue;
      }
    }
    bad_keys.push_back(key);
  }
}

}  // namespace detail

/// Rejects unknown keys and type mismatches, naming every offending field.
inline void validate_schema(const json& cfg) {
  if (!cfg.is_object()) throw ConfigError("configuration must be a JSON object");
  std::vector<std::string> bad_keys, bad_types;
  detail::walk(cfg, "", bad_keys, bad_types);
  if (!bad_keys.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const auto& k : bad_keys) msg += " " + k;
    throw ConfigError(msg, bad_keys);
  }
  if (!bad_types.empty()) {
    std::string msg = "wrong value types for:";
    for (const auto& k : bad_types) msg += " " + k + " (expected " + find_key(k)->type + ")";
    throw ConfigError(msg, bad_types);
  }
}

/// Applies "a.b.c=value"; the value is parsed as JSON when possible and
/// taken as a string otherwise.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like key=value: " + assignment);
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  cfg[pointer(key)] = value;
}

inline json parse_text(const std::string& text, const std::string& origin = "config") {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

inline json load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

inline Noise parse_noise(const std::string& s, const std::string& field) {
  if (s == "normal") return Noise::normal;
  if (s == "logistic") return Noise::logistic;
  throw ConfigError("unknown noise family " + s, {field});
}

inline int levels(const json& cfg) {
  if (has(cfg, "trial.levels")) return get<int>(cfg, "trial.levels");
  if (has(cfg, "truth.probs")) return static_cast<int>(raw(cfg, "truth.probs").size());
  return 5;
}

inline std::vector<double> default_skeleton(int K, double target) {
  // Target at the middle level, neighbours 0.6 apart on the logit scale.
  const int mid = (K + 1) / 2;
  std::vector<double> s;
  for (int k = 1; k <= K; ++k) {
    const double eta = std::log(target / (1.0 - target)) + 0.6 * (k - mid);
    s.push_back(1.0 / (1.0 + std::exp(-eta)));
  }
  return s;
}

inline designs::WorkingModel working_model(const json& cfg, int K) {
  designs::WorkingModel model;
  const auto form = get<std::string>(cfg, "design.model.form");
  if (form == "empiric") {
    model.form = designs::ModelForm::empiric;
  } else if (form == "logistic") {
    model.form = designs::ModelForm::logistic;
  } else if (form == "logistic_skeleton") {
    model.form = designs::ModelForm::logistic_skeleton;
  } else {
    throw ConfigError("unknown working model form " + form, {"design.model.form"});
  }
  model.target = get<double>(cfg, "design.target");
  model.b_tilde = get<double>(cfg, "design.model.b_tilde");
  model.intercept = get<double>(cfg, "design.model.intercept");
  model.skeleton = has(cfg, "design.model.skeleton") ? get<std::vector<double>>(cfg, "design.model.skeleton")
                                                      : default_skeleton(K, model.target);
  model.validate(K);
  return model;
}

/// Design described by the `design` block, validated against K and m.
inline DesignPtr build_design(const json& cfg, int K, int m) {
  const auto kind = get<std::string>(cfg, "design.kind");
  const double p = get<double>(cfg, "design.target");
  const Level start = get<int>(cfg, "design.start_level");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("target must lie in (0, 1)", {"design.target"});

  DesignPtr d;
  if (kind == "three_plus_three") {
    d = std::make_shared<ThreePlusThree>(p, start);
  } else if (kind == "biased_coin") {
    d = std::make_shared<BiasedCoin>(p, start);
  } else if (kind == "crm") {
    designs::CrmPrior prior{get<double>(cfg, "design.prior.mean"), get<double>(cfg, "design.prior.sd")};
    d = std::make_shared<BayesianCrm>(working_model(cfg, K), prior, start);
  } else if (kind == "likelihood_crm") {
    d = std::make_shared<LikelihoodCrm>(working_model(cfg, K), start);
  } else if (kind == "isotonic") {
    d = std::make_shared<IsotonicDesign>(p, start);
  } else if (kind == "dsa") {
    d = std::make_shared<DiscretizedSa>(get<double>(cfg, "design.b"), p, start);
  } else if (kind == "vo") {
    if (m < 2) throw ConfigError("O-statistic designs need cohort_size >= 2", {"design.kind", "trial.cohort_size"});
    double t0 = 0.0;
    if (has(cfg, "design.t0")) {
      t0 = get<double>(cfg, "design.t0");
    } else if (get<std::string>(cfg, "truth.kind") == "biomarker") {
      t0 = get<double>(cfg, "truth.t0");
    } else {
      throw ConfigError("vo needs a toxicity threshold", {"design.t0"});
    }
    d = std::make_shared<VirtualObservationSa>(get<double>(cfg, "design.b"), p, t0,
                                               parse_noise(get<std::string>(cfg, "design.noise"), "design.noise"),
                                               start);
  } else if (kind == "constant") {
    d = std::make_shared<ConstantDose>(get<int>(cfg, "design.level"), p);
  } else {
    throw ConfigError("unknown design kind " + kind, {"design.kind"});
  }
  if (get<bool>(cfg, "design.coherence_guard")) d = std::make_shared<CoherenceGuard>(d);
  d->check_compatible(K, m);
  return d;
}

inline sim::Truth build_truth(const json& cfg, double p) {
  const auto kind = get<std::string>(cfg, "truth.kind");
  if (kind == "scenario") {
    if (!has(cfg, "truth.probs")) throw ConfigError("scenario truth needs probabilities", {"truth.probs"});
    return ToxScenario(get<std::vector<double>>(cfg, "truth.probs"));
  }
  if (kind == "biomarker") {
    return BiomarkerModel::linear(get<double>(cfg, "truth.mean.intercept"), get<double>(cfg, "truth.mean.slope"),
                                  get<double>(cfg, "truth.sd.intercept"), get<double>(cfg, "truth.sd.slope"),
                                  get<double>(cfg, "truth.t0"), p,
                                  parse_noise(get<std::string>(cfg, "truth.noise"), "truth.noise"));
  }
  throw ConfigError("unknown truth kind " + kind, {"truth.kind"});
}

/// Parsed and cross-validated run configuration.
struct RunConfig {
  json doc;
  int K = 5;
  int N = 20;
  int m = 1;
  DesignPtr design;
  std::optional<sim::Truth> truth;
  int reps = 1000;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::string out_dir = ".";
  bool csv = true;
};

inline RunConfig build_run(const json& doc, bool need_truth) {
  validate_schema(doc);
  RunConfig rc;
  rc.doc = doc;
  rc.K = levels(doc);
  rc.N = get<int>(doc, "trial.cohorts");
  rc.m = get<int>(doc, "trial.cohort_size");
  if (rc.N < 1) throw ConfigError("cohorts must be positive", {"trial.cohorts"});
  if (rc.m < 1) throw ConfigError("cohort size must be positive", {"trial.cohort_size"});
  DoseGrid grid(rc.K, get<std::vector<double>>(doc, "trial.dose_tags"));
  rc.design = build_design(doc, rc.K, rc.m);
  if (need_truth || has(doc, "truth.kind") || has(doc, "truth.probs")) {
    rc.truth = build_truth(doc, rc.design->target());
    sim::check_pairing(*rc.design, *rc.truth, rc.K, rc.m);
  }
  rc.reps = get<int>(doc, "execution.reps");
  if (rc.reps < 1) throw ConfigError("reps must be at least 1", {"execution.reps"});
  rc.seed = get<std::uint64_t>(doc, "execution.seed");
  rc.threads = static_cast<unsigned>(get<int>(doc, "execution.threads"));
  rc.out_dir = get<std::string>(doc, "output.dir");
  rc.csv = get<bool>(doc, "output.csv");
  return rc;
}

struct DesignInfo {
  std::string kind;
  std::string outcome;  // binary | biomarker
  std::string cohort_rule;
  std::string description;
};

inline const std::vector<DesignInfo>& design_catalog() {
  static const std::vector<DesignInfo> info = {
      {"three_plus_three", "binary", "m = 3", "traditional 3+3 escalation with stopping"},
      {"biased_coin", "binary", "m = 1", "up-and-down biased coin targeting p <= 0.5"},
      {"crm", "binary", "m >= 1", "Bayesian continual reassessment with a one-parameter working model"},
      {"likelihood_crm", "binary", "m >= 1", "maximum-likelihood reassessment; starting level until the MLE exists"},
      {"isotonic", "binary", "m >= 1", "pool-adjacent-violators estimates, nearest to target"},
      {"dsa", "binary", "m >= 1", "discretized stochastic approximation on the level scale"},
      {"vo", "biomarker", "m >= 2", "stochastic approximation on virtual observations of the O-statistic"},
      {"constant", "binary", "m >= 1", "fixed level; reference design"},
  };
  return info;
}

/// Design catalog with the parameter schema of each design; shared keys
/// (target, start level, trial shape) are listed under "common".
inline json catalog_json() {
  auto entry = [](const ConfigKey& k) {
    return json{{"key", k.key}, {"type", k.type}, {"default", k.default_value}, {"help", k.help}};
  };
  json common = json::array();
  for (const auto& k : schema()) {
    if (k.key == "design.target" || k.key == "design.start_level" || k.key == "trial.levels" ||
        k.key == "trial.cohort_size" || k.key == "trial.dose_tags" || k.key == "execution.seed") {
      common.push_back(entry(k));
    }
  }
  json designs = json::array();
  for (const auto& d : design_catalog()) {
    json params = json::array();
    for (const auto& k : schema()) {
      if (std::find(k.kinds.begin(), k.kinds.end(), d.kind) != k.kinds.end()) params.push_back(entry(k));
    }
    designs.push_back({{"kind", d.kind},
                       {"outcome", d.outcome},
                       {"cohort_rule", d.cohort_rule},
                       {"description", d.description},
                       {"parameters", params}});
  }
  return {{"common", common}, {"designs", designs}};
}

/// Help text listing every key with its type and default.
inline std::string schema_help() {
  std::ostringstream os;
  os << "Configuration keys (JSON; override with --set key=value):\n";
  for (const auto& k : schema()) {
    os << "  " << k.key << " (" << k.type << ", default "
       << (k.default_value.is_null() ? std::string("none") : k.default_value.dump()) << ")\n      " << k.help
       << "\n";
  }
  return os.str();
}

}  // namespace dosefind::config
