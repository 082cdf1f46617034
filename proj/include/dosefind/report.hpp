#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dosefind/core.hpp"
#include "dosefind/properties.hpp"
#include "dosefind/sa.hpp"
#include "dosefind/sim.hpp"

namespace dosefind::report {

using json = nlohmann::ordered_json;

inline json to_json(const DoseDecision& d) {
  json j;
  j["next_level"] = d.next_level;
  j["assigned"] = d.assigned;
  j["kind"] = std::string(to_string(d.kind));
  j["rationale"] = d.rationale;
  j["mtd_declared"] = d.mtd_declared ? json(*d.mtd_declared) : json(nullptr);
  j["clamped"] = d.clamped;
  return j;
}

inline json to_json(const sim::TrialTrajectory& t) {
  json j;
  j["design"] = t.design;
  j["seed"] = t.seed;
  j["replicate"] = t.replicate;
  j["start"] = to_json(t.start);
  j["cohorts"] = json::array();
  for (const auto& c : t.cohorts) {
    j["cohorts"].push_back(
        {{"level", c.level}, {"assigned", c.assigned}, {"outcomes", c.outcomes}, {"decision", to_json(c.decision)}});
  }
  j["recommendation"] = t.recommendation ? json(*t.recommendation) : json(nullptr);
  j["stopped"] = t.stopped;
  return j;
}

/// Aggregate report; per-replicate records are omitted unless requested.
inline json to_json(const sim::SimReport& r, bool with_records = false) {
  json j;
  j["design"] = r.design;
  j["reps"] = r.reps;
  j["cohorts"] = r.cohorts;
  j["cohort_size"] = r.cohort_size;
  j["seed"] = r.seed;
  j["nu"] = r.nu;
  j["pcs"] = r.pcs;
  j["pcs_se"] = r.pcs_se;
  j["selection"] = r.selection;
  j["allocation"] = r.allocation;
  j["mean_subjects"] = r.mean_subjects;
  j["mean_toxicities"] = r.mean_toxicities;
  j["cost_mean"] = r.cost_mean;
  j["cost_sd"] = r.cost_sd;
  j["cost_se"] = r.cost_se;
  if (with_records) {
    j["records"] = json::array();
    for (const auto& rec : r.records) {
      j["records"].push_back({{"recommendation", rec.recommendation ? json(*rec.recommendation) : json(nullptr)},
                              {"correct", rec.correct},
                              {"subjects", rec.subjects},
                              {"toxicities", rec.toxicities},
                              {"cost", rec.cost},
                              {"stopped", rec.stopped},
                              {"allocation", rec.allocation}});
    }
  }
  return j;
}

inline json to_json(const properties::Witness& w) {
  json j;
  j["path"] = w.path();
  j["outcomes"] = w.outcomes;
  j["doses"] = w.doses;
  j["transition"] = w.transition;
  j["seed"] = w.seed ? json(*w.seed) : json(nullptr);
  j["replicate"] = w.replicate ? json(*w.replicate) : json(nullptr);
  return j;
}

inline json to_json(const properties::PropertyReport& r) {
  json j;
  j["property"] = r.property;
  j["verdict"] = std::string(properties::to_string(r.verdict));
  j["statistics"] = json::object();
  for (const auto& [k, v] : r.statistics) j["statistics"][k] = v;
  j["witness_count"] = r.witnesses.size();
  j["note"] = r.note;
  return j;
}

inline json witnesses_json(const properties::PropertyReport& r) {
  json j = json::array();
  for (const auto& w : r.witnesses) j.push_back(to_json(w));
  return j;
}

inline json to_json(const sim::AsymptoticComparison& c) {
  json j;
  j["recursion"] = std::string(sim::to_string(c.recursion));
  j["n"] = c.n;
  j["reps"] = c.reps;
  j["theta"] = c.theta;
  j["beta"] = c.beta;
  j["beta_tilde"] = c.beta_tilde;
  j["b_effective"] = c.b_effective;
  j["empirical_variance"] = c.empirical_variance;
  j["formula_variance"] = c.formula_variance;
  j["ratio"] = c.ratio;
  j["ratio_ci"] = {c.ratio_ci_low, c.ratio_ci_high};
  j["mean_scaled_error"] = c.mean_scaled_error;
  return j;
}

inline json to_json(const std::vector<sa::CurvePoint>& curve, int m) {
  json pts = json::array();
  double best_p = 0.0, best = 0.0;
  for (const auto& c : curve) {
    pts.push_back({c.p, c.ratio});
    if (best == 0.0 || c.ratio < best) {
      best = c.ratio;
      best_p = c.p;
    }
  }
  return {{"m", m}, {"minimum", {{"p", best_p}, {"ratio", best}}}, {"curve", pts}};
}

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

/// One row per level: selection probability and mean allocation.
inline std::string to_csv(const sim::SimReport& r) {
  std::ostringstream os;
  os << "level,selection,allocation\n";
  os << "none," << fmt(r.selection[0], 17) << ",\n";
  for (std::size_t k = 1; k < r.selection.size(); ++k) {
    os << k << "," << fmt(r.selection[k], 17) << "," << fmt(r.allocation[k - 1], 17) << "\n";
  }
  return os.str();
}

inline std::string to_csv(const std::vector<sa::CurvePoint>& curve) {
  std::ostringstream os;
  os << "p,ratio\n";
  for (const auto& c : curve) os << fmt(c.p, 6) << "," << fmt(c.ratio, 17) << "\n";
  return os.str();
}

inline std::string to_csv(const std::vector<sim::AsymptoticComparison>& rows) {
  std::ostringstream os;
  os << "recursion,n,reps,theta,empirical_variance,formula_variance,ratio,ratio_ci_low,ratio_ci_high\n";
  for (const auto& c : rows) {
    os << sim::to_string(c.recursion) << "," << c.n << "," << c.reps << "," << fmt(c.theta, 17) << ","
       << fmt(c.empirical_variance, 17) << "," << fmt(c.formula_variance, 17) << "," << fmt(c.ratio, 17) << ","
       << fmt(c.ratio_ci_low, 17) << "," << fmt(c.ratio_ci_high, 17) << "\n";
  }
  return os.str();
}

inline std::string to_csv(const properties::PropertyReport& r) {
  std::ostringstream os;
  os << "statistic,value\n";
  for (const auto& [k, v] : r.statistics) os << k << "," << fmt(v, 17) << "\n";
  return os.str();
}

/// Human-readable summary table of a simulation report.
inline std::string summary_table(const sim::SimReport& r) {
  std::ostringstream os;
  os << "design " << r.design << ": " << r.reps << " trials, " << r.cohorts << " cohorts of " << r.cohort_size
     << ", MTD level " << r.nu << "\n";
  os << "PCS " << fmt(r.pcs, 4) << " (se " << fmt(r.pcs_se, 2) << "), mean toxicities " << fmt(r.mean_toxicities, 4)
     << ", cost " << fmt(r.cost_mean, 5) << "\n";
  os << "  level   selected   allocated\n";
  os << "  none    " << std::setw(8) << fmt(r.selection[0], 4) << "\n";
  for (std::size_t k = 1; k < r.selection.size(); ++k) {
    os << "  " << std::setw(5) << k << "   " << std::setw(8) << fmt(r.selection[k], 4) << "   " << std::setw(9)
       << fmt(r.allocation[k - 1], 4) << "\n";
  }
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace dosefind::report
