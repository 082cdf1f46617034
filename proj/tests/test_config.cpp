#include <gtest/gtest.h>

#include <set>
#include <string>

#include "dosefind/config.hpp"

using namespace dosefind;
using namespace dosefind::config;

namespace {

std::vector<std::string> fields_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.fields();
  }
  ADD_FAILURE() << "expected ConfigError";
  return {};
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

TEST(Schema, KeysAreUniqueAndTyped) {
  std::set<std::string> seen;
  const std::set<std::string> types = {"number", "integer", "string", "boolean", "array", "object"};
  for (const auto& k : schema()) {
    EXPECT_TRUE(seen.insert(k.key).second) << k.key;
    EXPECT_TRUE(types.count(k.type)) << k.key;
    EXPECT_FALSE(k.help.empty()) << k.key;
    EXPECT_TRUE(config::detail::type_ok(k.default_value, k.type)) << k.key;
  }
}

TEST(Schema, DefaultsAndLookup) {
  const json empty = json::object();
  EXPECT_EQ(get<std::string>(empty, "design.kind"), "crm");
  EXPECT_EQ(get<int>(empty, "trial.cohorts"), 20);
  EXPECT_EQ(levels(empty), 5);
  EXPECT_EQ(levels(json{{"truth", {{"probs", {0.1, 0.2, 0.3}}}}}), 3);
  EXPECT_EQ(levels(json{{"trial", {{"levels", 7}}}, {"truth", {{"probs", {0.1, 0.2, 0.3}}}}}), 7);
  EXPECT_THROW(get<double>(empty, "verify.p_lower"), ConfigError);
  EXPECT_EQ(fields_of([&] { get<double>(empty, "verify.p_lower"); }), std::vector<std::string>{"verify.p_lower"});
  EXPECT_EQ(fields_of([&] { get<int>(json{{"trial", {{"cohorts", "x"}}}}, "trial.cohorts"); }),
            std::vector<std::string>{"trial.cohorts"});
}

TEST(Validation, UnknownKeysAndTypesAreNamed) {
  const json bad_key = {{"design", {{"kind", "crm"}, {"bogus", 1}}}, {"extra", 2}};
  const auto f = fields_of([&] { validate_schema(bad_key); });
  EXPECT_TRUE(contains(f, "design.bogus"));
  EXPECT_TRUE(contains(f, "extra"));
  const json bad_type = {{"trial", {{"cohorts", 2.5}, {"cohort_size", "two"}}}};
  const auto g = fields_of([&] { validate_schema(bad_type); });
  EXPECT_TRUE(contains(g, "trial.cohorts"));
  EXPECT_TRUE(contains(g, "trial.cohort_size"));
  EXPECT_NO_THROW(validate_schema(json{{"trial", {{"cohorts", 4.0}}}}));
  EXPECT_THROW(validate_schema(json::array()), ConfigError);
}

TEST(Validation, ParseErrorsCarryPosition) {
  try {
    parse_text("{\n  \"design\": {\n    \"kind\": crm\n  }\n}", "cfg.json");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("cfg.json"), std::string::npos);
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  }
  EXPECT_THROW(load_file("/nonexistent/config.json"), ConfigError);
}

TEST(Overrides, ParseJsonElseString) {
  json cfg = json::object();
  apply_override(cfg, "design.kind=dsa");
  apply_override(cfg, "design.b=0.2");
  apply_override(cfg, "truth.probs=[0.1,0.2,0.3]");
  apply_override(cfg, "design.coherence_guard=true");
  EXPECT_EQ(cfg["design"]["kind"], "dsa");
  EXPECT_EQ(cfg["design"]["b"], 0.2);
  EXPECT_EQ(cfg["truth"]["probs"].size(), 3u);
  EXPECT_EQ(cfg["design"]["coherence_guard"], true);
  EXPECT_THROW(apply_override(cfg, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "=3"), ConfigError);
}

TEST(BuildDesign, EveryCatalogKindBuilds) {
  for (const auto& info : design_catalog()) {
    json cfg = {{"design", {{"kind", info.kind}, {"t0", 1.0}}}};
    const int m = info.kind == "three_plus_three" ? 3 : (info.kind == "vo" ? 2 : 1);
    const auto d = build_design(cfg, 5, m);
    EXPECT_EQ(d->kind(), info.kind);
    EXPECT_EQ(d->outcome_type() == OutcomeType::biomarker, info.outcome == "biomarker");
  }
}

TEST(BuildDesign, CrossFieldErrors) {
  const auto vo = fields_of([] { build_design(json{{"design", {{"kind", "vo"}}}}, 5, 1); });
  EXPECT_TRUE(contains(vo, "design.kind"));
  EXPECT_TRUE(contains(vo, "trial.cohort_size"));
  EXPECT_TRUE(contains(fields_of([] { build_design(json{{"design", {{"kind", "vo"}}}}, 5, 2); }), "design.t0"));
  EXPECT_TRUE(contains(fields_of([] { build_design(json{{"design", {{"kind", "nope"}}}}, 5, 1); }), "design.kind"));
  EXPECT_TRUE(contains(fields_of([] { build_design(json{{"design", {{"start_level", 9}}}}, 5, 1); }),
                       "design.start_level"));
  EXPECT_TRUE(contains(fields_of([] { build_design(json{{"design", {{"kind", "three_plus_three"}}}}, 5, 2); }),
                       "trial.cohort_size"));
  EXPECT_TRUE(contains(
      fields_of([] { build_design(json{{"design", {{"model", {{"skeleton", {0.1, 0.2}}}}}}}, 5, 1); }),
      "design.model.skeleton"));
  EXPECT_TRUE(contains(fields_of([] { build_design(json{{"design", {{"kind", "dsa"}, {"b", -1}}}}, 5, 1); }),
                       "design.b"));
}

TEST(BuildRun, PairingAndTruth) {
  json doc = {{"design", {{"kind", "vo"}}}, {"trial", {{"cohort_size", 2}}}, {"truth", {{"kind", "biomarker"}, {"t0", 2.0}}}};
  const auto rc = build_run(doc, true);
  EXPECT_EQ(rc.m, 2);
  ASSERT_TRUE(rc.truth.has_value());
  EXPECT_TRUE(std::holds_alternative<BiomarkerModel>(*rc.truth));
  const json mismatch = {{"design", {{"kind", "crm"}}}, {"truth", {{"kind", "biomarker"}}}};
  EXPECT_THROW(build_run(mismatch, true), ConfigError);
  const json missing = {{"design", {{"kind", "crm"}}}};
  EXPECT_TRUE(contains(fields_of([&] { build_run(missing, true); }), "truth.probs"));
}

TEST(DefaultSkeleton, TargetAtMiddle) {
  const auto s = default_skeleton(5, 0.2);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_NEAR(s[2], 0.2, 1e-15);
  for (std::size_t k = 1; k < s.size(); ++k) EXPECT_GT(s[k], s[k - 1]);
}

TEST(Catalog, ListsEveryDesignWithParameters) {
  const auto cat = catalog_json();
  ASSERT_TRUE(cat.contains("designs"));
  EXPECT_EQ(cat["designs"].size(), design_catalog().size());
  for (const auto& d : cat["designs"]) {
    EXPECT_TRUE(d.contains("kind"));
    EXPECT_TRUE(d.contains("outcome"));
    EXPECT_TRUE(d.contains("cohort_rule"));
    for (const auto& p : d["parameters"]) EXPECT_NE(find_key(p["key"].get<std::string>()), nullptr);
  }
  bool dsa_has_b = false;
  for (const auto& d : cat["designs"]) {
    if (d["kind"] == "dsa") {
      for (const auto& p : d["parameters"]) dsa_has_b |= p["key"] == "design.b";
    }
  }
  EXPECT_TRUE(dsa_has_b);
  EXPECT_FALSE(cat["common"].empty());
}

TEST(Help, ListsEveryKey) {
  const auto help = schema_help();
  for (const auto& k : schema()) EXPECT_NE(help.find(k.key), std::string::npos) << k.key;
}
