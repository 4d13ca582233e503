#pragma once

// JSON documents for plans, scenario specs and network shapes. Parsing starts
// from the defaults and overrides only the keys present; unknown keys and
// type mismatches are validation errors naming the field path.

#include <nlohmann/json.hpp>

#include "cmc/heads_losses.hpp"
#include "cmc/rbt_net.hpp"
#include "cmc/scenario.hpp"
#include "cmc/trainer.hpp"

namespace cmc {

using Json = nlohmann::json;

Json to_json(const RbtConfig& c);
Json to_json(const MlpConfig& c);
Json to_json(const TransformSpec& s);
Json to_json(const HeadConfig& c);
Json to_json(const LossWeights& w);
Json to_json(const TrainPlan& p);
Json to_json(const ModelSpec& m);
Json to_json(const ScenarioSpec& s);

TransformSpec transform_spec_from_json(const Json& j);
TrainPlan plan_from_json(const Json& j);
ScenarioSpec scenario_spec_from_json(const Json& j);

// Reads and parses a JSON file; I/O and parse failures are reported with the
// path.
Json read_json_file(const std::string& path);

}  // namespace cmc
