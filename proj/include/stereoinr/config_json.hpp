#pragma once

#include "json.hpp"
#include "stereoinr/model.hpp"

namespace stereoinr {

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace stereoinr
