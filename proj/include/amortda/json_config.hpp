#pragma once

#include <json.hpp>

#include "amortda/dynamics.hpp"
#include "amortda/observations.hpp"

namespace amortda {

nlohmann::json system_to_json(const SystemSpec& s);
SystemSpec system_from_json(const nlohmann::json& j);
nlohmann::json operator_to_json(const ObservationOperator& op);
ObservationOperator operator_from_json(const nlohmann::json& j);

}  // namespace amortda
