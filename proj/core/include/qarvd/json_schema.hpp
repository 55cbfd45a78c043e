#ifndef QARVD_JSON_SCHEMA_HPP
#define QARVD_JSON_SCHEMA_HPP

#include <string>

#include <json.hpp>

namespace qarvd {

// Structural validator for the bundled report schemas. Supports the subset
// those schemas use: "type" (object/array/string/number/integer/boolean),
// "required", "properties", "items", "enum", "minItems".
struct SchemaResult {
  bool ok = true;
  std::string error;  // first violation, with a JSON-pointer-ish path
};

SchemaResult validate_json(const nlohmann::json& doc, const nlohmann::json& schema);
SchemaResult validate_json_file(const std::string& doc_path, const std::string& schema_path);

}  // namespace qarvd

#endif  // QARVD_JSON_SCHEMA_HPP
