#include "qarvd/json_schema.hpp"

#include <fstream>
#include <sstream>

namespace qarvd {

using nlohmann::json;

namespace {

bool type_matches(const json& doc, const std::string& type) {
  if (type == "object") return doc.is_object();
  if (type == "array") return doc.is_array();
  if (type == "string") return doc.is_string();
  if (type == "number") return doc.is_number();
  if (type == "integer") return doc.is_number_integer() || doc.is_number_unsigned();
  if (type == "boolean") return doc.is_boolean();
  if (type == "null") return doc.is_null();
  return false;
}

SchemaResult fail(const std::string& path, const std::string& what) {
  return {false, path.empty() ? what : path + ": " + what};
}

SchemaResult check(const json& doc, const json& schema, const std::string& path) {
  if (schema.contains("type")) {
    const std::string type = schema.at("type").get<std::string>();
    if (!type_matches(doc, type)) return fail(path, "expected type " + type);
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& v : schema.at("enum"))
      if (v == doc) found = true;
    if (!found) return fail(path, "value not in enum");
  }
  if (doc.is_object() && schema.contains("required")) {
    for (const auto& key : schema.at("required")) {
      const std::string k = key.get<std::string>();
      if (!doc.contains(k)) return fail(path, "missing required key '" + k + "'");
    }
  }
  if (doc.is_object() && schema.contains("properties")) {
    for (const auto& [key, sub] : schema.at("properties").items()) {
      if (!doc.contains(key)) continue;
      const SchemaResult r = check(doc.at(key), sub, path + "/" + key);
      if (!r.ok) return r;
    }
  }
  if (doc.is_array()) {
    if (schema.contains("minItems") && doc.size() < schema.at("minItems").get<size_t>())
      return fail(path, "array shorter than minItems");
    if (schema.contains("items")) {
      for (size_t i = 0; i < doc.size(); ++i) {
        const SchemaResult r =
            check(doc.at(i), schema.at("items"), path + "/" + std::to_string(i));
        if (!r.ok) return r;
      }
    }
  }
  return {true, ""};
}

}  // namespace

SchemaResult validate_json(const json& doc, const json& schema) {
  return check(doc, schema, "");
}

SchemaResult validate_json_file(const std::string& doc_path, const std::string& schema_path) {
  auto slurp = [](const std::string& p) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot open for reading: " + p);
    std::stringstream ss;
    ss << is.rdbuf();
    return json::parse(ss.str());
  };
  return validate_json(slurp(doc_path), slurp(schema_path));
}

}  // namespace qarvd
