#include "aggva/json_schema.hpp"

#include "aggva/error.hpp"

#include <rapidjson/document.h>
#include <rapidjson/error/en.h>
#include <rapidjson/schema.h>
#include <rapidjson/stringbuffer.h>

namespace aggva {

namespace {

rapidjson::Document parse(const std::string& text, const char* what) {
  rapidjson::Document d;
  d.Parse(text.c_str(), text.size());
  if (d.HasParseError())
    throw ConfigError(std::string(what) + " is not valid JSON at offset " + std::to_string(d.GetErrorOffset()) + ": " +
                      rapidjson::GetParseError_En(d.GetParseError()));
  return d;
}

std::string stringify(const rapidjson::Pointer& p) {
  rapidjson::StringBuffer sb;
  p.Stringify(sb);
  return sb.GetString();
}

}  // namespace

std::optional<SchemaIssue> validate_against_schema(const std::string& instance_text, const std::string& schema_text) {
  const rapidjson::Document schema_doc = parse(schema_text, "schema");
  const rapidjson::SchemaDocument schema(schema_doc);
  const rapidjson::Document instance = parse(instance_text, "configuration");
  rapidjson::SchemaValidator validator(schema);
  if (instance.Accept(validator)) return std::nullopt;
  return SchemaIssue{stringify(validator.GetInvalidDocumentPointer()), validator.GetInvalidSchemaKeyword(),
                     stringify(validator.GetInvalidSchemaPointer())};
}

}  // namespace aggva
