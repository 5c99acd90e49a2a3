#pragma once

// JSON Schema (draft-04) validation of experiment configurations.

#include <optional>
#include <string>

namespace aggva {

struct SchemaIssue {
  std::string pointer;         // JSON pointer into the instance, "" for the root
  std::string keyword;         // violated schema keyword
  std::string schema_pointer;  // location of that keyword in the schema
};

/// First violation of `schema_text` by `instance_text`, or nullopt when valid.
/// Throws ConfigError when either text is not JSON.
std::optional<SchemaIssue> validate_against_schema(const std::string& instance_text, const std::string& schema_text);

/// The experiment schema shipped in schema/experiment.schema.json, compiled in.
const std::string& experiment_schema_text();

}  // namespace aggva
