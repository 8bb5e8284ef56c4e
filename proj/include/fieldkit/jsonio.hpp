#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

namespace fieldkit {

using Json = nlohmann::ordered_json;

Json read_json_file(const std::filesystem::path& path);
/// Pretty-printed, trailing newline; byte-stable for identical input.
void write_json_file(const std::filesystem::path& path, const Json& value);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

/// Shortest round-trip decimal for a double; "nan"/"inf" spelled out.
std::string format_double(double v);

}  // namespace fieldkit
