#pragma once

// Text serialization shared by the surrogate, measurement, checkpoint and
// report files. Documents are JSON; every floating-point number is written
// with 17 significant digits so files round-trip bit-exactly.

#include "mixem/diffcore.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace mixem {

using Json = nlohmann::json;

/// Like Json::dump, but doubles are printed with %.17g. Throws
/// NumericalError for non-finite numbers.
[[nodiscard]] std::string dump_precise(const Json& doc, int indent = 1);

/// Writes `text` to `path`, creating parent directories. Errors name the path.
void write_text_file(const std::filesystem::path& path, const std::string& text);
[[nodiscard]] std::string read_text_file(const std::filesystem::path& path);

[[nodiscard]] Json read_json_file(const std::filesystem::path& path);

/// 64-bit FNV-1a.
[[nodiscard]] std::uint64_t fnv1a(std::string_view bytes) noexcept;
[[nodiscard]] std::string hex64(std::uint64_t v);

[[nodiscard]] std::string format_double(double v);

[[nodiscard]] Json to_json(const Vec& v);
[[nodiscard]] Json to_json(const Mat& m); ///< array of rows
[[nodiscard]] Vec vec_from_json(const Json& j);
[[nodiscard]] Mat mat_from_json(const Json& j); ///< array of rows

/// Columns of `m` as an array of arrays.
[[nodiscard]] Json columns_to_json(const Mat& m);
[[nodiscard]] Mat columns_from_json(const Json& j, Index rows);

} // namespace mixem
