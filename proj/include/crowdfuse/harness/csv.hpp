#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace crowdfuse::harness {

inline constexpr int kSchemaVersion = 1;

/// Shortest round-trip decimal form; locale independent.
std::string format_double(double x);

/// A small CSV table: a `# schema_version=N` comment, a header row, then rows.
/// Cells are written verbatim, so callers format numbers with format_double.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> cells);
  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string to_string() const;
  /// Writes to path.tmp then renames over path.
  void write_atomic(const std::filesystem::path& path) const;

  /// Parses text produced by to_string(). Throws std::runtime_error on a
  /// missing header or ragged row.
  static CsvTable parse(std::string_view text);
  static CsvTable read(const std::filesystem::path& path);

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace crowdfuse::harness
