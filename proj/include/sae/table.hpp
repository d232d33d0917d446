#pragma once
// Minimal delimited-text table reader/writer. Fields may be double-quoted;
// embedded quotes are doubled.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace sae {

struct DelimitedTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// 1-based line number of each row in the source file (header is line 1).
  std::vector<std::size_t> line_numbers;

  std::optional<std::size_t> column(const std::string& name) const;
  std::size_t require_column(const std::string& name) const;
};

std::vector<std::string> split_delimited_line(const std::string& line, char delim);

DelimitedTable read_delimited(const std::filesystem::path& path, char delim = ',');

std::string join_delimited(const std::vector<std::string>& fields, char delim = ',');

void write_delimited(const std::filesystem::path& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows, char delim = ',');

}  // namespace sae
