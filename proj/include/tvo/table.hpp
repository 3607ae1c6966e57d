#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace tvo {

enum class OutputFormat { csv, jsonl };

/// Parses "csv" or "jsonl"; throws ConfigError otherwise.
OutputFormat parse_output_format(std::string_view text);

/// Empty cells are written as an empty CSV field or a JSON null.
using Cell = std::variant<std::monostate, double, std::int64_t, std::string>;

/// Shortest decimal string that round-trips to the same double.
std::string format_double(double value);

/// Row-oriented writer for CSV (with a header line) or JSON lines.
class TableWriter {
 public:
  TableWriter(std::ostream& out, std::vector<std::string> columns, OutputFormat format);

  void row(const std::vector<Cell>& cells);
  const std::vector<std::string>& columns() const noexcept { return columns_; }

 private:
  std::ostream& out_;
  std::vector<std::string> columns_;
  OutputFormat format_;
};

}  // namespace tvo
