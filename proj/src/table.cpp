#include "tvo/table.hpp"

#include <charconv>
#include <cmath>
#include <json.hpp>

#include "tvo/errors.hpp"

namespace tvo {

OutputFormat parse_output_format(std::string_view text) {
  if (text == "csv") return OutputFormat::csv;
  if (text == "jsonl") return OutputFormat::jsonl;
  throw ConfigError("unknown output format '" + std::string(text) + "' (expected csv or jsonl)");
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, end);
}

TableWriter::TableWriter(std::ostream& out, std::vector<std::string> columns, OutputFormat format)
    : out_(out), columns_(std::move(columns)), format_(format) {
  if (format_ == OutputFormat::csv) {
    for (std::size_t i = 0; i < columns_.size(); ++i) out_ << (i ? "," : "") << columns_[i];
    out_ << '\n';
  }
}

namespace {

struct CsvCell {
  std::string operator()(std::monostate) const { return ""; }
  std::string operator()(double v) const { return format_double(v); }
  std::string operator()(std::int64_t v) const { return std::to_string(v); }
  std::string operator()(const std::string& v) const { return v; }
};

struct JsonCell {
  nlohmann::ordered_json operator()(std::monostate) const { return nullptr; }
  nlohmann::ordered_json operator()(double v) const {
    if (!std::isfinite(v)) return nullptr;
    return v;
  }
  nlohmann::ordered_json operator()(std::int64_t v) const { return v; }
  nlohmann::ordered_json operator()(const std::string& v) const { return v; }
};

}  // namespace

void TableWriter::row(const std::vector<Cell>& cells) {
  if (cells.size() != columns_.size()) {
    throw StructuralError("table row has " + std::to_string(cells.size()) + " cells, expected " +
                          std::to_string(columns_.size()));
  }
  if (format_ == OutputFormat::csv) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << std::visit(CsvCell{}, cells[i]);
    out_ << '\n';
    return;
  }
  nlohmann::ordered_json obj = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < cells.size(); ++i) obj[columns_[i]] = std::visit(JsonCell{}, cells[i]);
  out_ << obj.dump() << '\n';
}

}  // namespace tvo
