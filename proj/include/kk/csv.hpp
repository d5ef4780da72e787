#pragma once

#include <ostream>
#include <string>
#include <variant>
#include <vector>

namespace kk {

/// Shortest round-trip-safe text of a double: 17 significant digits, "." separator.
std::string csv_number(double v);

/// RFC 4180 quoting: fields with a comma, quote or line break are quoted and
/// embedded quotes doubled.
std::string csv_field(const std::string& s);

using CsvCell = std::variant<double, long long, std::string>;

/// Writes a header on construction and one row per call; every row must have
/// the header's width. Lines end with "\n".
class CsvWriter {
 public:
  CsvWriter(std::ostream& out, std::vector<std::string> header);
  void row(const std::vector<CsvCell>& cells);
  size_t width() const { return header_.size(); }

 private:
  std::ostream* out_;
  std::vector<std::string> header_;
};

/// Splits one CSV line (no embedded line breaks) into unquoted fields.
std::vector<std::string> csv_split(const std::string& line);

}  // namespace kk
