#include "kk/csv.hpp"

#include <cstdio>

#include "kk/errors.hpp"

namespace kk {

std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

CsvWriter::CsvWriter(std::ostream& out, std::vector<std::string> header)
    : out_(&out), header_(std::move(header)) {
  for (size_t i = 0; i < header_.size(); ++i) *out_ << (i ? "," : "") << csv_field(header_[i]);
  *out_ << "\n";
}

void CsvWriter::row(const std::vector<CsvCell>& cells) {
  if (cells.size() != header_.size()) throw DomainError("csv row width does not match the header");
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) *out_ << ",";
    if (const double* d = std::get_if<double>(&cells[i])) *out_ << csv_number(*d);
    else if (const long long* n = std::get_if<long long>(&cells[i])) *out_ << *n;
    else *out_ << csv_field(std::get<std::string>(cells[i]));
  }
  *out_ << "\n";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

}  // namespace kk
