#ifndef SSVR_CSV_HPP
#define SSVR_CSV_HPP

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ssvr/errors.hpp"

namespace ssvr {

// One parsed CSV row plus the 1-based line number where it started, so
// loaders can report errors against the source file.
struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

// Minimal RFC-4180 reader: comma-separated, double-quoted fields may contain
// commas, newlines, and doubled quotes. CRLF and LF both accepted.
inline std::vector<CsvRow> parse_csv(std::istream& in,
                                     const std::string& origin) {
  std::vector<CsvRow> rows;
  std::string field;
  CsvRow row;
  row.line = 1;
  std::size_t line = 1;
  bool quoted = false, row_open = false;
  auto end_field = [&] {
    row.fields.push_back(field);
    field.clear();
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row = CsvRow{};
    row_open = false;
  };
  int ch;
  while ((ch = in.get()) != std::char_traits<char>::eof()) {
    char c = static_cast<char>(ch);
    if (!row_open) {
      row.line = line;
      row_open = true;
    }
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty())
          throw DataError(origin + ":" + std::to_string(line) +
                          ": quote inside unquoted field");
        quoted = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        end_row();
        ++line;
        break;
      default:
        field.push_back(c);
    }
  }
  if (quoted)
    throw DataError(origin + ":" + std::to_string(row.line) +
                    ": unterminated quoted field");
  if (row_open) end_row();
  return rows;
}

inline std::vector<CsvRow> read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CSV file: " + path);
  return parse_csv(in, path);
}

// Quotes a field only when needed.
inline std::string csv_field(const std::string& s) {
  bool needs = s.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

inline std::string csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.push_back(',');
    out += csv_field(fields[i]);
  }
  out.push_back('\n');
  return out;
}

}  // namespace ssvr

#endif  // SSVR_CSV_HPP
