#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ntk/error.hpp"

namespace ntk {

using CsvCell = std::variant<std::string, double, long long, unsigned long long>;

inline std::string format_cell(const CsvCell& cell) {
  if (const auto* s = std::get_if<std::string>(&cell)) return *s;
  if (const auto* i = std::get_if<long long>(&cell)) return std::to_string(*i);
  if (const auto* u = std::get_if<unsigned long long>(&cell)) return std::to_string(*u);
  const double v = std::get<double>(cell);
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Header-first CSV table; doubles print with round-trip precision so equal
// inputs give byte-identical files.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  template <class... Cells>
  void add(Cells&&... cells) {
    std::vector<CsvCell> row{to_cell(std::forward<Cells>(cells))...};
    add_row(std::move(row));
  }
  void add_row(std::vector<CsvCell> row) {
    if (row.size() != header_.size())
      throw ShapeError("csv row has " + std::to_string(row.size()) + " cells, header has " +
                       std::to_string(header_.size()));
    rows_.push_back(std::move(row));
  }

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<CsvCell>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  std::string str() const {
    std::string out;
    auto line = [&](const auto& cells, auto&& fmt) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += fmt(cells[i]);
      }
      out += '\n';
    };
    line(header_, [](const std::string& s) { return s; });
    for (const auto& r : rows_) line(r, format_cell);
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << str();
  }

 private:
  template <class T>
  static CsvCell to_cell(T&& v) {
    using D = std::decay_t<T>;
    if constexpr (std::is_same_v<D, bool>) return static_cast<long long>(v);
    else if constexpr (std::is_integral_v<D> && std::is_unsigned_v<D>) return static_cast<unsigned long long>(v);
    else if constexpr (std::is_integral_v<D>) return static_cast<long long>(v);
    else if constexpr (std::is_floating_point_v<D>) return static_cast<double>(v);
    else return std::string(std::forward<T>(v));
  }

  std::vector<std::string> header_;
  std::vector<std::vector<CsvCell>> rows_;
};

}  // namespace ntk
