#include "memlab/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "memlab/errors.hpp"

namespace memlab {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string quote(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> cells;
  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        in_quotes = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

}  // namespace

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {
  if (header_.empty()) throw ContractError("csv: empty header");
}

CsvTable::RowBuilder& CsvTable::RowBuilder::operator<<(double v) {
  cells_.push_back(format_double(v));
  return *this;
}
CsvTable::RowBuilder& CsvTable::RowBuilder::operator<<(std::size_t v) {
  cells_.push_back(std::to_string(v));
  return *this;
}
CsvTable::RowBuilder& CsvTable::RowBuilder::operator<<(int v) {
  cells_.push_back(std::to_string(v));
  return *this;
}
CsvTable::RowBuilder& CsvTable::RowBuilder::operator<<(std::string_view v) {
  cells_.emplace_back(v);
  return *this;
}
CsvTable::RowBuilder::~RowBuilder() noexcept(false) {
  if (std::uncaught_exceptions() == 0) table_.add_row(std::move(cells_));
}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) {
    throw DimensionError("csv: row has " + std::to_string(cells.size()) + " cells, header has " +
                         std::to_string(header_.size()));
  }
  rows_.push_back(std::move(cells));
}

std::string CsvTable::to_string() const {
  std::string out;
  for (const auto& p : preamble_) out += "#" + p + "\n";
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += quote(cells[i]);
    }
    out += '\n';
  };
  emit(header_);
  for (const auto& r : rows_) emit(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << to_string();
  if (!os) throw IoError("failed writing " + path.string());
}

std::size_t CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header_.size(); ++i) {
    if (header_[i] == name) return i;
  }
  throw ContractError("csv: no column '" + std::string(name) + "'");
}

CsvTable parse_csv(std::string_view text) {
  std::vector<std::string> preamble;
  std::vector<std::vector<std::string>> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    if (line.front() == '#') {
      preamble.emplace_back(line.substr(1));
    } else {
      lines.push_back(split_line(line));
    }
  }
  if (lines.empty()) throw IoError("csv: no header row");
  CsvTable t(lines.front());
  t.preamble() = std::move(preamble);
  for (std::size_t i = 1; i < lines.size(); ++i) t.add_row(std::move(lines[i]));
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_csv(ss.str());
}

}  // namespace memlab
