#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace memlab {

// Shortest decimal text that round-trips to the same double.
std::string format_double(double v);

// In-memory table written as UTF-8, comma-delimited, LF line endings, with a
// header row. Lines in `preamble` are written first, each prefixed by '#'.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::vector<std::string>& preamble() { return preamble_; }
  const std::vector<std::string>& preamble() const { return preamble_; }

  // Cells are converted with format_double / std::to_string / as-is.
  class RowBuilder {
   public:
    explicit RowBuilder(CsvTable& t) : table_(t) {}
    RowBuilder& operator<<(double v);
    RowBuilder& operator<<(std::size_t v);
    RowBuilder& operator<<(int v);
    RowBuilder& operator<<(std::string_view v);
    RowBuilder& operator<<(const char* v) { return *this << std::string_view(v); }
    ~RowBuilder() noexcept(false);

   private:
    CsvTable& table_;
    std::vector<std::string> cells_;
  };
  RowBuilder row() { return RowBuilder(*this); }
  void add_row(std::vector<std::string> cells);

  std::string to_string() const;
  void write(const std::filesystem::path& path) const;

  std::size_t column(std::string_view name) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
  std::vector<std::string> preamble_;
};

// Parses the format written above ('#' lines are collected as preamble).
CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(std::string_view text);

}  // namespace memlab
