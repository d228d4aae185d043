#ifndef CONTFLOW_CSV_HPP
#define CONTFLOW_CSV_HPP

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace contflow::csv {

/// Shortest text that reads back to the same double, '.' decimal separator
/// regardless of locale. NaN and infinities print as nan, inf, -inf.
std::string format_double(double v);

using Cell = std::variant<double, long long, std::string>;

/// In-memory table rendered with a header row, comma separators and '\n'
/// line endings.
class Table {
public:
    explicit Table(std::vector<std::string> columns);

    const std::vector<std::string>& columns() const { return columns_; }
    std::size_t rows() const { return rows_.size(); }

    /// Throws InvalidParameter when the row width differs from the header
    /// or a string cell contains a comma or newline.
    void add_row(std::vector<Cell> row);
    std::string str() const;

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<Cell>> rows_;
};

/// A parsed CSV file. Numeric access parses each cell on demand; cells that
/// are not numbers read as NaN.
class Document {
public:
    static Document parse(const std::string& text);
    /// Throws IoError when the file cannot be read.
    static Document load(const std::filesystem::path& path);

    const std::vector<std::string>& columns() const { return columns_; }
    std::size_t rows() const { return cells_.size(); }
    bool has(const std::string& column) const;
    /// Throws InvalidParameter for an unknown column.
    std::vector<double> numbers(const std::string& column) const;
    std::vector<std::string> strings(const std::string& column) const;

private:
    std::size_t index(const std::string& column) const;

    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> cells_;
};

}  // namespace contflow::csv

#endif  // CONTFLOW_CSV_HPP
