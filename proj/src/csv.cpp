#include "contflow/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "contflow/errors.hpp"

namespace contflow::csv {

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

Table::Table(std::vector<std::string> columns) : columns_(std::move(columns)) {
    if (columns_.empty()) throw InvalidParameter("a CSV table needs at least one column");
}

void Table::add_row(std::vector<Cell> row) {
    if (row.size() != columns_.size()) throw InvalidParameter("CSV row width differs from the header");
    for (const Cell& c : row) {
        if (const auto* s = std::get_if<std::string>(&c); s && s->find_first_of(",\n\r") != std::string::npos) {
            throw InvalidParameter("CSV string cells may not contain separators");
        }
    }
    rows_.push_back(std::move(row));
}

std::string Table::str() const {
    std::string out;
    for (std::size_t j = 0; j < columns_.size(); ++j) {
        if (j) out += ',';
        out += columns_[j];
    }
    out += '\n';
    for (const auto& row : rows_) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) out += ',';
            std::visit(
                [&out](const auto& v) {
                    using T = std::decay_t<decltype(v)>;
                    if constexpr (std::is_same_v<T, double>) {
                        out += format_double(v);
                    } else if constexpr (std::is_same_v<T, long long>) {
                        out += std::to_string(v);
                    } else {
                        out += v;
                    }
                },
                row[j]);
        }
        out += '\n';
    }
    return out;
}

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

double parse_number(const std::string& s) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return HUGE_VAL;
    if (s == "-inf") return -HUGE_VAL;
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nan("");
    return v;
}

}  // namespace

Document Document::parse(const std::string& text) {
    Document doc;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.empty()) throw InvalidParameter("CSV file has no header row");
    doc.columns_ = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split(line);
        if (cells.size() != doc.columns_.size()) {
            throw InvalidParameter("CSV row " + std::to_string(doc.cells_.size() + 1) + " has the wrong width");
        }
        doc.cells_.push_back(std::move(cells));
    }
    return doc;
}

Document Document::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

bool Document::has(const std::string& column) const {
    for (const auto& c : columns_) {
        if (c == column) return true;
    }
    return false;
}

std::size_t Document::index(const std::string& column) const {
    for (std::size_t j = 0; j < columns_.size(); ++j) {
        if (columns_[j] == column) return j;
    }
    throw InvalidParameter("CSV has no column '" + column + "'");
}

std::vector<double> Document::numbers(const std::string& column) const {
    const std::size_t j = index(column);
    std::vector<double> out;
    out.reserve(cells_.size());
    for (const auto& row : cells_) out.push_back(parse_number(row[j]));
    return out;
}

std::vector<std::string> Document::strings(const std::string& column) const {
    const std::size_t j = index(column);
    std::vector<std::string> out;
    out.reserve(cells_.size());
    for (const auto& row : cells_) out.push_back(row[j]);
    return out;
}

}  // namespace contflow::csv
