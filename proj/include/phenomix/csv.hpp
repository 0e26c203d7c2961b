// Minimal RFC-4180-ish CSV reader/writer. Handles quoted fields with embedded
// commas/quotes/newlines, CRLF input, and '#' comment lines before the header.
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "phenomix/common.hpp"

namespace phenomix {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    // 1-based file line number of each row (for error reporting).
    std::vector<std::size_t> line_numbers;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }
    int require_column(const std::string& name, const std::string& file) const {
        const int c = column(name);
        if (c < 0) throw ValidationError("missing required column '" + name + "' in " + file);
        return c;
    }
};

namespace detail {

inline bool csv_parse_record(std::istream& in, std::vector<std::string>& out, std::size_t& line_no) {
    out.clear();
    std::string field;
    bool in_quotes = false;
    bool any = false;
    int ch;
    while ((ch = in.get()) != EOF) {
        any = true;
        const char c = static_cast<char>(ch);
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    field.push_back('"');
                    in.get();
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line_no;
                field.push_back(c);
            }
        } else if (c == '"') {
            in_quotes = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            ++line_no;
            if (!field.empty() && field.back() == '\r') field.pop_back();
            out.push_back(std::move(field));
            return true;
        } else {
            field.push_back(c);
        }
    }
    if (!any) return false;
    if (!field.empty() && field.back() == '\r') field.pop_back();
    out.push_back(std::move(field));
    ++line_no;
    return true;
}

}  // namespace detail

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open file: " + path);
    CsvTable t;
    std::vector<std::string> rec;
    std::size_t line_no = 1;
    bool have_header = false;
    while (true) {
        const std::size_t rec_line = line_no;
        if (!detail::csv_parse_record(in, rec, line_no)) break;
        if (!have_header && !rec.empty() && !rec[0].empty() && rec[0][0] == '#') continue;
        if (rec.size() == 1 && rec[0].empty()) continue;  // blank line
        if (!have_header) {
            t.header = rec;
            have_header = true;
        } else {
            t.rows.push_back(rec);
            t.line_numbers.push_back(rec_line);
        }
    }
    if (!have_header) throw ValidationError("empty CSV (no header row): " + path);
    return t;
}

inline std::string csv_escape(const std::string& s) {
    const bool need = s.find_first_of(",\"\n\r") != std::string::npos;
    if (!need) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

class CsvWriter {
public:
    explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open file for writing: " + path);
    }
    void comment(const std::string& text) { out_ << "# " << text << "\n"; }
    void row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            out_ << csv_escape(fields[i]);
        }
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

}  // namespace phenomix
