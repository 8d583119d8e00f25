#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sae/errors.hpp"

namespace sae::csv {

/// A parsed CSV file with a mandatory header row. Fields may be double-quoted;
/// embedded quotes are written as "".
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers; // 1-based source line of each row

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw DataError("missing CSV column '" + name + "'");
    }
    bool has_column(const std::string& name) const {
        for (const auto& h : header)
            if (h == name) return true;
        return false;
    }
};

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c != '\r') {
            field += c;
        }
    }
    out.push_back(std::move(field));
    return out;
}

inline Table parse(std::istream& in, const std::string& source = "<stream>") {
    Table t;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
            static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF)
            line.erase(0, 3);
        if (line.empty() || line == "\r") continue;
        auto fields = split_line(line);
        if (!have_header) {
            t.header = std::move(fields);
            have_header = true;
            continue;
        }
        if (fields.size() != t.header.size())
            throw DataError(source + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(t.header.size()) + " fields, got " +
                            std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
        t.line_numbers.push_back(lineno);
    }
    if (!have_header) throw DataError(source + ": missing header row");
    return t;
}

inline Table read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return parse(in, path);
}

inline double to_double(const std::string& s, const std::string& context = {}) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && *b == ' ') ++b;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        throw DataError("not a number: '" + s + "'" + (context.empty() ? "" : " (" + context + ")"));
    return v;
}

inline std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

/// Shortest round-trip decimal form, so written files are stable across runs.
inline std::string fmt(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    template <class... Fields>
    void row(const Fields&... fields) {
        bool first = true;
        ((put(fields, first)), ...);
        out_ << '\n';
    }
    void row(const std::vector<std::string>& fields) {
        bool first = true;
        for (const auto& f : fields) put(f, first);
        out_ << '\n';
    }

private:
    void sep(bool& first) {
        if (!first) out_ << ',';
        first = false;
    }
    void put(const std::string& s, bool& first) { sep(first), out_ << quote(s); }
    void put(const char* s, bool& first) { put(std::string(s), first); }
    void put(double v, bool& first) { sep(first), out_ << fmt(v); }
    void put(int v, bool& first) { sep(first), out_ << v; }
    void put(long v, bool& first) { sep(first), out_ << v; }
    void put(long long v, bool& first) { sep(first), out_ << v; }
    void put(unsigned long v, bool& first) { sep(first), out_ << v; }
    void put(unsigned long long v, bool& first) { sep(first), out_ << v; }
    void put(unsigned v, bool& first) { sep(first), out_ << v; }

    std::ostream& out_;
};

} // namespace sae::csv
