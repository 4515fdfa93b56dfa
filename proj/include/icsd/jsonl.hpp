#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include <json.hpp>

#include "icsd/errors.hpp"

namespace icsd {

// All serialized records use ordered_json so field order (and therefore the
// byte layout of every artifact) is fixed by the writing code, not by key sort.
using Json = nlohmann::ordered_json;

// Calls fn(line_number, line) for every non-blank line. Line numbers are 1-based.
template <typename Fn>
void for_each_jsonl_line(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        bool blank = true;
        for (char c : line)
            if (!std::isspace(static_cast<unsigned char>(c))) { blank = false; break; }
        if (blank) continue;
        fn(lineno, line);
    }
}

inline Json parse_record(const std::string& line, const std::filesystem::path& path,
                         std::size_t lineno) {
    try {
        return Json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ":" + std::to_string(lineno) +
                        ": malformed jsonl record: " + e.what());
    }
}

template <typename Fn>
void for_each_jsonl_record(const std::filesystem::path& path, Fn&& fn) {
    for_each_jsonl_line(path, [&](std::size_t lineno, const std::string& line) {
        fn(lineno, parse_record(line, path, lineno));
    });
}

}  // namespace icsd
