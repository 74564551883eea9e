#pragma once

#include <string>
#include <vector>

namespace kriformer {

// Shortest decimal form that parses back to the identical double.
std::string fmt_double(double v);

std::vector<std::string> split_csv_line(const std::string& line);

// Writes via a temporary file and renames it into place.
void atomic_write_file(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

}  // namespace kriformer
