#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace nullmoe {

// Shortest round-trip decimal form (std::to_chars); keeps CSV output
// byte-stable across runs.
std::string format_double(double v);
std::string format_int(long long v);

// RFC 4180 quoting: fields with commas, quotes or newlines get wrapped.
std::string csv_escape(const std::string& field);

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& fields);
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  size_t n_cols_;
};

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace nullmoe
