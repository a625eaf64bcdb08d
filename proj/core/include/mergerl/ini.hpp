#pragma once

// Minimal "key = value" text format with [section] headers, '#' and ';'
// comments. Used for run configs, scenes and option-graph definitions.
// Every entry keeps its line number so consumers can report precise errors.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mergerl::ini {

struct Entry {
  std::string key;
  std::string value;
  int line = 0;
};

struct Section {
  std::string name;  // empty for entries before the first header
  int line = 0;
  std::vector<Entry> entries;
};

struct Document {
  std::string source;
  std::vector<Section> sections;
};

Document parse(std::string_view text, const std::string& source);
Document parse_file(const std::string& path);

// Typed conversions; throw ParseError naming the key and line.
double to_double(const Document& doc, const Entry& e);
int to_int(const Document& doc, const Entry& e);
std::uint64_t to_u64(const Document& doc, const Entry& e);
bool to_bool(const Document& doc, const Entry& e);
std::vector<std::string> to_words(const Entry& e);
std::vector<double> to_doubles(const Document& doc, const Entry& e);

using Handler = std::function<void(const Entry&)>;

// Dispatches each entry of the section to its handler; an entry without a
// handler is rejected as an unknown key.
void apply(const Document& doc, const Section& section,
           const std::map<std::string, Handler, std::less<>>& handlers);

[[noreturn]] void fail(const Document& doc, int line, const std::string& msg);

}  // namespace mergerl::ini
