#include "mergerl/ini.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mergerl/error.hpp"

namespace mergerl::ini {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string_view strip_comment(std::string_view s) {
  const auto pos = s.find_first_of("#;");
  return pos == std::string_view::npos ? s : s.substr(0, pos);
}

}  // namespace

void fail(const Document& doc, int line, const std::string& msg) {
  throw ParseError(doc.source, line, msg);
}

Document parse(std::string_view text, const std::string& source) {
  Document doc;
  doc.source = source;
  doc.sections.push_back(Section{"", 0, {}});
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    const std::string_view raw =
        text.substr(pos, end == std::string_view::npos ? text.size() - pos : end - pos);
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    const std::string_view line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(doc, line_no, "unterminated section header");
      const std::string_view name = trim(line.substr(1, line.size() - 2));
      if (name.empty()) fail(doc, line_no, "empty section name");
      doc.sections.push_back(Section{std::string(name), line_no, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      fail(doc, line_no, "expected 'key = value', got '" + std::string(line) + "'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) fail(doc, line_no, "missing key before '='");
    Section& sec = doc.sections.back();
    for (const Entry& e : sec.entries)
      if (e.key == key)
        fail(doc, line_no, "duplicate key '" + std::string(key) +
                               "' (first set on line " + std::to_string(e.line) + ")");
    sec.entries.push_back(Entry{std::string(key), std::string(value), line_no});
  }
  return doc;
}

Document parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

double to_double(const Document& doc, const Entry& e) {
  const char* begin = e.value.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (e.value.empty() || end != begin + e.value.size() || errno == ERANGE ||
      !std::isfinite(v))
    fail(doc, e.line, "key '" + e.key + "' expects a finite number, got '" + e.value + "'");
  return v;
}

int to_int(const Document& doc, const Entry& e) {
  int v = 0;
  const auto* first = e.value.data();
  const auto* last = first + e.value.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    fail(doc, e.line, "key '" + e.key + "' expects an integer, got '" + e.value + "'");
  return v;
}

std::uint64_t to_u64(const Document& doc, const Entry& e) {
  std::uint64_t v = 0;
  const auto* first = e.value.data();
  const auto* last = first + e.value.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    fail(doc, e.line,
         "key '" + e.key + "' expects a non-negative integer, got '" + e.value + "'");
  return v;
}

bool to_bool(const Document& doc, const Entry& e) {
  if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "0" || e.value == "no") return false;
  fail(doc, e.line, "key '" + e.key + "' expects true or false, got '" + e.value + "'");
}

std::vector<std::string> to_words(const Entry& e) {
  std::vector<std::string> out;
  std::istringstream ss(e.value);
  for (std::string w; ss >> w;) out.push_back(w);
  return out;
}

std::vector<double> to_doubles(const Document& doc, const Entry& e) {
  std::vector<double> out;
  for (const std::string& w : to_words(e)) {
    Entry tmp{e.key, w, e.line};
    out.push_back(to_double(doc, tmp));
  }
  return out;
}

void apply(const Document& doc, const Section& section,
           const std::map<std::string, Handler, std::less<>>& handlers) {
  for (const Entry& e : section.entries) {
    const auto it = handlers.find(e.key);
    if (it == handlers.end()) {
      const std::string where =
          section.name.empty() ? std::string("top level") : "[" + section.name + "]";
      fail(doc, e.line, "unknown key '" + e.key + "' in " + where);
    }
    it->second(e);
  }
}

}  // namespace mergerl::ini
