#pragma once
// Line-delimited metrics: one JSON object per training step in insertion
// order, so streams diff cleanly and identical runs produce identical
// bytes. Non-finite values are recorded as nulls. A CSV converter flattens
// the stream for external plotting tools.

#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace hwm {

using MetricsRecord = std::vector<std::pair<std::string, double>>;

inline std::string metrics_line(long long step, const MetricsRecord& rec) {
  nlohmann::ordered_json j;
  j["step"] = step;
  for (const auto& [k, v] : rec) j[k] = v;  // NaN/inf dump as null
  return j.dump();
}

class MetricsWriter {
 public:
  MetricsWriter() = default;  // unopened writer drops records

  explicit MetricsWriter(const std::string& path, bool append = false) { open(path, append); }

  void open(const std::string& path, bool append = false) {
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("MetricsWriter: cannot open '" + path + "'");
  }

  bool is_open() const { return out_.is_open(); }

  void write(long long step, const MetricsRecord& rec) {
    if (!out_.is_open()) return;
    out_ << metrics_line(step, rec) << "\n";
    out_.flush();  // a crashed run keeps every completed record
  }

 private:
  std::ofstream out_;
};

// JSONL -> CSV. Header is the union of keys in first-appearance order;
// missing and null fields are left empty. Returns the record count.
inline std::size_t export_csv(std::istream& jsonl, std::ostream& csv) {
  std::vector<nlohmann::ordered_json> records;
  std::vector<std::string> columns;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(jsonl, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::ordered_json j = nlohmann::ordered_json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw std::runtime_error("export_csv: line " + std::to_string(lineno) +
                               " is not a JSON object");
    for (const auto& [k, v] : j.items()) {
      (void)v;
      bool known = false;
      for (const auto& c : columns)
        if (c == k) known = true;
      if (!known) columns.push_back(k);
    }
    records.push_back(std::move(j));
  }
  auto cell = [](const nlohmann::ordered_json& v) -> std::string {
    if (v.is_null()) return "";
    if (v.is_string()) {
      std::string s = v.get<std::string>();
      if (s.find_first_of(",\"\n") != std::string::npos) {
        std::string q = "\"";
        for (const char c : s) {
          if (c == '"') q += '"';
          q += c;
        }
        q += '"';
        return q;
      }
      return s;
    }
    return v.dump();
  };
  for (std::size_t i = 0; i < columns.size(); ++i)
    csv << (i ? "," : "") << cell(nlohmann::ordered_json(columns[i]));
  csv << "\n";
  for (const auto& r : records) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (i) csv << ",";
      const auto it = r.find(columns[i]);
      if (it != r.end()) csv << cell(*it);
    }
    csv << "\n";
  }
  return records.size();
}

}  // namespace hwm
