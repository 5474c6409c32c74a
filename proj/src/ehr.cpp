#include "segsurv/ehr.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace segsurv {

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

// Comma-separated fields; double quotes group a field and "" escapes a quote.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

double parse_double(const std::string& s, const std::string& column, size_t line) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw EhrError("line " + std::to_string(line) + ": column " + column + ": not a number: '" + s + "'");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

EhrSchema::EhrSchema(std::vector<EhrColumn> columns) {
  for (auto& c : columns) {
    if (c.drop) {
      dropped_.push_back(c.name);
      continue;
    }
    if (c.kind == EhrColumn::Kind::Categorical && c.categories.empty())
      throw EhrError("categorical column " + c.name + " has no categories");
    std::sort(c.categories.begin(), c.categories.end());
    columns_.push_back(std::move(c));
  }
  std::sort(columns_.begin(), columns_.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  std::sort(dropped_.begin(), dropped_.end());
}

EhrSchema EhrSchema::from_json(const nlohmann::json& j) {
  std::vector<EhrColumn> cols;
  for (const auto& [name, spec] : j.at("columns").items()) {
    EhrColumn c;
    c.name = name;
    const std::string type = spec.at("type").get<std::string>();
    if (type == "numeric") {
      c.kind = EhrColumn::Kind::Numeric;
    } else if (type == "categorical") {
      c.kind = EhrColumn::Kind::Categorical;
      c.categories = spec.value("categories", std::vector<std::string>{});
    } else {
      throw EhrError("column " + name + ": unknown type " + type);
    }
    c.drop = spec.value("drop", false);
    cols.push_back(std::move(c));
  }
  return EhrSchema(std::move(cols));
}

EhrSchema EhrSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EhrError("cannot open schema " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw EhrError("malformed schema " + path.string() + ": " + e.what());
  }
}

nlohmann::json EhrSchema::to_json() const {
  nlohmann::json cols = nlohmann::json::object();
  for (const auto& c : columns_) {
    if (c.kind == EhrColumn::Kind::Numeric)
      cols[c.name] = {{"type", "numeric"}, {"drop", false}};
    else
      cols[c.name] = {{"type", "categorical"}, {"categories", c.categories}, {"drop", false}};
  }
  // Dropped columns are kept in the file so the exclusion stays explicit.
  for (const auto& d : dropped_) cols[d] = {{"type", "numeric"}, {"drop", true}};
  return {{"columns", cols}};
}

void EhrSchema::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out << to_json().dump(2) << '\n';
  if (!out) throw EhrError("cannot write schema " + path.string());
}

Index EhrSchema::encoded_length() const {
  Index n = 0;
  for (const auto& c : columns_) n += c.kind == EhrColumn::Kind::Numeric ? 1 : static_cast<Index>(c.categories.size());
  return n;
}

std::vector<std::string> EhrSchema::feature_names() const {
  std::vector<std::string> names;
  for (const auto& c : columns_) {
    if (c.kind == EhrColumn::Kind::Numeric)
      names.push_back(c.name);
    else
      for (const auto& cat : c.categories) names.push_back(c.name + "=" + cat);
  }
  return names;
}

EhrSchema default_ehr_schema() {
  using K = EhrColumn::Kind;
  return EhrSchema({
      {"age", K::Numeric, {}, false},
      {"weight", K::Numeric, {}, false},
      {"gender", K::Categorical, {"F", "M"}, false},
      {"t_stage", K::Categorical, {"T1", "T2", "T3", "T4"}, false},
      {"n_stage", K::Categorical, {"N0", "N1", "N2", "N3"}, false},
      {"m_stage", K::Categorical, {"M0", "M1"}, false},
      {"tnm_edition", K::Categorical, {"7", "8"}, false},
      {"tnm_group", K::Categorical, {"I", "II", "III", "IV"}, false},
      {"chemotherapy", K::Categorical, {"no", "yes"}, false},
      {"tobacco", K::Numeric, {}, true},
      {"alcohol", K::Numeric, {}, true},
      {"performance_status", K::Numeric, {}, true},
      {"hpv_status", K::Numeric, {}, true},
      {"suv_weight", K::Numeric, {}, true},
  });
}

std::vector<EhrRow> read_ehr_csv(const std::filesystem::path& path, const EhrSchema& schema) {
  std::ifstream in(path);
  if (!in) throw EhrError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw EhrError(path.string() + ": missing header row");
  const auto header = split_csv_line(line);
  std::map<std::string, size_t> pos;
  for (size_t i = 0; i < header.size(); ++i) pos[header[i]] = i;

  std::vector<std::string> required{"id"};
  for (const auto& c : schema.columns()) required.push_back(c.name);
  required.push_back("time");
  required.push_back("event");
  for (const auto& r : required)
    if (!pos.count(r)) throw EhrError("missing column: " + r);

  std::vector<EhrRow> rows;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw EhrError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " fields, got " +
                     std::to_string(fields.size()));
    auto field = [&](const std::string& name) -> const std::string& {
      const std::string& v = fields[pos.at(name)];
      if (v.empty()) throw EhrError("line " + std::to_string(lineno) + ": missing value in column " + name);
      return v;
    };
    EhrRow row;
    row.id = field("id");
    for (const auto& c : schema.columns()) {
      const std::string& v = field(c.name);
      if (c.kind == EhrColumn::Kind::Numeric) {
        row.record.numeric[c.name] = parse_double(v, c.name, lineno);
      } else {
        if (!std::binary_search(c.categories.begin(), c.categories.end(), v))
          throw EhrError("line " + std::to_string(lineno) + ": column " + c.name + ": unknown category '" + v + "'");
        row.record.categorical[c.name] = v;
      }
    }
    row.label.time = parse_double(field("time"), "time", lineno);
    const double ev = parse_double(field("event"), "event", lineno);
    if (row.label.time < 0) throw EhrError("line " + std::to_string(lineno) + ": negative time");
    if (ev != 0 && ev != 1) throw EhrError("line " + std::to_string(lineno) + ": event must be 0 or 1");
    row.label.event = static_cast<int>(ev);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ehr_csv(const std::filesystem::path& path, const std::vector<EhrRow>& rows, const EhrSchema& schema) {
  std::ofstream out(path);
  if (!out) throw EhrError("cannot write " + path.string());
  out << "id";
  for (const auto& c : schema.columns()) out << ',' << c.name;
  out << ",time,event\n";
  for (const auto& r : rows) {
    out << r.id;
    for (const auto& c : schema.columns()) {
      if (c.kind == EhrColumn::Kind::Numeric)
        out << ',' << format_double(r.record.numeric.at(c.name));
      else
        out << ',' << r.record.categorical.at(c.name);
    }
    out << ',' << format_double(r.label.time) << ',' << r.label.event << '\n';
  }
}

EhrEncoder::EhrEncoder(EhrSchema schema, const std::vector<const EhrRecord*>& train) : schema_(std::move(schema)) {
  for (const auto& c : schema_.columns()) {
    if (c.kind != EhrColumn::Kind::Numeric) continue;
    double mean = 0, sq = 0;
    for (const auto* r : train) mean += r->numeric.at(c.name);
    mean /= std::max<size_t>(train.size(), 1);
    for (const auto* r : train) sq += std::pow(r->numeric.at(c.name) - mean, 2);
    double sd = train.size() > 1 ? std::sqrt(sq / static_cast<double>(train.size())) : 1.0;
    if (!(sd > 0)) sd = 1.0;
    stats_[c.name] = {mean, sd};
  }
}

Eigen::VectorXd EhrEncoder::encode(const EhrRecord& r) const {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(length());
  Index k = 0;
  for (const auto& c : schema_.columns()) {
    if (c.kind == EhrColumn::Kind::Numeric) {
      const auto [mean, sd] = stats_.at(c.name);
      x[k++] = (r.numeric.at(c.name) - mean) / sd;
    } else {
      const auto& v = r.categorical.at(c.name);
      const auto it = std::lower_bound(c.categories.begin(), c.categories.end(), v);
      if (it == c.categories.end() || *it != v) throw EhrError("column " + c.name + ": unknown category '" + v + "'");
      x[k + (it - c.categories.begin())] = 1.0;
      k += static_cast<Index>(c.categories.size());
    }
  }
  return x;
}

nlohmann::json EhrEncoder::to_json() const {
  nlohmann::json stats = nlohmann::json::object();
  for (const auto& [name, ms] : stats_) stats[name] = {ms.first, ms.second};
  return {{"schema", schema_.to_json()}, {"stats", stats}};
}

EhrEncoder EhrEncoder::from_json(const nlohmann::json& j) {
  EhrEncoder e;
  e.schema_ = EhrSchema::from_json(j.at("schema"));
  for (const auto& [name, ms] : j.at("stats").items()) e.stats_[name] = {ms.at(0).get<double>(), ms.at(1).get<double>()};
  return e;
}

}  // namespace segsurv
