// Tabular health records: schema, CSV reader/writer, and feature encoding.
//
// Encoded feature layout: retained columns in lexicographic order of column
// name; a numeric column contributes one standardized value, a categorical
// column contributes a one-hot block whose categories are in lexicographic
// order. Dropped columns are ignored wherever they appear.
#pragma once

#include "segsurv/tensor.hpp"

#include <Eigen/Core>

#include "json.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace segsurv {

struct SurvivalLabel {
  double time = 0;  // days
  int event = 0;    // 1 observed, 0 censored
};

struct EhrColumn {
  enum class Kind { Numeric, Categorical };
  std::string name;
  Kind kind = Kind::Numeric;
  std::vector<std::string> categories;  // sorted
  bool drop = false;
};

class EhrSchema {
 public:
  EhrSchema() = default;
  explicit EhrSchema(std::vector<EhrColumn> columns);

  /// {"columns": {"age": {"type": "numeric"}, "gender": {"type": "categorical",
  ///   "categories": ["F","M"]}, "tobacco": {"type": "numeric", "drop": true}}}
  static EhrSchema from_json(const nlohmann::json& j);
  static EhrSchema load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void save(const std::filesystem::path& path) const;

  /// Retained columns, sorted by name.
  const std::vector<EhrColumn>& columns() const { return columns_; }
  /// Columns flagged drop:true.
  const std::vector<std::string>& dropped() const { return dropped_; }
  Index encoded_length() const;
  std::vector<std::string> feature_names() const;

 private:
  std::vector<EhrColumn> columns_;
  std::vector<std::string> dropped_;
};

/// Retained columns: age, weight, gender, t/n/m stage, TNM edition and group,
/// chemotherapy. Dropped: tobacco, alcohol, performance status, HPV status,
/// estimated weight for SUV.
EhrSchema default_ehr_schema();

struct EhrRecord {
  std::map<std::string, double> numeric;
  std::map<std::string, std::string> categorical;
  Eigen::VectorXd encoded;  // filled by EhrEncoder
};

struct EhrRow {
  std::string id;
  EhrRecord record;
  SurvivalLabel label;
};

class EhrError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Requires header columns id, time, event and every retained schema column.
std::vector<EhrRow> read_ehr_csv(const std::filesystem::path& path, const EhrSchema& schema);
void write_ehr_csv(const std::filesystem::path& path, const std::vector<EhrRow>& rows, const EhrSchema& schema);

/// Standardizes numeric columns with statistics of the rows it was fitted on.
class EhrEncoder {
 public:
  EhrEncoder() = default;
  EhrEncoder(EhrSchema schema, const std::vector<const EhrRecord*>& train);

  Eigen::VectorXd encode(const EhrRecord& r) const;
  Index length() const { return schema_.encoded_length(); }
  const EhrSchema& schema() const { return schema_; }

  nlohmann::json to_json() const;
  static EhrEncoder from_json(const nlohmann::json& j);

 private:
  EhrSchema schema_;
  std::map<std::string, std::pair<double, double>> stats_;  // mean, std
};

}  // namespace segsurv
