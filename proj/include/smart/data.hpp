#pragma once

// EHR records, padded batches, CSV ingestion and z-score normalization.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace smart {

enum class TaskKind { binary, multilabel, multiclass };

inline std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::binary: return "binary";
    case TaskKind::multilabel: return "multilabel";
    case TaskKind::multiclass: return "multiclass";
  }
  return "binary";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "binary") return TaskKind::binary;
  if (s == "multilabel") return TaskKind::multilabel;
  if (s == "multiclass") return TaskKind::multiclass;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

/// Task head description. outputs is 1 for binary, the label count for
/// multilabel (25 for phenotyping) and the class count for multiclass (10 LoS bins).
struct TaskSpec {
  TaskKind kind = TaskKind::binary;
  std::size_t outputs = 1;

  static TaskSpec binary() { return {TaskKind::binary, 1}; }
  static TaskSpec multilabel(std::size_t k = 25) { return {TaskKind::multilabel, k}; }
  static TaskSpec multiclass(std::size_t c = 10) { return {TaskKind::multiclass, c}; }

  bool operator==(const TaskSpec&) const = default;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One patient: hour-aligned values x (T x N, zero where unobserved), mask m,
/// and label y. y holds one 0/1 entry (binary), K 0/1 entries (multilabel)
/// or one class index (multiclass).
struct EhrRecord {
  std::string patient_id;
  std::size_t T = 0;
  std::size_t N = 0;
  std::vector<double> x;
  std::vector<std::uint8_t> m;
  std::vector<int> y;

  double value(std::size_t t, std::size_t n) const { return x[t * N + n]; }
  bool observed(std::size_t t, std::size_t n) const { return m[t * N + n] != 0; }

  std::size_t observed_count() const {
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  }

  bool operator==(const EhrRecord&) const = default;
};

/// Throws if x is nonzero at an unobserved cell or the buffers disagree with T x N.
inline void validate_record(const EhrRecord& r) {
  if (r.x.size() != r.T * r.N || r.m.size() != r.T * r.N) {
    throw DataError("record " + r.patient_id + ": buffer size does not match T x N");
  }
  for (std::size_t i = 0; i < r.x.size(); ++i) {
    if (!r.m[i] && r.x[i] != 0.0) {
      throw DataError("record " + r.patient_id + ": nonzero value at unobserved cell");
    }
  }
}

/// Records padded to a common T. Padded rows are never observed.
struct Batch {
  std::size_t B = 0;
  std::size_t T = 0;
  std::size_t N = 0;
  std::vector<double> x;
  std::vector<std::uint8_t> m;
  std::vector<std::size_t> length;
  std::vector<std::vector<int>> y;

  std::size_t index(std::size_t b, std::size_t t, std::size_t n) const { return (b * T + t) * N + n; }
};

inline Batch make_batch(std::span<const EhrRecord> records, std::span<const std::size_t> indices) {
  Batch batch;
  batch.B = indices.size();
  if (batch.B == 0) return batch;
  batch.N = records[indices[0]].N;
  for (auto i : indices) {
    if (records[i].N != batch.N) throw DataError("make_batch: variable count differs across records");
    batch.T = std::max(batch.T, records[i].T);
  }
  batch.x.assign(batch.B * batch.T * batch.N, 0.0);
  batch.m.assign(batch.B * batch.T * batch.N, 0);
  for (std::size_t b = 0; b < batch.B; ++b) {
    const auto& r = records[indices[b]];
    std::copy(r.x.begin(), r.x.end(), batch.x.begin() + static_cast<std::ptrdiff_t>(b * batch.T * batch.N));
    std::copy(r.m.begin(), r.m.end(), batch.m.begin() + static_cast<std::ptrdiff_t>(b * batch.T * batch.N));
    batch.length.push_back(r.T);
    batch.y.push_back(r.y);
  }
  return batch;
}

inline Batch make_batch(std::span<const EhrRecord> records) {
  std::vector<std::size_t> all(records.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(records, all);
}

struct SplitDataset {
  std::vector<std::string> variables;
  std::vector<EhrRecord> train;
  std::vector<EhrRecord> val;
  std::vector<EhrRecord> test;
};

/// Shuffles records with the seed and cuts 8:1:1 (val and test get n/10 each).
inline SplitDataset split_dataset(std::vector<EhrRecord> records, std::uint64_t seed,
                                  std::vector<std::string> variables = {}) {
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n = records.size();
  const std::size_t n_val = n / 10, n_test = n / 10, n_train = n - n_val - n_test;
  SplitDataset out;
  out.variables = std::move(variables);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = records[order[i]];
    if (i < n_train) out.train.push_back(std::move(r));
    else if (i < n_train + n_val) out.val.push_back(std::move(r));
    else out.test.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvSchema {
  /// Variable columns in order. Empty means "take them from the header".
  std::vector<std::string> variables;
  /// Hours at or beyond this cap are dropped (0 = keep everything).
  std::size_t max_hours = 0;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Reads `patient_id,hour,<vars...>[,label]`. Empty cells are missing.
/// Hours are floored to integers; a repeated hour overwrites earlier values
/// cell by cell (last write wins) and logs a warning.
inline std::vector<EhrRecord> load_csv(const std::filesystem::path& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty()) return {};

  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || detail::trim(header[0]) != "patient_id" || detail::trim(header[1]) != "hour") {
    throw DataError(path.string() + ":1: header must start with patient_id,hour");
  }
  std::vector<std::string> columns;
  for (std::size_t i = 2; i < header.size(); ++i) columns.emplace_back(detail::trim(header[i]));
  const bool has_label = !columns.empty() && columns.back() == "label";
  if (has_label) columns.pop_back();

  std::vector<std::string> variables = schema.variables.empty() ? columns : schema.variables;
  std::vector<std::size_t> column_to_var(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    auto it = std::find(variables.begin(), variables.end(), columns[c]);
    if (it == variables.end()) throw DataError(path.string() + ": unknown column '" + columns[c] + "'");
    column_to_var[c] = static_cast<std::size_t>(it - variables.begin());
  }
  const std::size_t N = variables.size();

  struct Cell {
    std::size_t hour;
    std::size_t var;
    double value;
  };
  struct Pending {
    std::vector<Cell> cells;
    std::size_t max_hour = 0;
    bool any_row = false;
    std::vector<int> label;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Pending> pending;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    const std::size_t expected = 2 + columns.size() + (has_label ? 1 : 0);
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    if (fields.size() != expected) {
      throw DataError(where + "expected " + std::to_string(expected) + " fields, got " +
                      std::to_string(fields.size()));
    }
    const std::string id(detail::trim(fields[0]));
    if (id.empty()) throw DataError(where + "empty patient_id");
    double hour_value = 0.0;
    if (!detail::parse_double(fields[1], hour_value) || hour_value < 0) {
      throw DataError(where + "hour must be a non-negative number");
    }
    const auto hour = static_cast<std::size_t>(std::floor(hour_value));
    auto [it, inserted] = pending.try_emplace(id);
    if (inserted) order.push_back(id);
    Pending& p = it->second;
    if (has_label) {
      const auto label_field = detail::trim(fields.back());
      if (!label_field.empty()) {
        double v = 0.0;
        if (!detail::parse_double(label_field, v) || v != std::floor(v)) {
          throw DataError(where + "label must be an integer");
        }
        p.label = {static_cast<int>(v)};
      }
    }
    if (schema.max_hours && hour >= schema.max_hours) continue;
    p.any_row = true;
    p.max_hour = std::max(p.max_hour, hour);
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto field = detail::trim(fields[2 + c]);
      if (field.empty()) continue;
      double v = 0.0;
      if (!detail::parse_double(field, v)) {
        throw DataError(where + "malformed value '" + std::string(field) + "' in column " + columns[c]);
      }
      p.cells.push_back({hour, column_to_var[c], v});
    }
  }

  std::vector<EhrRecord> records;
  for (const auto& id : order) {
    Pending& p = pending[id];
    if (!p.any_row) {
      std::clog << "warning: patient " << id << " has no rows inside the time window; skipped\n";
      continue;
    }
    EhrRecord r;
    r.patient_id = id;
    r.T = p.max_hour + 1;
    r.N = N;
    r.x.assign(r.T * N, 0.0);
    r.m.assign(r.T * N, 0);
    r.y = p.label;
    bool collided = false;
    for (const auto& c : p.cells) {
      const std::size_t i = c.hour * N + c.var;
      collided = collided || r.m[i];
      r.x[i] = c.value;
      r.m[i] = 1;
    }
    if (collided) {
      std::clog << "warning: patient " << id << " has repeated hour cells; last value kept\n";
    }
    records.push_back(std::move(r));
  }
  return records;
}

/// Reads `patient_id,<label columns...>` and attaches labels by patient id.
inline void load_labels(const std::filesystem::path& path, std::vector<EhrRecord>& records) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) return;
  const auto header = detail::split_csv_line(line);
  if (header.empty() || detail::trim(header[0]) != "patient_id") {
    throw DataError(path.string() + ":1: header must start with patient_id");
  }
  std::unordered_map<std::string, std::vector<int>> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": field count mismatch");
    }
    std::vector<int> y;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      double v = 0.0;
      if (!detail::parse_double(fields[i], v) || v != std::floor(v)) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": label must be an integer");
      }
      y.push_back(static_cast<int>(v));
    }
    labels[std::string(detail::trim(fields[0]))] = std::move(y);
  }
  for (auto& r : records) {
    auto it = labels.find(r.patient_id);
    if (it != labels.end()) r.y = it->second;
  }
}

/// Writes records in the load_csv format. Single-valued labels go into a
/// trailing label column; multi-valued labels must be written with write_labels_csv.
inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& variables,
                      std::span<const EhrRecord> records, bool include_label) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "patient_id,hour";
  for (const auto& v : variables) out << ',' << v;
  if (include_label) out << ",label";
  out << '\n';
  for (const auto& r : records) {
    for (std::size_t t = 0; t < r.T; ++t) {
      out << r.patient_id << ',' << t;
      for (std::size_t n = 0; n < r.N; ++n) {
        out << ',';
        if (r.observed(t, n)) out << detail::format_double(r.value(t, n));
      }
      if (include_label) out << ',' << (r.y.empty() ? 0 : r.y.front());
      out << '\n';
    }
  }
  if (!out) throw DataError("write failed: " + path.string());
}

inline void write_labels_csv(const std::filesystem::path& path, std::span<const EhrRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::size_t K = records.empty() ? 0 : records.front().y.size();
  out << "patient_id";
  for (std::size_t k = 0; k < K; ++k) out << ",label_" << k;
  out << '\n';
  for (const auto& r : records) {
    out << r.patient_id;
    for (int v : r.y) out << ',' << v;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Normalization

struct VariableStats {
  double mean = 0.0;
  double std = 1.0;
  std::size_t count = 0;
  bool constant = false;  // zero variance (or unobserved): values pass through unscaled
};

struct Normalizer {
  std::vector<VariableStats> stats;

  /// Transforms observed cells in place; the mask is never modified.
  void apply(EhrRecord& r) const {
    if (r.N != stats.size()) throw DataError("normalizer: variable count mismatch");
    for (std::size_t t = 0; t < r.T; ++t)
      for (std::size_t n = 0; n < r.N; ++n) {
        if (!r.observed(t, n) || stats[n].constant) continue;
        double& v = r.x[t * r.N + n];
        v = (v - stats[n].mean) / stats[n].std;
      }
  }

  void apply(std::vector<EhrRecord>& records) const {
    for (auto& r : records) apply(r);
  }
};

/// Per-variable mean and population standard deviation over observed cells.
inline Normalizer fit_zscore(std::span<const EhrRecord> train) {
  Normalizer norm;
  if (train.empty()) return norm;
  const std::size_t N = train.front().N;
  norm.stats.assign(N, {});
  std::vector<double> sum(N, 0.0);
  for (const auto& r : train)
    for (std::size_t t = 0; t < r.T; ++t)
      for (std::size_t n = 0; n < N; ++n)
        if (r.observed(t, n)) {
          sum[n] += r.value(t, n);
          ++norm.stats[n].count;
        }
  for (std::size_t n = 0; n < N; ++n)
    norm.stats[n].mean = norm.stats[n].count ? sum[n] / static_cast<double>(norm.stats[n].count) : 0.0;
  std::vector<double> sq(N, 0.0);
  for (const auto& r : train)
    for (std::size_t t = 0; t < r.T; ++t)
      for (std::size_t n = 0; n < N; ++n)
        if (r.observed(t, n)) {
          const double d = r.value(t, n) - norm.stats[n].mean;
          sq[n] += d * d;
        }
  for (std::size_t n = 0; n < N; ++n) {
    auto& s = norm.stats[n];
    s.std = s.count ? std::sqrt(sq[n] / static_cast<double>(s.count)) : 0.0;
    if (s.std == 0.0) {
      s.constant = true;
      s.std = 1.0;
    }
  }
  return norm;
}

/// Fits on the training split only and applies to every split.
inline Normalizer zscore_fit_apply(SplitDataset& data) {
  Normalizer norm = fit_zscore(data.train);
  norm.apply(data.train);
  norm.apply(data.val);
  norm.apply(data.test);
  return norm;
}

}  // namespace smart
