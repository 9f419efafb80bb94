#pragma once

#include "diwift/common.hpp"
#include "diwift/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace diwift {

enum class FieldKind { categorical, numerical };

struct FieldSchema {
  std::string name;
  FieldKind kind = FieldKind::numerical;
  std::vector<std::string> categories;  // categorical only, encoding order
  double min = 0.0;                     // numerical only
  double max = 1.0;
  bool has_bounds = false;

  std::size_t width() const { return kind == FieldKind::categorical ? categories.size() : 1; }
};

/// Column k of the encoded matrix belongs to field `field`; `category` is the
/// one-hot slot, or empty for a numerical column.
struct FeatureRef {
  std::size_t field = 0;
  std::optional<std::size_t> category;
};

struct Dataset {
  RowMatrix x;  // n x d, every entry in [0,1]
  Vector y;     // n labels in {0,1}
  std::vector<FieldSchema> schema;
  std::vector<FeatureRef> featmap;
  // Unscaled values (numerical columns raw, one-hot columns as encoded).
  // Needed to refit scaling bounds after a split.
  std::optional<RowMatrix> raw;
  std::optional<MaskMatrix> relevance;

  std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(x.cols()); }

  std::string feature_name(std::size_t k) const {
    const auto& ref = featmap.at(k);
    const auto& f = schema.at(ref.field);
    if (ref.category) return f.name + "=" + f.categories.at(*ref.category);
    return f.name;
  }
};

inline void check_dataset(const Dataset& ds) {
  if (ds.y.size() != ds.x.rows()) throw DataError("label count does not match row count");
  if (ds.featmap.size() != ds.dim()) throw DataError("feature map length does not match d");
  for (Eigen::Index i = 0; i < ds.x.rows(); ++i)
    for (Eigen::Index k = 0; k < ds.x.cols(); ++k) {
      const double v = ds.x(i, k);
      if (!(v >= 0.0 && v <= 1.0))
        throw DataError("feature value outside [0,1] at row " + std::to_string(i) + ", column " +
                        std::to_string(k));
    }
  for (Eigen::Index i = 0; i < ds.y.size(); ++i)
    if (ds.y[i] != 0.0 && ds.y[i] != 1.0) throw DataError("label not in {0,1} at row " + std::to_string(i));
  if (ds.relevance && (ds.relevance->rows() != ds.x.rows() || ds.relevance->cols() != ds.x.cols()))
    throw DataError("relevance shape mismatch");
}

inline std::vector<FeatureRef> build_featmap(const std::vector<FieldSchema>& schema) {
  std::vector<FeatureRef> refs;
  for (std::size_t f = 0; f < schema.size(); ++f) {
    const auto& field = schema[f];
    if (field.kind == FieldKind::categorical) {
      if (field.categories.empty()) throw ConfigError("categorical field '" + field.name + "' has no categories");
      std::vector<std::string> sorted = field.categories;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ConfigError("categorical field '" + field.name + "' has duplicate categories");
      for (std::size_t c = 0; c < field.categories.size(); ++c) refs.push_back({f, c});
    } else {
      refs.push_back({f, std::nullopt});
    }
  }
  return refs;
}

/// Recompute min/max of every numerical field from `ds.raw`.
inline void fit_bounds(Dataset& ds) {
  if (!ds.raw) return;
  for (std::size_t k = 0; k < ds.featmap.size(); ++k) {
    const auto& ref = ds.featmap[k];
    auto& field = ds.schema[ref.field];
    if (field.kind != FieldKind::numerical || ds.raw->rows() == 0) continue;
    field.min = ds.raw->col(static_cast<Eigen::Index>(k)).minCoeff();
    field.max = ds.raw->col(static_cast<Eigen::Index>(k)).maxCoeff();
    field.has_bounds = true;
  }
}

/// Min-max scale numerical columns of `ds.raw` into `ds.x` with the schema
/// bounds; out-of-range values clamp into [0,1].
inline void apply_bounds(Dataset& ds) {
  if (!ds.raw) return;
  ds.x = *ds.raw;
  for (std::size_t k = 0; k < ds.featmap.size(); ++k) {
    const auto& field = ds.schema[ds.featmap[k].field];
    if (field.kind != FieldKind::numerical) continue;
    auto col = ds.x.col(static_cast<Eigen::Index>(k));
    const double span = field.max - field.min;
    if (!(span > 0.0)) {
      col.setZero();
      continue;
    }
    for (Eigen::Index i = 0; i < col.size(); ++i) col[i] = std::clamp((col[i] - field.min) / span, 0.0, 1.0);
  }
}

namespace detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::istringstream ss(s);
  ss.imbue(std::locale::classic());
  ss >> out;
  return !ss.fail() && ss.eof();
}

}  // namespace detail

/// Read a comma-separated file with a header row. Categorical fields with an
/// empty category list learn their categories (sorted) from the file;
/// numerical fields without bounds learn min/max from the file.
inline Dataset load_csv(const std::string& path, std::vector<FieldSchema> schema, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  const auto header = detail::split_line(line);
  std::map<std::string, std::size_t> col_of;
  for (std::size_t c = 0; c < header.size(); ++c) col_of[detail::trim(header[c])] = c;

  auto find_col = [&](const std::string& name) {
    auto it = col_of.find(name);
    if (it == col_of.end()) throw DataError(path + ": missing column '" + name + "'");
    return it->second;
  };
  const std::size_t label_col = find_col(label_column);
  std::vector<std::size_t> field_cols;
  for (const auto& f : schema) field_cols.push_back(find_col(f.name));

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    rows.push_back(detail::split_line(line));
  }

  for (std::size_t f = 0; f < schema.size(); ++f) {
    auto& field = schema[f];
    if (field.kind == FieldKind::categorical && field.categories.empty()) {
      std::vector<std::string> seen;
      for (const auto& r : rows) {
        const auto v = field_cols[f] < r.size() ? detail::trim(r[field_cols[f]]) : std::string{};
        if (!v.empty()) seen.push_back(v);
      }
      std::sort(seen.begin(), seen.end());
      seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
      if (seen.empty()) throw DataError(path + ": categorical field '" + field.name + "' has no values");
      field.categories = std::move(seen);
    }
  }

  Dataset ds;
  ds.featmap = build_featmap(schema);
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(ds.featmap.size());
  RowMatrix raw = RowMatrix::Zero(n, d);
  ds.y.resize(n);

  // Column offset of each field in the encoded matrix.
  std::vector<Eigen::Index> offset(schema.size());
  for (Eigen::Index k = d - 1; k >= 0; --k) offset[ds.featmap[static_cast<std::size_t>(k)].field] = k;

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    const std::string row_tag = path + ": row " + std::to_string(i + 1);
    const auto label = label_col < r.size() ? detail::trim(r[label_col]) : std::string{};
    double lv = 0;
    if (!detail::parse_double(label, lv) || (lv != 0.0 && lv != 1.0))
      throw DataError(row_tag + ": unparsable label '" + label + "'");
    ds.y[i] = lv;
    for (std::size_t f = 0; f < schema.size(); ++f) {
      const auto& field = schema[f];
      const auto cell = field_cols[f] < r.size() ? detail::trim(r[field_cols[f]]) : std::string{};
      if (field.kind == FieldKind::categorical) {
        if (cell.empty()) continue;  // missing value: all-zero group
        auto it = std::find(field.categories.begin(), field.categories.end(), cell);
        if (it == field.categories.end())
          throw DataError(row_tag + ": unknown category '" + cell + "' for field '" + field.name + "'");
        raw(i, offset[f] + (it - field.categories.begin())) = 1.0;
      } else {
        double v = 0;
        if (!detail::parse_double(cell, v) || !std::isfinite(v))
          throw DataError(row_tag + ": unparsable value '" + cell + "' for field '" + field.name + "'");
        raw(i, offset[f]) = v;
      }
    }
  }

  ds.schema = std::move(schema);
  ds.raw = std::move(raw);
  for (std::size_t k = 0; k < ds.featmap.size(); ++k) {
    auto& field = ds.schema[ds.featmap[k].field];
    if (field.kind != FieldKind::numerical || field.has_bounds || n == 0) continue;
    field.min = ds.raw->col(static_cast<Eigen::Index>(k)).minCoeff();
    field.max = ds.raw->col(static_cast<Eigen::Index>(k)).maxCoeff();
    field.has_bounds = true;
  }
  for (const auto& field : ds.schema)
    if (field.kind == FieldKind::numerical && !(field.max > field.min))
      warn("field '" + field.name + "' has min == max; encoded as a constant 0 column");
  apply_bounds(ds);
  check_dataset(ds);
  return ds;
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.schema = ds.schema;
  out.featmap = ds.featmap;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.x.resize(n, ds.x.cols());
  out.y.resize(n);
  if (ds.raw) out.raw = RowMatrix(n, ds.x.cols());
  if (ds.relevance) out.relevance = MaskMatrix(n, ds.x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
    out.x.row(r) = ds.x.row(i);
    out.y[r] = ds.y[i];
    if (ds.raw) out.raw->row(r) = ds.raw->row(i);
    if (ds.relevance) out.relevance->row(r) = ds.relevance->row(i);
  }
  return out;
}

/// Row-concatenate datasets sharing a schema (scaling is left as stored).
inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dim() != b.dim()) throw DataError("concat: dimension mismatch");
  Dataset out = a;
  out.x.resize(a.x.rows() + b.x.rows(), a.x.cols());
  out.x << a.x, b.x;
  out.y.resize(a.y.size() + b.y.size());
  out.y << a.y, b.y;
  if (a.raw && b.raw) {
    out.raw = RowMatrix(out.x.rows(), out.x.cols());
    *out.raw << *a.raw, *b.raw;
  } else {
    out.raw.reset();
  }
  if (a.relevance && b.relevance) {
    out.relevance = MaskMatrix(out.x.rows(), out.x.cols());
    *out.relevance << *a.relevance, *b.relevance;
  } else {
    out.relevance.reset();
  }
  return out;
}

struct SplitSpec {
  std::array<double, 3> ratios{3.0, 1.0, 1.0};
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train;
  Dataset valid;
  Dataset test;
};

/// Sizes of the (train, valid, test) parts; the remainder goes to train.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (!(total > 0.0) || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
    throw ConfigError("split ratios must be non-negative with a positive sum");
  const auto valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[1] / total));
  const auto test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[2] / total));
  return {n - valid - test, valid, test};
}

/// Refit numerical bounds on `train` and rescale `others` with them.
inline void refit_scaling(Dataset& train, std::initializer_list<Dataset*> others) {
  if (!train.raw) return;
  fit_bounds(train);
  apply_bounds(train);
  for (Dataset* o : others) {
    if (!o->raw) continue;
    o->schema = train.schema;
    apply_bounds(*o);
  }
}

inline Splits split(const Dataset& ds, const SplitSpec& spec) {
  const std::size_t n = ds.rows();
  if (n < 5) throw DataError("split requires at least 5 rows");
  const auto sizes = split_sizes(n, spec.ratios);
  if (sizes[0] == 0 || sizes[1] == 0 || sizes[2] == 0) throw DataError("split produced an empty part");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);
  auto take = [&](std::size_t from, std::size_t count) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                 order.begin() + static_cast<std::ptrdiff_t>(from + count));
    return subset(ds, idx);
  };
  Splits s{take(0, sizes[0]), take(sizes[0], sizes[1]), take(sizes[0] + sizes[1], sizes[2])};
  refit_scaling(s.train, {&s.valid, &s.test});
  check_dataset(s.train);
  check_dataset(s.valid);
  check_dataset(s.test);
  return s;
}

/// X' = P (element-wise) X. The result carries no raw block, so later splits
/// keep the reweighted values.
inline Dataset apply_reweight(const Dataset& ds, const RowMatrix& p) {
  if (p.rows() != ds.x.rows() || p.cols() != ds.x.cols()) throw DataError("reweight shape mismatch");
  Dataset out = ds;
  out.x = p.cwiseProduct(ds.x);
  out.raw.reset();
  check_dataset(out);
  return out;
}

inline Dataset apply_mask(const Dataset& ds, const MaskMatrix& mask) {
  return apply_reweight(ds, mask.cast<double>());
}

// ---------------------------------------------------------------------------
// Synthetic generators: 11 independent standard normal features.

enum class SynKind { syn1, syn2, syn3 };

inline constexpr std::size_t kSynDim = 11;

inline SynKind parse_syn_kind(const std::string& s) {
  if (s == "syn1") return SynKind::syn1;
  if (s == "syn2") return SynKind::syn2;
  if (s == "syn3") return SynKind::syn3;
  throw ConfigError("unknown synthetic kind '" + s + "'");
}

inline std::string to_string(SynKind k) {
  switch (k) {
    case SynKind::syn1: return "syn1";
    case SynKind::syn2: return "syn2";
    case SynKind::syn3: return "syn3";
  }
  return "?";
}

/// True when the row's label follows the syn1 formula (switch on feature 11).
inline bool routes_to_syn1(SynKind kind, const double* raw) {
  switch (kind) {
    case SynKind::syn1: return true;
    case SynKind::syn2: return false;
    case SynKind::syn3: return raw[10] < 0.0;
  }
  return true;
}

inline double syn_logit(SynKind kind, const double* raw) {
  if (routes_to_syn1(kind, raw)) return std::exp(raw[0] * raw[1]);
  return -10.0 * std::sin(2.0 * raw[6]) + 2.0 * std::abs(raw[7]) + raw[8] + std::exp(-raw[9]);
}

/// P(y=1|x) = 1/(1+logit). The syn2 logit can be non-positive, where the
/// expression leaves [0,1]; those rows get probability 1.
inline double syn_positive_prob(double logit) { return 1.0 / (1.0 + std::max(logit, 0.0)); }

inline std::vector<std::size_t> syn_relevant_features(SynKind kind, const double* raw) {
  std::vector<std::size_t> rel;
  if (routes_to_syn1(kind, raw))
    rel = {0, 1};
  else
    rel = {6, 7, 8, 9};
  if (kind == SynKind::syn3) rel.push_back(10);
  return rel;
}

inline std::vector<FieldSchema> syn_schema() {
  std::vector<FieldSchema> schema;
  for (std::size_t k = 0; k < kSynDim; ++k) {
    FieldSchema f;
    f.name = "x" + std::to_string(k + 1);
    f.kind = FieldKind::numerical;
    schema.push_back(f);
  }
  return schema;
}

/// Dataset over raw synthetic features with given labels; relevance follows
/// the routing of each row.
inline Dataset syn_dataset(SynKind kind, RowMatrix raw, Vector y) {
  const auto n = raw.rows();
  if (y.size() != n) throw DataError("synthetic labels do not match rows");
  Dataset ds;
  ds.schema = syn_schema();
  ds.featmap = build_featmap(ds.schema);
  ds.y = std::move(y);
  ds.relevance = MaskMatrix::Zero(n, static_cast<Eigen::Index>(kSynDim));
  for (Eigen::Index i = 0; i < n; ++i)
    for (auto k : syn_relevant_features(kind, raw.row(i).data())) (*ds.relevance)(i, static_cast<Eigen::Index>(k)) = 1;
  ds.raw = std::move(raw);
  fit_bounds(ds);
  apply_bounds(ds);
  check_dataset(ds);
  return ds;
}

/// Labels rows of a raw feature block in place of drawing features.
inline Dataset label_syn_rows(SynKind kind, RowMatrix raw, Rng& rng) {
  Vector y(raw.rows());
  for (Eigen::Index i = 0; i < raw.rows(); ++i)
    y[i] = rng.bernoulli(syn_positive_prob(syn_logit(kind, raw.row(i).data()))) ? 1.0 : 0.0;
  return syn_dataset(kind, std::move(raw), std::move(y));
}

inline Dataset gen_syn(SynKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic dataset needs n >= 1");
  Rng rng(seed);
  RowMatrix raw(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kSynDim));
  for (Eigen::Index i = 0; i < raw.rows(); ++i)
    for (Eigen::Index k = 0; k < raw.cols(); ++k) raw(i, k) = rng.normal();
  return label_syn_rows(kind, std::move(raw), rng);
}

/// Label-biased sample: rows are drawn as in gen_syn and kept with probability
/// `accept_pos` when y = 1 and `accept_neg` when y = 0, until n are kept.
inline Dataset gen_syn_shifted(SynKind kind, std::size_t n, std::uint64_t seed, double accept_pos, double accept_neg) {
  if (n < 1) throw ConfigError("synthetic dataset needs n >= 1");
  if (!(accept_pos > 0.0 && accept_pos <= 1.0 && accept_neg > 0.0 && accept_neg <= 1.0))
    throw ConfigError("acceptance probabilities must lie in (0,1]");
  Rng rng(seed);
  RowMatrix raw(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kSynDim));
  Vector y(static_cast<Eigen::Index>(n));
  std::array<double, kSynDim> row{};
  for (Eigen::Index kept = 0; kept < raw.rows();) {
    for (auto& v : row) v = rng.normal();
    const double label = rng.bernoulli(syn_positive_prob(syn_logit(kind, row.data()))) ? 1.0 : 0.0;
    if (!rng.bernoulli(label == 1.0 ? accept_pos : accept_neg)) continue;
    for (std::size_t k = 0; k < kSynDim; ++k) raw(kept, static_cast<Eigen::Index>(k)) = row[k];
    y[kept++] = label;
  }
  return syn_dataset(kind, std::move(raw), std::move(y));
}

// ---------------------------------------------------------------------------
// Export.

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Writes raw values when available (so a reload refits scaling), otherwise
/// the encoded matrix. Label column is `_label`.
inline void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  bool all_numeric = std::all_of(ds.schema.begin(), ds.schema.end(),
                                 [](const FieldSchema& f) { return f.kind == FieldKind::numerical; });
  const RowMatrix& values = (ds.raw && all_numeric) ? *ds.raw : ds.x;
  for (std::size_t k = 0; k < ds.dim(); ++k) out << (all_numeric ? ds.schema[k].name : ds.feature_name(k)) << ',';
  out << "_label\n";
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index k = 0; k < values.cols(); ++k) out << format_double(values(i, k)) << ',';
    out << static_cast<int>(ds.y[i]) << '\n';
  }
  if (!out) throw DataError("write failed: " + path);
}

/// One line per row: semicolon-separated 0-based indices of relevant columns.
inline void write_relevance(const MaskMatrix& rel, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (Eigen::Index i = 0; i < rel.rows(); ++i) {
    bool first = true;
    for (Eigen::Index k = 0; k < rel.cols(); ++k) {
      if (!rel(i, k)) continue;
      if (!first) out << ';';
      out << k;
      first = false;
    }
    out << '\n';
  }
}

inline MaskMatrix read_relevance(const std::string& path, std::size_t n, std::size_t d) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  MaskMatrix rel = MaskMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw DataError(path + ": fewer relevance rows than data rows");
    std::istringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ';')) {
      tok = detail::trim(tok);
      if (tok.empty()) continue;
      const auto k = std::stoul(tok);
      if (k >= d) throw DataError(path + ": relevance index out of range");
      rel(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = 1;
    }
  }
  return rel;
}

}  // namespace diwift
