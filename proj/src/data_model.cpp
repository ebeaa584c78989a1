#include "mnar/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

namespace mnar {

Dataset::Dataset(Eigen::VectorXi a, Eigen::VectorXd y, Eigen::MatrixXd x, MaskMatrix r)
    : a_(std::move(a)), y_(std::move(y)), x_(std::move(x)), r_(std::move(r)) {
  validate();
  // Normalize absent cells so equality and serialization never see stale values.
  for (Eigen::Index i = 0; i < x_.rows(); ++i)
    for (Eigen::Index j = 0; j < x_.cols(); ++j)
      if (r_(i, j) == 0) x_(i, j) = 0.0;
}

Dataset Dataset::complete(Eigen::VectorXi a, Eigen::VectorXd y, Eigen::MatrixXd x) {
  MaskMatrix r = MaskMatrix::Ones(x.rows(), x.cols());
  return Dataset(std::move(a), std::move(y), std::move(x), std::move(r));
}

void Dataset::validate() const {
  const auto n = y_.size();
  if (n < 1) throw DataError(DataError::Kind::Validation, "dataset must contain at least one unit");
  if (x_.cols() < 1) throw DataError(DataError::Kind::Validation, "dataset must contain at least one covariate");
  if (a_.size() != n || x_.rows() != n || r_.rows() != n || r_.cols() != x_.cols())
    throw DataError(DataError::Kind::Validation, "dataset component sizes disagree");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a_(i) != 0 && a_(i) != 1)
      throw DataError(DataError::Kind::Validation,
                      "treatment must be 0 or 1 (unit " + std::to_string(i) + ")");
    if (!std::isfinite(y_(i)))
      throw DataError(DataError::Kind::Validation, "outcome is not finite (unit " + std::to_string(i) + ")");
    for (Eigen::Index j = 0; j < x_.cols(); ++j) {
      if (r_(i, j) > 1) throw DataError(DataError::Kind::Validation, "mask entries must be 0 or 1");
      if (r_(i, j) == 1 && !std::isfinite(x_(i, j)))
        throw DataError(DataError::Kind::Validation,
                        "observed covariate is not finite (unit " + std::to_string(i) + ")");
    }
  }
}

bool Dataset::complete_case(std::size_t i) const {
  for (Eigen::Index j = 0; j < r_.cols(); ++j)
    if (r_(static_cast<Eigen::Index>(i), j) == 0) return false;
  return true;
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  const auto m = static_cast<Eigen::Index>(rows.size());
  Eigen::VectorXi a(m);
  Eigen::VectorXd y(m);
  Eigen::MatrixXd x(m, x_.cols());
  MaskMatrix r(m, r_.cols());
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto i = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(k)]);
    a(k) = a_(i);
    y(k) = y_(i);
    x.row(k) = x_.row(i);
    r.row(k) = r_.row(i);
  }
  return Dataset(std::move(a), std::move(y), std::move(x), std::move(r));
}

bool Dataset::operator==(const Dataset& o) const {
  return a_ == o.a_ && y_ == o.y_ && x_ == o.x_ && r_ == o.r_;
}

Pattern::Pattern(std::vector<std::uint8_t> b) : bits(std::move(b)) {
  for (std::size_t j = 0; j < bits.size(); ++j) (bits[j] ? obs_idx : mis_idx).push_back(j);
}

bool Pattern::observed_subset_of(const Pattern& other) const {
  for (auto j : obs_idx)
    if (!other.bits[j]) return false;
  return true;
}

std::string Pattern::to_string() const {
  std::string s;
  for (auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

Pattern pattern_of(const Dataset& d, std::size_t i) {
  std::vector<std::uint8_t> bits(d.p());
  for (std::size_t j = 0; j < d.p(); ++j) bits[j] = d.observed(i, j) ? 1 : 0;
  return Pattern(std::move(bits));
}

const std::vector<std::size_t>& PatternIndex::units(const Pattern& pat) const {
  static const std::vector<std::size_t> kEmpty;
  auto it = groups.find(pat);
  return it == groups.end() ? kEmpty : it->second;
}

std::vector<Pattern> PatternIndex::incomplete_patterns() const {
  std::vector<Pattern> out;
  for (const auto& [pat, units] : groups)
    if (!pat.is_complete()) out.push_back(pat);
  return out;
}

PatternIndex index_patterns(const Dataset& d) {
  PatternIndex idx;
  idx.complete = Pattern::full(d.p());
  for (std::size_t i = 0; i < d.n(); ++i) idx.groups[pattern_of(d, i)].push_back(i);
  return idx;
}

PatternSlice split_by_pattern(const Dataset& d, const PatternIndex& idx, const Pattern& pat) {
  PatternSlice s;
  s.units = idx.units(pat);
  s.mis_idx = pat.mis_idx;
  s.x_obs.resize(static_cast<Eigen::Index>(s.units.size()), static_cast<Eigen::Index>(pat.obs_idx.size()));
  for (std::size_t k = 0; k < s.units.size(); ++k)
    for (std::size_t c = 0; c < pat.obs_idx.size(); ++c)
      s.x_obs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) =
          d.x_values()(static_cast<Eigen::Index>(s.units[k]), static_cast<Eigen::Index>(pat.obs_idx[c]));
  return s;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cur.push_back('"');
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  for (auto& s : cells) {
    auto b = s.find_first_not_of(" \t\r");
    auto e = s.find_last_not_of(" \t\r");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return cells;
}

bool is_missing(const std::string& s) { return s.empty() || s == "NA"; }

std::optional<double> parse_real(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string where(const std::string& path, std::size_t line) {
  return path + ":" + std::to_string(line) + ": ";
}

}  // namespace

WeightedDataset load_weighted_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::Io, "cannot open " + path);

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  if (line_no == 0 || line.find_first_not_of(" \t\r") == std::string::npos)
    throw DataError(DataError::Kind::Schema, path + ": missing header row");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM

  const auto header = split_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (col.count(header[k])) throw DataError(DataError::Kind::Schema, path + ": duplicate column '" + header[k] + "'");
    col[header[k]] = k;
  }

  std::vector<std::string> xcols = schema.x;
  if (xcols.empty()) {
    const std::regex re("x([0-9]+)");
    std::vector<std::pair<int, std::string>> found;
    for (const auto& h : header) {
      std::smatch m;
      if (std::regex_match(h, m, re)) found.emplace_back(std::stoi(m[1].str()), h);
    }
    std::sort(found.begin(), found.end());
    for (std::size_t k = 0; k < found.size(); ++k) {
      if (found[k].first != static_cast<int>(k + 1))
        throw DataError(DataError::Kind::Schema, path + ": covariate columns must be x1..xp without gaps");
      xcols.push_back(found[k].second);
    }
  }

  std::set<std::string> known{schema.a, schema.y};
  known.insert(xcols.begin(), xcols.end());
  if (!schema.weight.empty()) known.insert(schema.weight);
  for (const auto& h : header)
    if (!known.count(h)) throw DataError(DataError::Kind::Schema, path + ": unknown column '" + h + "'");
  for (const auto& name : known)
    if (!col.count(name)) throw DataError(DataError::Kind::Schema, path + ": missing column '" + name + "'");
  if (xcols.empty()) throw DataError(DataError::Kind::Schema, path + ": no covariate columns");

  const std::size_t p = xcols.size();
  std::vector<int> a;
  std::vector<double> y, w;
  std::vector<double> xv;
  std::vector<std::uint8_t> rv;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size())
      throw DataError(DataError::Kind::Parse, where(path, line_no) + "expected " + std::to_string(header.size()) +
                                                  " fields, found " + std::to_string(cells.size()));
    const auto& as = cells[col[schema.a]];
    if (is_missing(as)) throw DataError(DataError::Kind::Validation, where(path, line_no) + "missing treatment value");
    auto av = parse_real(as);
    if (!av) throw DataError(DataError::Kind::Parse, where(path, line_no) + "cannot parse treatment '" + as + "'");
    if (*av != 0.0 && *av != 1.0)
      throw DataError(DataError::Kind::Validation, where(path, line_no) + "treatment must be 0 or 1, got '" + as + "'");
    const auto& ys = cells[col[schema.y]];
    if (is_missing(ys)) throw DataError(DataError::Kind::Validation, where(path, line_no) + "missing outcome value");
    auto yv = parse_real(ys);
    if (!yv) throw DataError(DataError::Kind::Parse, where(path, line_no) + "cannot parse outcome '" + ys + "'");
    a.push_back(static_cast<int>(*av));
    y.push_back(*yv);
    for (std::size_t j = 0; j < p; ++j) {
      const auto& s = cells[col[xcols[j]]];
      if (is_missing(s)) {
        xv.push_back(0.0);
        rv.push_back(0);
      } else {
        auto v = parse_real(s);
        if (!v)
          throw DataError(DataError::Kind::Parse,
                          where(path, line_no) + "cannot parse " + xcols[j] + " value '" + s + "'");
        xv.push_back(*v);
        rv.push_back(1);
      }
    }
    if (!schema.weight.empty()) {
      const auto& s = cells[col[schema.weight]];
      auto v = is_missing(s) ? std::nullopt : parse_real(s);
      if (!v || *v < 0.0)
        throw DataError(DataError::Kind::Validation, where(path, line_no) + "weight must be a nonnegative number");
      w.push_back(*v);
    }
  }
  if (y.empty()) throw DataError(DataError::Kind::Validation, path + ": no data rows");

  const auto n = static_cast<Eigen::Index>(y.size());
  Eigen::VectorXi av(n);
  Eigen::VectorXd yv(n);
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(p));
  MaskMatrix r(n, static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 0; i < n; ++i) {
    av(i) = a[static_cast<std::size_t>(i)];
    yv(i) = y[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < p; ++j) {
      x(i, static_cast<Eigen::Index>(j)) = xv[static_cast<std::size_t>(i) * p + j];
      r(i, static_cast<Eigen::Index>(j)) = rv[static_cast<std::size_t>(i) * p + j];
    }
  }
  return {Dataset(std::move(av), std::move(yv), std::move(x), std::move(r)), std::move(w)};
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  CsvSchema s = schema;
  s.weight.clear();
  return load_weighted_csv(path, s).data;
}

void write_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError(DataError::Kind::Io, "cannot write " + path);
  out << "a,y";
  for (std::size_t j = 0; j < d.p(); ++j) out << ",x" << (j + 1);
  out << '\n';
  char buf[64];
  auto put = [&](double v) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    out.write(buf, ptr - buf);
  };
  for (std::size_t i = 0; i < d.n(); ++i) {
    out << d.a()(static_cast<Eigen::Index>(i)) << ',';
    put(d.y()(static_cast<Eigen::Index>(i)));
    for (std::size_t j = 0; j < d.p(); ++j) {
      out << ',';
      if (auto v = d.x(i, j)) put(*v);
    }
    out << '\n';
  }
}

}  // namespace mnar
