#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccenet/tensor.hpp"

namespace ccenet {

/// Pixel-level confusion counts of one binary prediction.
struct Confusion {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

inline Confusion confusion(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) +
                     " pixels, ground truth " + std::to_string(gt.size()));
  }
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5;
    const bool g = gt[i] >= 0.5;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline Confusion confusion(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("confusion: shapes " + pred.shape().str() + " and " + gt.shape().str());
  }
  return confusion(pred.data(), gt.data());
}

struct Scores {
  double ac = 0.0;
  double di = 0.0;
  double ja = 0.0;
  double se = 0.0;
  double sp = 0.0;
};

/// The five challenge metrics. A ratio whose numerator and denominator are
/// both zero counts as full agreement (1.0): empty-vs-empty gives
/// JA = DI = SE = 1, an all-lesion image gives SP = 1.
inline Scores compute_metrics(const Confusion& c) {
  auto ratio = [](double num, double den) { return den == 0.0 ? 1.0 : num / den; };
  const double tp = static_cast<double>(c.tp);
  const double tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn);
  Scores s;
  s.ac = ratio(tp + tn, tp + tn + fp + fn);
  s.di = ratio(2.0 * tp, 2.0 * tp + fn + fp);
  s.ja = ratio(tp, tp + fn + fp);
  s.se = ratio(tp, tp + fn);
  s.sp = ratio(tn, tn + fp);
  return s;
}

struct ImageRecord {
  std::string id;
  std::string category;
  Confusion counts;
  Scores scores;
};

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges over [0,1]
  std::vector<std::size_t> counts;
};

struct MetricsReport {
  std::vector<ImageRecord> records;
  Scores overall;
  std::map<std::string, Scores> per_category;
  std::map<std::string, std::size_t> category_counts;
  Histogram ja_histogram;
};

inline Scores mean_scores(const std::vector<const ImageRecord*>& recs) {
  Scores m;
  for (const ImageRecord* r : recs) {
    m.ac += r->scores.ac;
    m.di += r->scores.di;
    m.ja += r->scores.ja;
    m.se += r->scores.se;
    m.sp += r->scores.sp;
  }
  const double k = static_cast<double>(recs.size());
  m.ac /= k;
  m.di /= k;
  m.ja /= k;
  m.se /= k;
  m.sp /= k;
  return m;
}

inline Histogram ja_histogram(const std::vector<ImageRecord>& records, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(static_cast<double>(b) / bins);
  for (const auto& r : records) {
    auto b = static_cast<std::size_t>(std::floor(r.scores.ja * static_cast<double>(bins)));
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

/// Unweighted per-image means, overall and per category.
inline MetricsReport aggregate(std::vector<ImageRecord> records, std::size_t bins = 10) {
  if (records.empty()) throw std::invalid_argument("aggregate: no records");
  MetricsReport rep;
  rep.records = std::move(records);
  std::vector<const ImageRecord*> all;
  std::map<std::string, std::vector<const ImageRecord*>> groups;
  for (const auto& r : rep.records) {
    all.push_back(&r);
    groups[r.category].push_back(&r);
  }
  rep.overall = mean_scores(all);
  for (const auto& [name, recs] : groups) {
    rep.per_category[name] = mean_scores(recs);
    rep.category_counts[name] = recs.size();
  }
  rep.ja_histogram = ja_histogram(rep.records, bins);
  return rep;
}

/// Percentage rounded to one decimal, as reported in tables.
inline double percent(double v) { return std::round(v * 1000.0) / 10.0; }

inline nlohmann::json scores_json(const Scores& s) {
  return nlohmann::json{{"AC", percent(s.ac)},
                        {"DI", percent(s.di)},
                        {"JA", percent(s.ja)},
                        {"SE", percent(s.se)},
                        {"SP", percent(s.sp)}};
}

inline nlohmann::json report_json(const MetricsReport& rep) {
  nlohmann::json groups;
  groups["overall"] = scores_json(rep.overall);
  nlohmann::json counts;
  counts["overall"] = rep.records.size();
  for (const auto& [name, s] : rep.per_category) {
    groups[name] = scores_json(s);
    counts[name] = rep.category_counts.at(name);
  }
  return nlohmann::json{{"groups", groups}, {"images", counts}};
}

inline void write_records_csv(const std::string& path, const MetricsReport& rep) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "id,category,TP,TN,FP,FN,AC,DI,JA,SE,SP\n";
  os.precision(17);
  for (const auto& r : rep.records) {
    os << r.id << "," << r.category << "," << r.counts.tp << "," << r.counts.tn << ","
       << r.counts.fp << "," << r.counts.fn << "," << r.scores.ac << "," << r.scores.di << ","
       << r.scores.ja << "," << r.scores.se << "," << r.scores.sp << "\n";
  }
}

inline void write_histogram_csv(const std::string& path, const Histogram& h) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "bin_left,bin_right,count\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    os << h.edges[b] << "," << h.edges[b + 1] << "," << h.counts[b] << "\n";
  }
}

}  // namespace ccenet
